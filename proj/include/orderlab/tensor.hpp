#ifndef ORDERLAB_TENSOR_HPP
#define ORDERLAB_TENSOR_HPP

// Dense row-major matrices, small multilayer perceptrons with analytic
// backward passes, and an Adam optimizer. Everything is double precision.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace orderlab {

class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Mat(std::size_t rows, std::size_t cols, std::vector<double> data);

    /// Builds a matrix from nested rows; all rows must have equal length.
    static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Mat identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    void fill(double v);
    /// Selects the listed rows, in order.
    Mat gather_rows(std::span<const std::size_t> idx) const;
    /// Appends the rows of `other`; column counts must agree (or this is empty).
    void append_rows(const Mat& other);
    void append_row(std::span<const double> r);
    Mat transposed() const;
    bool all_finite() const noexcept;

    friend bool operator==(const Mat&, const Mat&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// a * b
Mat matmul(const Mat& a, const Mat& b);
/// aᵀ * b
Mat matmul_tn(const Mat& a, const Mat& b);
/// a * bᵀ
Mat matmul_nt(const Mat& a, const Mat& b);

double squared_distance(std::span<const double> a, std::span<const double> b) noexcept;
double dot(std::span<const double> a, std::span<const double> b) noexcept;

enum class Activation { relu, tanh, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct MlpParams {
    std::vector<std::size_t> layer_dims;
    std::vector<Mat> weights;  // weights[i]: layer_dims[i] x layer_dims[i+1]
    std::vector<Mat> biases;   // biases[i]: 1 x layer_dims[i+1]
    std::vector<Activation> activations;

    std::size_t num_layers() const noexcept { return weights.size(); }
    std::size_t in_dim() const noexcept { return layer_dims.front(); }
    std::size_t out_dim() const noexcept { return layer_dims.back(); }
    std::size_t num_params() const noexcept;

    /// Glorot-uniform weights, zero biases. `acts` holds one tag per layer.
    static MlpParams init(std::vector<std::size_t> dims, std::vector<Activation> acts,
                          std::mt19937_64& rng);
    /// Hidden layers use `hidden`, the last layer is linear.
    static MlpParams init(std::vector<std::size_t> dims, Activation hidden, std::mt19937_64& rng);

    friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Gradient buffer with the same layout as an MlpParams.
struct GradBuf {
    std::vector<Mat> weights;
    std::vector<Mat> biases;

    static GradBuf zeros_like(const MlpParams& p);
    void zero();
    GradBuf& operator+=(const GradBuf& other);
    GradBuf& operator*=(double s);
    bool congruent_with(const MlpParams& p) const noexcept;
    friend bool operator==(const GradBuf&, const GradBuf&) = default;
};

/// Per-layer activation record kept by mlp_forward.
struct MlpCache {
    std::vector<Mat> inputs;       // input to each layer
    std::vector<Mat> pre;          // pre-activation of each layer
    std::vector<Mat> post;         // output of each layer
    std::vector<std::size_t> layer_dims;
    std::uint64_t fingerprint = 0;  // hash of the parameters used
};

std::uint64_t fingerprint(const MlpParams& p) noexcept;

std::pair<Mat, MlpCache> mlp_forward(const MlpParams& params, const Mat& x);
/// Forward pass without keeping an activation record.
Mat mlp_apply(const MlpParams& params, const Mat& x);
std::pair<GradBuf, Mat> mlp_backward(const MlpParams& params, const MlpCache& cache,
                                     const Mat& grad_y);

std::vector<double> flatten(const MlpParams& p);
std::vector<double> flatten(const GradBuf& g);
void unflatten_into(MlpParams& p, std::span<const double> flat);

struct AdamState {
    GradBuf m;
    GradBuf v;
    std::size_t step_count = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_params(const MlpParams& p, double lr);
    friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Bias-corrected Adam update applied in place (descends `grads`).
void adam_step(MlpParams& params, const GradBuf& grads, AdamState& state);

/// Objective over a flat vector that writes its analytic gradient into `grad`.
using FlatObjective = std::function<double(std::span<const double> x, std::span<double> grad)>;

/// Max over coordinates of |analytic - central| / max(1, |central|).
double grad_check(const FlatObjective& fn, std::vector<double> x, double h);

/// Same check with the coordinates being the parameters of an MLP.
using MlpObjective = std::function<double(const MlpParams& p, GradBuf* grad)>;
double grad_check(const MlpObjective& fn, const MlpParams& params, double h);

}  // namespace orderlab

#endif  // ORDERLAB_TENSOR_HPP
