#include "orderlab/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include "orderlab/errors.hpp"

namespace orderlab {

namespace {

std::string shape_str(const Mat& m) {
    std::ostringstream os;
    os << "(" << m.rows() << "x" << m.cols() << ")";
    return os.str();
}

double activate(Activation a, double z) noexcept {
    switch (a) {
        case Activation::relu: return z > 0.0 ? z : 0.0;
        case Activation::tanh: return std::tanh(z);
        case Activation::identity: return z;
    }
    return z;
}

// Derivative expressed through the pre-activation z and output y.
double activate_grad(Activation a, double z, double y) noexcept {
    switch (a) {
        case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
        case Activation::tanh: return 1.0 - y * y;
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

void check_finite_span(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite entry in ") + what);
    }
}

}  // namespace

Mat::Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw DimensionError("Mat: data length does not match rows*cols");
    }
}

Mat Mat::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Mat m;
    for (const auto& r : rows) {
        std::vector<double> tmp(r);
        m.append_row(tmp);
    }
    return m;
}

Mat Mat::identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

void Mat::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Mat Mat::gather_rows(std::span<const std::size_t> idx) const {
    Mat out(idx.size(), cols_);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] >= rows_) throw DimensionError("gather_rows: index out of range");
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(idx[k] * cols_), cols_,
                    out.data_.begin() + static_cast<std::ptrdiff_t>(k * cols_));
    }
    return out;
}

void Mat::append_rows(const Mat& other) {
    if (other.rows_ == 0) return;
    if (rows_ == 0 && cols_ == 0) cols_ = other.cols_;
    if (other.cols_ != cols_) {
        throw DimensionError("append_rows: " + shape_str(*this) + " vs " + shape_str(other));
    }
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
}

void Mat::append_row(std::span<const double> r) {
    if (rows_ == 0 && cols_ == 0) cols_ = r.size();
    if (r.size() != cols_) throw DimensionError("append_row: length mismatch");
    data_.insert(data_.end(), r.begin(), r.end());
    ++rows_;
}

Mat Mat::transposed() const {
    Mat t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

bool Mat::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + shape_str(a) + " * " + shape_str(b));
    }
    Mat c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* crow = c.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: " + shape_str(a) + "^T * " + shape_str(b));
    }
    Mat c(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* brow = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            double* crow = c.row(i).data();
            for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: " + shape_str(a) + " * " + shape_str(b) + "^T");
    }
    Mat c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
    return c;
}

double squared_distance(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = a[k] - b[k];
        s += d * d;
    }
    return s;
}

double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "identity";
}

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw ConfigError("unknown activation '" + s + "'");
}

std::size_t MlpParams::num_params() const noexcept {
    std::size_t n = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) n += weights[i].size() + biases[i].size();
    return n;
}

MlpParams MlpParams::init(std::vector<std::size_t> dims, std::vector<Activation> acts,
                          std::mt19937_64& rng) {
    if (dims.size() < 2) throw DimensionError("MlpParams::init: need at least two layer dims");
    if (acts.size() != dims.size() - 1) {
        throw DimensionError("MlpParams::init: one activation per layer required");
    }
    MlpParams p;
    p.layer_dims = std::move(dims);
    p.activations = std::move(acts);
    for (std::size_t i = 0; i + 1 < p.layer_dims.size(); ++i) {
        const std::size_t fan_in = p.layer_dims[i];
        const std::size_t fan_out = p.layer_dims[i + 1];
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> u(-a, a);
        Mat w(fan_in, fan_out);
        for (double& v : w.data()) v = u(rng);
        p.weights.push_back(std::move(w));
        p.biases.emplace_back(1, fan_out);
    }
    return p;
}

MlpParams MlpParams::init(std::vector<std::size_t> dims, Activation hidden, std::mt19937_64& rng) {
    std::vector<Activation> acts(dims.size() > 1 ? dims.size() - 1 : 0, hidden);
    if (!acts.empty()) acts.back() = Activation::identity;
    return init(std::move(dims), std::move(acts), rng);
}

GradBuf GradBuf::zeros_like(const MlpParams& p) {
    GradBuf g;
    for (std::size_t i = 0; i < p.num_layers(); ++i) {
        g.weights.emplace_back(p.weights[i].rows(), p.weights[i].cols());
        g.biases.emplace_back(p.biases[i].rows(), p.biases[i].cols());
    }
    return g;
}

void GradBuf::zero() {
    for (auto& w : weights) w.fill(0.0);
    for (auto& b : biases) b.fill(0.0);
}

GradBuf& GradBuf::operator+=(const GradBuf& other) {
    if (other.weights.size() != weights.size()) throw DimensionError("GradBuf += : layer count");
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i].size() != other.weights[i].size() ||
            biases[i].size() != other.biases[i].size()) {
            throw DimensionError("GradBuf += : shape mismatch");
        }
        auto& w = weights[i].data();
        const auto& ow = other.weights[i].data();
        for (std::size_t k = 0; k < w.size(); ++k) w[k] += ow[k];
        auto& b = biases[i].data();
        const auto& ob = other.biases[i].data();
        for (std::size_t k = 0; k < b.size(); ++k) b[k] += ob[k];
    }
    return *this;
}

GradBuf& GradBuf::operator*=(double s) {
    for (auto& w : weights)
        for (double& v : w.data()) v *= s;
    for (auto& b : biases)
        for (double& v : b.data()) v *= s;
    return *this;
}

bool GradBuf::congruent_with(const MlpParams& p) const noexcept {
    if (weights.size() != p.weights.size() || biases.size() != p.biases.size()) return false;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i].rows() != p.weights[i].rows() || weights[i].cols() != p.weights[i].cols())
            return false;
        if (biases[i].rows() != p.biases[i].rows() || biases[i].cols() != p.biases[i].cols())
            return false;
    }
    return true;
}

std::uint64_t fingerprint(const MlpParams& p) noexcept {
    // FNV-1a over the bit patterns of every parameter.
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](double v) {
        h ^= std::bit_cast<std::uint64_t>(v);
        h *= 1099511628211ULL;
    };
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
        for (double v : p.weights[i].data()) mix(v);
        for (double v : p.biases[i].data()) mix(v);
    }
    return h;
}

namespace {

Mat layer_forward(const MlpParams& params, std::size_t l, const Mat& in, Mat* pre_out) {
    Mat z = matmul(in, params.weights[l]);
    const auto& b = params.biases[l].data();
    for (std::size_t r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
    }
    Mat y = z;
    if (params.activations[l] != Activation::identity) {
        for (double& v : y.data()) v = activate(params.activations[l], v);
    }
    if (pre_out) *pre_out = std::move(z);
    return y;
}

void check_input(const MlpParams& params, const Mat& x) {
    if (params.weights.empty()) throw DimensionError("mlp_forward: network has no layers");
    if (x.cols() != params.in_dim()) {
        throw DimensionError("mlp_forward: input has " + std::to_string(x.cols()) +
                             " columns, network expects " + std::to_string(params.in_dim()));
    }
}

}  // namespace

std::pair<Mat, MlpCache> mlp_forward(const MlpParams& params, const Mat& x) {
    check_input(params, x);
    MlpCache cache;
    cache.layer_dims = params.layer_dims;
    cache.fingerprint = fingerprint(params);
    Mat cur = x;
    for (std::size_t l = 0; l < params.num_layers(); ++l) {
        Mat pre;
        Mat out = layer_forward(params, l, cur, &pre);
        cache.inputs.push_back(std::move(cur));
        cache.pre.push_back(std::move(pre));
        cache.post.push_back(out);
        cur = std::move(out);
    }
    return {std::move(cur), std::move(cache)};
}

Mat mlp_apply(const MlpParams& params, const Mat& x) {
    check_input(params, x);
    Mat cur = x;
    for (std::size_t l = 0; l < params.num_layers(); ++l) cur = layer_forward(params, l, cur, nullptr);
    return cur;
}

std::pair<GradBuf, Mat> mlp_backward(const MlpParams& params, const MlpCache& cache,
                                     const Mat& grad_y) {
    if (cache.layer_dims != params.layer_dims || cache.inputs.size() != params.num_layers() ||
        cache.fingerprint != fingerprint(params)) {
        throw ContractError("mlp_backward: cache was produced by different parameters");
    }
    const Mat& y = cache.post.back();
    if (grad_y.rows() != y.rows() || grad_y.cols() != y.cols()) {
        throw DimensionError("mlp_backward: grad_y " + shape_str(grad_y) + " vs output " +
                             shape_str(y));
    }
    GradBuf grads = GradBuf::zeros_like(params);
    Mat delta = grad_y;
    for (std::size_t l = params.num_layers(); l-- > 0;) {
        const Activation act = params.activations[l];
        if (act != Activation::identity) {
            const auto& z = cache.pre[l].data();
            const auto& out = cache.post[l].data();
            auto& d = delta.data();
            for (std::size_t k = 0; k < d.size(); ++k) d[k] *= activate_grad(act, z[k], out[k]);
        }
        grads.weights[l] = matmul_tn(cache.inputs[l], delta);
        auto& gb = grads.biases[l].data();
        for (std::size_t r = 0; r < delta.rows(); ++r) {
            auto row = delta.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
        }
        delta = matmul_nt(delta, params.weights[l]);
    }
    return {std::move(grads), std::move(delta)};
}

std::vector<double> flatten(const MlpParams& p) {
    std::vector<double> out;
    out.reserve(p.num_params());
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
        out.insert(out.end(), p.weights[i].data().begin(), p.weights[i].data().end());
        out.insert(out.end(), p.biases[i].data().begin(), p.biases[i].data().end());
    }
    return out;
}

std::vector<double> flatten(const GradBuf& g) {
    std::vector<double> out;
    for (std::size_t i = 0; i < g.weights.size(); ++i) {
        out.insert(out.end(), g.weights[i].data().begin(), g.weights[i].data().end());
        out.insert(out.end(), g.biases[i].data().begin(), g.biases[i].data().end());
    }
    return out;
}

void unflatten_into(MlpParams& p, std::span<const double> flat) {
    if (flat.size() != p.num_params()) throw DimensionError("unflatten_into: length mismatch");
    std::size_t k = 0;
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
        for (double& v : p.weights[i].data()) v = flat[k++];
        for (double& v : p.biases[i].data()) v = flat[k++];
    }
}

AdamState AdamState::for_params(const MlpParams& p, double lr) {
    AdamState s;
    s.m = GradBuf::zeros_like(p);
    s.v = GradBuf::zeros_like(p);
    s.lr = lr;
    return s;
}

void adam_step(MlpParams& params, const GradBuf& grads, AdamState& state) {
    if (!grads.congruent_with(params) || !state.m.congruent_with(params) ||
        !state.v.congruent_with(params)) {
        throw DimensionError("adam_step: gradient/moment shapes differ from params");
    }
    for (std::size_t i = 0; i < grads.weights.size(); ++i) {
        check_finite_span(grads.weights[i].data(), "gradient");
        check_finite_span(grads.biases[i].data(), "gradient");
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                      std::vector<double>& v) {
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            p[k] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    };
    for (std::size_t i = 0; i < params.weights.size(); ++i) {
        update(params.weights[i].data(), grads.weights[i].data(), state.m.weights[i].data(),
               state.v.weights[i].data());
        update(params.biases[i].data(), grads.biases[i].data(), state.m.biases[i].data(),
               state.v.biases[i].data());
    }
}

double grad_check(const FlatObjective& fn, std::vector<double> x, double h) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw ContractError("grad_check: h must lie in [1e-7, 1e-3]");
    std::vector<double> analytic(x.size(), 0.0);
    std::vector<double> scratch(x.size(), 0.0);
    const double f0 = fn(x, analytic);
    if (!std::isfinite(f0)) throw NumericError("grad_check: non-finite loss");
    double worst = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double orig = x[k];
        x[k] = orig + h;
        const double fp = fn(x, scratch);
        x[k] = orig - h;
        const double fm = fn(x, scratch);
        x[k] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("grad_check: non-finite loss under perturbation");
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[k] - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

double grad_check(const MlpObjective& fn, const MlpParams& params, double h) {
    MlpParams work = params;
    FlatObjective flat = [&](std::span<const double> x, std::span<double> grad) {
        unflatten_into(work, x);
        GradBuf g = GradBuf::zeros_like(work);
        const double v = fn(work, &g);
        const auto fg = flatten(g);
        std::copy(fg.begin(), fg.end(), grad.begin());
        return v;
    };
    return grad_check(flat, flatten(params), h);
}

}  // namespace orderlab
