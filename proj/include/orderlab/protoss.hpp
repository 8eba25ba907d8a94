#ifndef ORDERLAB_PROTOSS_HPP
#define ORDERLAB_PROTOSS_HPP

// Semi-supervised prototypical core: class means of the support set, one
// round of soft k-means refinement with unlabeled embeddings, and the query
// negative log-likelihood. Every differentiable op has a matching backward.

#include <cstddef>
#include <span>
#include <vector>

#include "orderlab/tensor.hpp"

namespace orderlab {

struct PrototypeSet {
    Mat protos;                 // one row per class, class-sorted
    std::vector<int> class_ids; // local ids 0..N-1

    std::size_t way() const noexcept { return protos.rows(); }
};

/// Soft class probabilities of unlabeled rows. With a distractor the last
/// column is the mass given to an extra zero-mean cluster.
struct SoftAssignment {
    Mat mu;
    bool has_distractor = false;

    std::size_t way() const noexcept { return mu.cols() - (has_distractor ? 1 : 0); }
};

PrototypeSet prototypes(const Mat& support_emb, std::span<const int> labels, std::size_t way);
/// Scatters prototype gradients back onto the support rows.
Mat prototypes_backward(const Mat& grad_protos, std::span<const int> labels,
                        std::size_t support_rows);

/// mu_c(u) = softmax_c(-||u - p_c||^2), optionally with a zero-mean distractor.
SoftAssignment soft_assign(const Mat& unlabeled_emb, const PrototypeSet& protos,
                           bool distractor = false);

struct SoftAssignGrads {
    Mat unlabeled;
    Mat protos;
};
SoftAssignGrads soft_assign_backward(const Mat& unlabeled_emb, const PrototypeSet& protos,
                                     const SoftAssignment& sa, const Mat& grad_mu);

/// p'_c = (sum_S h + sum_U mu_c h) / (|S_c| + sum_U mu_c)
PrototypeSet refine_prototypes(const Mat& support_emb, std::span<const int> labels,
                               const Mat& unlabeled_emb, const SoftAssignment& mu);

struct RefineGrads {
    Mat support;
    Mat unlabeled;
    Mat mu;  // same shape as SoftAssignment::mu (distractor column stays zero)
};
RefineGrads refine_backward(const Mat& support_emb, std::span<const int> labels,
                            const Mat& unlabeled_emb, const SoftAssignment& mu,
                            const PrototypeSet& refined, const Mat& grad_refined);

struct NllResult {
    double loss = 0.0;
    Mat grad_query;
    Mat grad_protos;
};

/// Mean negative log-softmax of -||q - p_c||^2 at the true class.
NllResult query_nll(const Mat& query_emb, std::span<const int> labels, const PrototypeSet& protos);

struct Prediction {
    std::vector<int> labels;
    double accuracy = 0.0;  // 0 when no truth is supplied
};

/// Nearest prototype, ties to the lowest class index.
Prediction predict(const Mat& query_emb, const PrototypeSet& protos,
                   std::span<const int> truth = {});

}  // namespace orderlab

#endif  // ORDERLAB_PROTOSS_HPP
