#ifndef ORDERLAB_MIESTIM_HPP
#define ORDERLAB_MIESTIM_HPP

// Sample-based variational bounds on the mutual information between
// unlabeled embeddings and their nearest class prototypes.
//
//  upper (OOD side):  (1/L) sum_i log Z(p_i|e_i) - (1/L^2) sum_ij log Z(p_i|e_j)
//  lower (ID side):   (1/L) sum_i f(e_i,p_i) - (1/L^2) sum_ij exp f(e_i,p_j) + 1
//
// Z is a fixed-variance Gaussian whose mean is a small network of e; f is a
// one-hidden-layer critic on concat(e, p). The normalizer a(p) of the lower
// bound is fixed to 1.

#include <cstddef>
#include <vector>

#include "orderlab/oodgate.hpp"
#include "orderlab/protoss.hpp"
#include "orderlab/taskstream.hpp"
#include "orderlab/tensor.hpp"

namespace orderlab {

struct PairBatch {
    Mat emb;
    Mat proto;
    std::vector<std::size_t> proto_index;  // row of the prototype set paired with emb row i

    std::size_t size() const noexcept { return emb.rows(); }
};

/// Pairs every row with its nearest prototype (ties to the lowest index).
PairBatch pair_nearest(const Mat& emb, const PrototypeSet& protos);

struct VariationalDecoder {
    MlpParams mean_net;
    double log_variance = 0.0;

    static VariationalDecoder init(std::size_t emb_dim, std::size_t proto_dim, std::size_t hidden,
                                   Rng& rng);
    friend bool operator==(const VariationalDecoder&, const VariationalDecoder&) = default;
};

struct Critic {
    MlpParams net;

    static Critic init(std::size_t emb_dim, std::size_t proto_dim, std::size_t hidden, Rng& rng);
    friend bool operator==(const Critic&, const Critic&) = default;
};

struct MiEstimate {
    double value = 0.0;
    Mat grad_emb;
    Mat grad_proto;
    GradBuf grad_params;  // gradient of value wrt the estimator's own parameters
};

/// Gaussian log density of p under the decoder conditioned on e, one row each.
double decoder_log_density(const VariationalDecoder& dec, std::span<const double> proto,
                           std::span<const double> mean);
/// Entry (i, j) = log Z(p_i | e_j). Quadratic in L; meant for small batches.
Mat log_density_matrix(const PairBatch& pairs, const VariationalDecoder& dec);
/// Upper-bound estimate evaluated directly from a log-density matrix.
double club_from_log_density(const Mat& log_density);

/// Upper-bound estimate with analytic gradients. Linear in L: with a
/// fixed-variance Gaussian the double sum reduces to first and second moments.
MiEstimate club_upper(const PairBatch& pairs, const VariationalDecoder& dec);

/// Lower-bound estimate. The critic must have exactly one hidden layer so the
/// L x L score matrix can reuse per-row halves of the hidden pre-activation.
MiEstimate critic_lower(const PairBatch& pairs, const Critic& critic, bool want_grads = true);

/// Maximizes the mean conditional log-likelihood of the pairs. Returns the
/// mean log-likelihood measured before each step.
std::vector<double> train_decoder(VariationalDecoder& dec, const PairBatch& pairs,
                                  std::size_t steps, AdamState& opt);

/// Gradient ascent on the lower-bound estimate wrt critic parameters only.
/// Returns the estimate measured before each step.
std::vector<double> train_critic(Critic& critic, const PairBatch& pairs, std::size_t steps,
                                 AdamState& opt);

struct MiRegularizer {
    double value = 0.0;  // lambda * (upper_ood - lower_id)
    double upper_ood = 0.0;
    double lower_id = 0.0;
    Mat grad_unlabeled;  // |U| x D, rows outside either split stay zero
    Mat grad_protos;     // N x D
};

/// Combines both estimators over the split of the unlabeled embeddings.
/// Empty splits contribute zero; lambda == 0 short-circuits to all zeros.
MiRegularizer mi_regularizer(const Mat& unlabeled_emb, const PrototypeSet& protos,
                             const OodSplit& split, const VariationalDecoder& dec,
                             const Critic& critic, double lambda);

}  // namespace orderlab

#endif  // ORDERLAB_MIESTIM_HPP
