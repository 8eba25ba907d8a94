#ifndef ORDERLAB_OTREG_HPP
#define ORDERLAB_OTREG_HPP

// Discrete optimal transport between the current embeddings of replayed
// points and their stored snapshots.

#include <cstddef>
#include <span>
#include <vector>

#include "orderlab/taskstream.hpp"
#include "orderlab/tensor.hpp"

namespace orderlab {

struct DiscreteDist {
    Mat points;
    std::vector<double> weights;

    static DiscreteDist uniform(Mat points);
    /// Throws ContractError unless weights are nonnegative and sum to 1 within 1e-9.
    void validate() const;
};

struct TransportPlan {
    Mat W;
    double cost = 0.0;
    std::vector<double> row_marginals;
    std::vector<double> col_marginals;
    std::size_t pivots = 0;
};

/// Entry (i, j) = ||e_i - g_j||^2.
Mat cost_matrix(const Mat& E, const Mat& G);

/// Exact transportation simplex. Starts from the north-west corner basis and
/// enters the most negative reduced cost (lowest flat index on ties). Long
/// runs of degenerate pivots fall back to Bland's rule, which cannot cycle.
TransportPlan ot_exact(std::span<const double> a, std::span<const double> b, const Mat& cost);
TransportPlan ot_exact(const DiscreteDist& mu, const DiscreteDist& nu, const Mat& cost);

/// Log-domain Sinkhorn iterations for entropic OT with regularization eps.
/// `cost` of the result is the transport cost sum W_ij C_ij of the plan.
TransportPlan ot_sinkhorn(std::span<const double> a, std::span<const double> b, const Mat& cost,
                          double eps, std::size_t max_iters = 10000, double tol = 1e-10);

enum class OtSolver { exact, sinkhorn };

struct OtLoss {
    double value = 0.0;
    Mat grad;  // d value / d current, plan held fixed
    TransportPlan plan;
};

/// OT cost between uniformly weighted current and stored features (equal
/// row counts) under squared Euclidean ground cost.
OtLoss ot_loss(const Mat& current, const Mat& stored, OtSolver solver = OtSolver::exact,
               double sinkhorn_eps = 1e-2);
OtLoss ot_loss(const Mat& current, const FeatureSnapshot& snapshot,
               OtSolver solver = OtSolver::exact, double sinkhorn_eps = 1e-2);

}  // namespace orderlab

#endif  // ORDERLAB_OTREG_HPP
