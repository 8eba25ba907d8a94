#include "orderlab/protoss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "orderlab/errors.hpp"

namespace orderlab {

namespace {

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t way) {
    if (labels.size() != rows) throw DimensionError("label count differs from row count");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= way) {
            throw ContractError("label " + std::to_string(y) + " outside the episode classes");
        }
    }
}

std::vector<double> class_counts(std::span<const int> labels, std::size_t way) {
    std::vector<double> n(way, 0.0);
    for (int y : labels) n[static_cast<std::size_t>(y)] += 1.0;
    return n;
}

}  // namespace

PrototypeSet prototypes(const Mat& support_emb, std::span<const int> labels, std::size_t way) {
    check_labels(labels, support_emb.rows(), way);
    const auto counts = class_counts(labels, way);
    for (std::size_t c = 0; c < way; ++c) {
        if (counts[c] == 0.0) {
            throw ContractError("prototypes: class " + std::to_string(c) + " has no support rows");
        }
    }
    PrototypeSet ps;
    ps.protos = Mat(way, support_emb.cols());
    for (std::size_t r = 0; r < support_emb.rows(); ++r) {
        auto dst = ps.protos.row(static_cast<std::size_t>(labels[r]));
        const auto src = support_emb.row(r);
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
    for (std::size_t c = 0; c < way; ++c) {
        for (double& v : ps.protos.row(c)) v /= counts[c];
        ps.class_ids.push_back(static_cast<int>(c));
    }
    return ps;
}

Mat prototypes_backward(const Mat& grad_protos, std::span<const int> labels,
                        std::size_t support_rows) {
    const std::size_t way = grad_protos.rows();
    check_labels(labels, support_rows, way);
    const auto counts = class_counts(labels, way);
    Mat g(support_rows, grad_protos.cols());
    for (std::size_t r = 0; r < support_rows; ++r) {
        const auto c = static_cast<std::size_t>(labels[r]);
        const auto src = grad_protos.row(c);
        auto dst = g.row(r);
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] = src[k] / counts[c];
    }
    return g;
}

SoftAssignment soft_assign(const Mat& unlabeled_emb, const PrototypeSet& protos, bool distractor) {
    if (unlabeled_emb.rows() > 0 && unlabeled_emb.cols() != protos.protos.cols()) {
        throw DimensionError("soft_assign: embedding and prototype dims differ");
    }
    const std::size_t way = protos.way();
    const std::size_t cols = way + (distractor ? 1 : 0);
    SoftAssignment sa;
    sa.has_distractor = distractor;
    sa.mu = Mat(unlabeled_emb.rows(), cols);
    std::vector<double> logits(cols);
    for (std::size_t i = 0; i < unlabeled_emb.rows(); ++i) {
        const auto u = unlabeled_emb.row(i);
        for (std::size_t c = 0; c < way; ++c) logits[c] = -squared_distance(u, protos.protos.row(c));
        if (distractor) logits[way] = -dot(u, u);
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            sa.mu(i, c) = std::exp(logits[c] - mx);
            z += sa.mu(i, c);
        }
        for (std::size_t c = 0; c < cols; ++c) sa.mu(i, c) /= z;
    }
    return sa;
}

SoftAssignGrads soft_assign_backward(const Mat& unlabeled_emb, const PrototypeSet& protos,
                                     const SoftAssignment& sa, const Mat& grad_mu) {
    const std::size_t way = protos.way();
    const std::size_t cols = sa.mu.cols();
    const std::size_t dim = protos.protos.cols();
    SoftAssignGrads g{Mat(unlabeled_emb.rows(), dim), Mat(way, dim)};
    for (std::size_t i = 0; i < unlabeled_emb.rows(); ++i) {
        double inner = 0.0;
        for (std::size_t c = 0; c < cols; ++c) inner += sa.mu(i, c) * grad_mu(i, c);
        const auto u = unlabeled_emb.row(i);
        auto gu = g.unlabeled.row(i);
        for (std::size_t c = 0; c < cols; ++c) {
            // d logit / d u = -2(u - p_c); the distractor has p = 0.
            const double gz = sa.mu(i, c) * (grad_mu(i, c) - inner);
            if (gz == 0.0) continue;
            if (c < way) {
                const auto p = protos.protos.row(c);
                auto gp = g.protos.row(c);
                for (std::size_t k = 0; k < dim; ++k) {
                    const double diff = u[k] - p[k];
                    gu[k] -= 2.0 * gz * diff;
                    gp[k] += 2.0 * gz * diff;
                }
            } else {
                for (std::size_t k = 0; k < dim; ++k) gu[k] -= 2.0 * gz * u[k];
            }
        }
    }
    return g;
}

PrototypeSet refine_prototypes(const Mat& support_emb, std::span<const int> labels,
                               const Mat& unlabeled_emb, const SoftAssignment& mu) {
    if (mu.mu.rows() != unlabeled_emb.rows()) {
        throw DimensionError("refine_prototypes: mu rows differ from unlabeled rows");
    }
    const std::size_t way = mu.way();
    check_labels(labels, support_emb.rows(), way);
    const std::size_t dim = support_emb.cols();
    Mat num(way, dim);
    std::vector<double> den = class_counts(labels, way);
    for (std::size_t r = 0; r < support_emb.rows(); ++r) {
        auto dst = num.row(static_cast<std::size_t>(labels[r]));
        const auto src = support_emb.row(r);
        for (std::size_t k = 0; k < dim; ++k) dst[k] += src[k];
    }
    for (std::size_t i = 0; i < unlabeled_emb.rows(); ++i) {
        const auto u = unlabeled_emb.row(i);
        for (std::size_t c = 0; c < way; ++c) {
            const double w = mu.mu(i, c);
            auto dst = num.row(c);
            for (std::size_t k = 0; k < dim; ++k) dst[k] += w * u[k];
            den[c] += w;
        }
    }
    PrototypeSet out;
    out.protos = std::move(num);
    for (std::size_t c = 0; c < way; ++c) {
        if (den[c] == 0.0) throw ContractError("refine_prototypes: class without support rows");
        for (double& v : out.protos.row(c)) v /= den[c];
        out.class_ids.push_back(static_cast<int>(c));
    }
    return out;
}

RefineGrads refine_backward(const Mat& support_emb, std::span<const int> labels,
                            const Mat& unlabeled_emb, const SoftAssignment& mu,
                            const PrototypeSet& refined, const Mat& grad_refined) {
    const std::size_t way = mu.way();
    const std::size_t dim = support_emb.cols();
    std::vector<double> den = class_counts(labels, way);
    for (std::size_t i = 0; i < unlabeled_emb.rows(); ++i)
        for (std::size_t c = 0; c < way; ++c) den[c] += mu.mu(i, c);

    // p' = A / B:  dA = g / B,  dB = -g . p' / B
    Mat grad_num(way, dim);
    std::vector<double> grad_den(way, 0.0);
    for (std::size_t c = 0; c < way; ++c) {
        const auto g = grad_refined.row(c);
        const auto p = refined.protos.row(c);
        auto ga = grad_num.row(c);
        for (std::size_t k = 0; k < dim; ++k) ga[k] = g[k] / den[c];
        grad_den[c] = -dot(g, p) / den[c];
    }
    RefineGrads out{Mat(support_emb.rows(), dim), Mat(unlabeled_emb.rows(), dim),
                    Mat(mu.mu.rows(), mu.mu.cols())};
    for (std::size_t r = 0; r < support_emb.rows(); ++r) {
        const auto ga = grad_num.row(static_cast<std::size_t>(labels[r]));
        std::copy(ga.begin(), ga.end(), out.support.row(r).begin());
    }
    for (std::size_t i = 0; i < unlabeled_emb.rows(); ++i) {
        const auto u = unlabeled_emb.row(i);
        auto gu = out.unlabeled.row(i);
        for (std::size_t c = 0; c < way; ++c) {
            const auto ga = grad_num.row(c);
            const double w = mu.mu(i, c);
            for (std::size_t k = 0; k < dim; ++k) gu[k] += w * ga[k];
            out.mu(i, c) = dot(ga, u) + grad_den[c];
        }
    }
    return out;
}

NllResult query_nll(const Mat& query_emb, std::span<const int> labels, const PrototypeSet& protos) {
    const std::size_t way = protos.way();
    check_labels(labels, query_emb.rows(), way);
    if (query_emb.rows() > 0 && query_emb.cols() != protos.protos.cols()) {
        throw DimensionError("query_nll: embedding and prototype dims differ");
    }
    const std::size_t dim = protos.protos.cols();
    NllResult res{0.0, Mat(query_emb.rows(), dim), Mat(way, dim)};
    if (query_emb.rows() == 0) return res;
    const double inv_q = 1.0 / static_cast<double>(query_emb.rows());
    std::vector<double> logits(way), prob(way);
    for (std::size_t i = 0; i < query_emb.rows(); ++i) {
        const auto q = query_emb.row(i);
        for (std::size_t c = 0; c < way; ++c) logits[c] = -squared_distance(q, protos.protos.row(c));
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (std::size_t c = 0; c < way; ++c) {
            prob[c] = std::exp(logits[c] - mx);
            z += prob[c];
        }
        const auto y = static_cast<std::size_t>(labels[i]);
        res.loss += (std::log(z) + mx - logits[y]) * inv_q;
        auto gq = res.grad_query.row(i);
        for (std::size_t c = 0; c < way; ++c) {
            prob[c] /= z;
            const double gz = (prob[c] - (c == y ? 1.0 : 0.0)) * inv_q;
            if (gz == 0.0) continue;
            const auto p = protos.protos.row(c);
            auto gp = res.grad_protos.row(c);
            for (std::size_t k = 0; k < dim; ++k) {
                const double diff = q[k] - p[k];
                gq[k] -= 2.0 * gz * diff;
                gp[k] += 2.0 * gz * diff;
            }
        }
    }
    return res;
}

Prediction predict(const Mat& query_emb, const PrototypeSet& protos, std::span<const int> truth) {
    if (!truth.empty() && truth.size() != query_emb.rows()) {
        throw DimensionError("predict: truth length differs from query rows");
    }
    Prediction out;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < query_emb.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        int arg = 0;
        for (std::size_t c = 0; c < protos.way(); ++c) {
            const double d = squared_distance(query_emb.row(i), protos.protos.row(c));
            if (d < best) {
                best = d;
                arg = static_cast<int>(c);
            }
        }
        out.labels.push_back(arg);
        if (!truth.empty() && truth[i] == arg) ++correct;
    }
    if (!truth.empty() && !out.labels.empty()) {
        out.accuracy = static_cast<double>(correct) / static_cast<double>(out.labels.size());
    }
    return out;
}

}  // namespace orderlab
