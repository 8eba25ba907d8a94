#include "orderlab/miestim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "orderlab/errors.hpp"

namespace orderlab {

PairBatch pair_nearest(const Mat& emb, const PrototypeSet& protos) {
    if (protos.way() == 0) throw ContractError("pair_nearest: empty prototype set");
    PairBatch pb;
    const std::size_t dim = protos.protos.cols();
    pb.emb = emb;
    pb.proto = Mat(emb.rows(), dim);
    if (emb.rows() == 0) {
        pb.emb = Mat(0, dim);
        return pb;
    }
    if (emb.cols() != dim) throw DimensionError("pair_nearest: embedding and prototype dims differ");
    for (std::size_t i = 0; i < emb.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t c = 0; c < protos.way(); ++c) {
            const double d = squared_distance(emb.row(i), protos.protos.row(c));
            if (d < best) {
                best = d;
                arg = c;
            }
        }
        pb.proto_index.push_back(arg);
        const auto src = protos.protos.row(arg);
        std::copy(src.begin(), src.end(), pb.proto.row(i).begin());
    }
    return pb;
}

VariationalDecoder VariationalDecoder::init(std::size_t emb_dim, std::size_t proto_dim,
                                            std::size_t hidden, Rng& rng) {
    VariationalDecoder d;
    d.mean_net = MlpParams::init({emb_dim, hidden, proto_dim}, Activation::relu, rng);
    return d;
}

Critic Critic::init(std::size_t emb_dim, std::size_t proto_dim, std::size_t hidden, Rng& rng) {
    Critic c;
    c.net = MlpParams::init({emb_dim + proto_dim, hidden, 1},
                            {Activation::tanh, Activation::identity}, rng);
    return c;
}

double decoder_log_density(const VariationalDecoder& dec, std::span<const double> proto,
                           std::span<const double> mean) {
    const double var = std::exp(dec.log_variance);
    const double d = static_cast<double>(proto.size());
    return -0.5 * squared_distance(proto, mean) / var -
           0.5 * d * (std::log(2.0 * std::numbers::pi) + dec.log_variance);
}

Mat log_density_matrix(const PairBatch& pairs, const VariationalDecoder& dec) {
    const Mat means = mlp_apply(dec.mean_net, pairs.emb);
    const std::size_t L = pairs.size();
    Mat out(L, L);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j)
            out(i, j) = decoder_log_density(dec, pairs.proto.row(i), means.row(j));
    return out;
}

double club_from_log_density(const Mat& log_density) {
    const std::size_t L = log_density.rows();
    if (L == 0 || log_density.cols() != L) throw DimensionError("club_from_log_density: need LxL");
    double diag = 0.0, all = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        diag += log_density(i, i);
        for (std::size_t j = 0; j < L; ++j) all += log_density(i, j);
    }
    const double l = static_cast<double>(L);
    return diag / l - all / (l * l);
}

MiEstimate club_upper(const PairBatch& pairs, const VariationalDecoder& dec) {
    const std::size_t L = pairs.size();
    if (L == 0) throw ContractError("club_upper: empty pair batch");
    if (pairs.proto.rows() != L) throw DimensionError("club_upper: emb/proto row counts differ");
    auto [means, cache] = mlp_forward(dec.mean_net, pairs.emb);
    if (means.cols() != pairs.proto.cols()) {
        throw DimensionError("club_upper: decoder output dim differs from prototype dim");
    }
    const std::size_t dim = means.cols();
    const double l = static_cast<double>(L);
    const double inv_var = std::exp(-dec.log_variance);

    std::vector<double> pbar(dim, 0.0), mbar(dim, 0.0);
    double p_sq = 0.0, m_sq = 0.0, paired = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        const auto p = pairs.proto.row(i);
        const auto m = means.row(i);
        for (std::size_t k = 0; k < dim; ++k) {
            pbar[k] += p[k] / l;
            mbar[k] += m[k] / l;
        }
        p_sq += dot(p, p) / l;
        m_sq += dot(m, m) / l;
        paired += squared_distance(p, m) / l;
    }
    // mean_ij ||p_i - m_j||^2 = mean ||p||^2 - 2 pbar.mbar + mean ||m||^2
    const double cross = p_sq - 2.0 * dot(pbar, mbar) + m_sq;
    MiEstimate est;
    est.value = 0.5 * inv_var * (cross - paired);
    if (!std::isfinite(est.value)) throw NumericError("club_upper: non-finite log density");

    est.grad_proto = Mat(L, dim);
    Mat grad_means(L, dim);
    for (std::size_t i = 0; i < L; ++i) {
        const auto p = pairs.proto.row(i);
        const auto m = means.row(i);
        auto gp = est.grad_proto.row(i);
        auto gm = grad_means.row(i);
        for (std::size_t k = 0; k < dim; ++k) {
            gp[k] = inv_var * (m[k] - mbar[k]) / l;
            gm[k] = inv_var * (p[k] - pbar[k]) / l;
        }
    }
    auto [gparams, gemb] = mlp_backward(dec.mean_net, cache, grad_means);
    est.grad_params = std::move(gparams);
    est.grad_emb = std::move(gemb);
    return est;
}

MiEstimate critic_lower(const PairBatch& pairs, const Critic& critic, bool want_grads) {
    const std::size_t L = pairs.size();
    if (L == 0) throw ContractError("critic_lower: empty pair batch");
    if (pairs.proto.rows() != L) throw DimensionError("critic_lower: emb/proto row counts differ");
    const std::size_t de = pairs.emb.cols();
    const std::size_t dp = pairs.proto.cols();
    const MlpParams& net = critic.net;
    if (net.weights.size() != 2 || net.in_dim() != de + dp || net.out_dim() != 1 ||
        net.activations[1] != Activation::identity) {
        throw DimensionError("critic_lower: critic must be one hidden layer mapping concat(e, p) to a scalar");
    }
    const std::size_t H = net.layer_dims[1];
    const Mat& w1 = net.weights[0];
    const Mat& w2 = net.weights[1];
    const double b2 = net.biases[1](0, 0);

    // The hidden pre-activation splits as e_i W_e + (p_j W_p + b1).
    Mat a(L, H), b(L, H);
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t h = 0; h < H; ++h) {
            double sa = 0.0, sb = net.biases[0](0, h);
            for (std::size_t k = 0; k < de; ++k) sa += pairs.emb(i, k) * w1(k, h);
            for (std::size_t k = 0; k < dp; ++k) sb += pairs.proto(i, k) * w1(de + k, h);
            a(i, h) = sa;
            b(i, h) = sb;
        }
    }
    auto act = [&](double z) {
        switch (net.activations[0]) {
            case Activation::relu: return z > 0.0 ? z : 0.0;
            case Activation::tanh: return std::tanh(z);
            case Activation::identity: break;
        }
        return z;
    };
    auto act_grad = [&](double z, double y) {
        switch (net.activations[0]) {
            case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
            case Activation::tanh: return 1.0 - y * y;
            case Activation::identity: break;
        }
        return 1.0;
    };

    const double l = static_cast<double>(L);
    const double log_l2 = 2.0 * std::log(l);
    MiEstimate est;
    Mat delta_e, delta_p;  // sum over the partner index of the hidden-layer delta
    if (want_grads) {
        est.grad_params = GradBuf::zeros_like(net);
        delta_e = Mat(L, H);
        delta_p = Mat(L, H);
    }
    double diag = 0.0;
    double run_max = -std::numeric_limits<double>::infinity();
    double run_sum = 0.0;  // sum of exp(f - run_max)
    std::vector<double> pre(H), hid(H);
    for (std::size_t i = 0; i < L; ++i) {
        const auto ai = a.row(i);
        for (std::size_t j = 0; j < L; ++j) {
            const auto bj = b.row(j);
            double f = b2;
            for (std::size_t h = 0; h < H; ++h) {
                pre[h] = ai[h] + bj[h];
                hid[h] = act(pre[h]);
                f += hid[h] * w2(h, 0);
            }
            if (!std::isfinite(f)) throw NumericError("critic_lower: non-finite critic output");
            if (i == j) diag += f;
            if (f > run_max) {
                run_sum = run_sum * std::exp(run_max - f) + 1.0;
                run_max = f;
            } else {
                run_sum += std::exp(f - run_max);
            }
            if (!want_grads) continue;
            const double w = std::exp(f - log_l2);
            if (!std::isfinite(w)) throw NumericError("critic_lower: exponential overflow");
            const double g = (i == j ? 1.0 / l : 0.0) - w;
            est.grad_params.biases[1](0, 0) += g;
            for (std::size_t h = 0; h < H; ++h) {
                est.grad_params.weights[1](h, 0) += g * hid[h];
                const double d = g * w2(h, 0) * act_grad(pre[h], hid[h]);
                delta_e(i, h) += d;
                delta_p(j, h) += d;
            }
        }
    }
    const double mean_exp = std::exp(run_max + std::log(run_sum) - log_l2);
    if (!std::isfinite(mean_exp)) throw NumericError("critic_lower: exponential overflow");
    est.value = diag / l - mean_exp + 1.0;
    if (!want_grads) return est;

    est.grad_emb = Mat(L, de);
    est.grad_proto = Mat(L, dp);
    Mat& gw1 = est.grad_params.weights[0];
    Mat& gb1 = est.grad_params.biases[0];
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t h = 0; h < H; ++h) {
            const double de_ih = delta_e(i, h), dp_ih = delta_p(i, h);
            gb1(0, h) += de_ih;
            for (std::size_t k = 0; k < de; ++k) {
                gw1(k, h) += pairs.emb(i, k) * de_ih;
                est.grad_emb(i, k) += w1(k, h) * de_ih;
            }
            for (std::size_t k = 0; k < dp; ++k) {
                gw1(de + k, h) += pairs.proto(i, k) * dp_ih;
                est.grad_proto(i, k) += w1(de + k, h) * dp_ih;
            }
        }
    }
    return est;
}

std::vector<double> train_decoder(VariationalDecoder& dec, const PairBatch& pairs,
                                  std::size_t steps, AdamState& opt) {
    std::vector<double> trace;
    const std::size_t L = pairs.size();
    if (L == 0) return trace;
    const double l = static_cast<double>(L);
    const double inv_var = std::exp(-dec.log_variance);
    for (std::size_t s = 0; s < steps; ++s) {
        auto [means, cache] = mlp_forward(dec.mean_net, pairs.emb);
        Mat grad(means.rows(), means.cols());
        double ll = 0.0;
        for (std::size_t i = 0; i < L; ++i) {
            ll += decoder_log_density(dec, pairs.proto.row(i), means.row(i)) / l;
            for (std::size_t k = 0; k < means.cols(); ++k) {
                // descend on the negative log-likelihood
                grad(i, k) = inv_var * (means(i, k) - pairs.proto(i, k)) / l;
            }
        }
        trace.push_back(ll);
        auto [gparams, gx] = mlp_backward(dec.mean_net, cache, grad);
        adam_step(dec.mean_net, gparams, opt);
    }
    return trace;
}

std::vector<double> train_critic(Critic& critic, const PairBatch& pairs, std::size_t steps,
                                 AdamState& opt) {
    std::vector<double> trace;
    if (pairs.size() == 0) return trace;
    for (std::size_t s = 0; s < steps; ++s) {
        MiEstimate est = critic_lower(pairs, critic, true);
        trace.push_back(est.value);
        est.grad_params *= -1.0;  // ascent
        adam_step(critic.net, est.grad_params, opt);
    }
    return trace;
}

MiRegularizer mi_regularizer(const Mat& unlabeled_emb, const PrototypeSet& protos,
                             const OodSplit& split, const VariationalDecoder& dec,
                             const Critic& critic, double lambda) {
    const std::size_t dim = protos.protos.cols();
    MiRegularizer out;
    out.grad_unlabeled = Mat(unlabeled_emb.rows(), dim);
    out.grad_protos = Mat(protos.way(), dim);
    if (lambda == 0.0) return out;

    auto scatter = [&](const std::vector<std::size_t>& rows, const PairBatch& pb,
                       const MiEstimate& est, double scale) {
        for (std::size_t k = 0; k < rows.size(); ++k) {
            auto gu = out.grad_unlabeled.row(rows[k]);
            auto gp = out.grad_protos.row(pb.proto_index[k]);
            for (std::size_t d = 0; d < dim; ++d) {
                gu[d] += scale * est.grad_emb(k, d);
                gp[d] += scale * est.grad_proto(k, d);
            }
        }
    };
    if (!split.ood_indices.empty()) {
        const PairBatch pb = pair_nearest(unlabeled_emb.gather_rows(split.ood_indices), protos);
        const MiEstimate est = club_upper(pb, dec);
        out.upper_ood = est.value;
        scatter(split.ood_indices, pb, est, lambda);
    }
    if (!split.id_indices.empty()) {
        const PairBatch pb = pair_nearest(unlabeled_emb.gather_rows(split.id_indices), protos);
        const MiEstimate est = critic_lower(pb, critic, true);
        out.lower_id = est.value;
        scatter(split.id_indices, pb, est, -lambda);
    }
    out.value = lambda * (out.upper_ood - out.lower_id);
    return out;
}

}  // namespace orderlab
