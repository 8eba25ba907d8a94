#include "orderlab/orderloop.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "orderlab/errors.hpp"

namespace orderlab {

namespace {

constexpr std::uint64_t kMemoryTag = 0x3E3017ULL;
constexpr std::uint64_t kJointTag = 0x10147ULL;
constexpr std::uint64_t kEvalTag = 0xE7A10000ULL;
constexpr std::uint64_t kInitTag = 0x1417ULL;

Mat stack_inputs(const Episode& ep) {
    Mat x = ep.support_x;
    x.append_rows(ep.unlabeled_x);
    x.append_rows(ep.query_x);
    return x;
}

std::vector<std::size_t> range_indices(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return idx;
}

// Everything the loss needs from one task's embeddings, before any loss.
struct TaskGeometry {
    std::size_t ns = 0, nu = 0, nq = 0;
    Mat es, eu, eq;
    OodSplit split;
    std::vector<std::size_t> refine_rows;  // rows of eu used for refinement
    Mat u_ref;
    PrototypeSet protos;
    SoftAssignment sa;
    PrototypeSet refined;
};

TaskGeometry task_geometry(const Mat& emb, const Episode& ep, const TrainerConfig& cfg,
                           std::size_t way) {
    TaskGeometry g;
    g.ns = ep.support_x.rows();
    g.nu = ep.unlabeled_x.rows();
    g.nq = ep.query_x.rows();
    g.es = emb.gather_rows(range_indices(0, g.ns));
    g.eu = emb.gather_rows(range_indices(g.ns, g.ns + g.nu));
    g.eq = emb.gather_rows(range_indices(g.ns + g.nu, g.ns + g.nu + g.nq));
    g.split = detect(g.es, ep.support_y, way, g.eu, g.eq, cfg.ood_multiplier);
    g.refine_rows = cfg.refine == RefinePolicy::all ? range_indices(0, g.nu) : g.split.id_indices;
    g.u_ref = g.eu.gather_rows(g.refine_rows);
    g.protos = prototypes(g.es, ep.support_y, way);
    g.sa = soft_assign(g.u_ref, g.protos, cfg.distractor);
    g.refined = refine_prototypes(g.es, ep.support_y, g.u_ref, g.sa);
    return g;
}

struct TaskLoss {
    double meta = 0.0;
    double mi_ood = 0.0;
    double mi_id = 0.0;
    double ot = 0.0;
    GradBuf grad;
};

// L_meta + lambda (I_ood - I_id) [+ beta OT against the snapshot] for one task.
TaskLoss task_loss(const OrderModel& model, const Episode& ep, const FeatureSnapshot* snapshot,
                   const TrainerConfig& cfg, bool want_grad) {
    const std::size_t way = ep.class_ids.size();
    const Mat x = stack_inputs(ep);
    auto [emb, cache] = mlp_forward(model.embed, x);
    const TaskGeometry g = task_geometry(emb, ep, cfg, way);

    TaskLoss out;
    const NllResult nll = query_nll(g.eq, ep.query_y, g.refined);
    out.meta = nll.loss;
    const MiRegularizer mi =
        mi_regularizer(g.eu, g.refined, g.split, model.decoder, model.critic, cfg.lambda);
    out.mi_ood = mi.upper_ood;
    out.mi_id = mi.lower_id;

    std::vector<std::size_t> snap_rows;
    OtLoss ot;
    if (snapshot != nullptr) {
        snapshot->check_matches(ep);
        snap_rows = range_indices(0, g.ns);
        for (std::size_t k : snapshot->unlabeled_ids) snap_rows.push_back(g.ns + k);
        ot = ot_loss(emb.gather_rows(snap_rows), *snapshot, cfg.ot_solver, cfg.sinkhorn_eps);
        out.ot = ot.value;
    }
    if (!want_grad) return out;

    const std::size_t dim = emb.cols();
    Mat grad_emb(emb.rows(), dim);
    auto add_rows = [&](const Mat& src, std::size_t offset, double scale) {
        for (std::size_t r = 0; r < src.rows(); ++r)
            for (std::size_t k = 0; k < dim; ++k) grad_emb(offset + r, k) += scale * src(r, k);
    };
    Mat grad_refined = nll.grad_protos;
    for (std::size_t k = 0; k < grad_refined.size(); ++k) grad_refined.data()[k] += mi.grad_protos.data()[k];

    const RefineGrads rg = refine_backward(g.es, ep.support_y, g.u_ref, g.sa, g.refined, grad_refined);
    const SoftAssignGrads sg = soft_assign_backward(g.u_ref, g.protos, g.sa, rg.mu);
    add_rows(rg.support, 0, 1.0);
    add_rows(prototypes_backward(sg.protos, ep.support_y, g.ns), 0, 1.0);
    for (std::size_t r = 0; r < g.refine_rows.size(); ++r) {
        for (std::size_t k = 0; k < dim; ++k) {
            grad_emb(g.ns + g.refine_rows[r], k) += rg.unlabeled(r, k) + sg.unlabeled(r, k);
        }
    }
    add_rows(mi.grad_unlabeled, g.ns, 1.0);
    add_rows(nll.grad_query, g.ns + g.nu, 1.0);
    if (snapshot != nullptr && cfg.beta != 0.0) {
        for (std::size_t r = 0; r < snap_rows.size(); ++r)
            for (std::size_t k = 0; k < dim; ++k) grad_emb(snap_rows[r], k) += cfg.beta * ot.grad(r, k);
    }
    out.grad = mlp_backward(model.embed, cache, grad_emb).first;
    return out;
}

// Effective config of a step: the mode decides which regularizers are active.
TrainerConfig effective(const TrainerConfig& cfg) {
    TrainerConfig eff = cfg;
    if (cfg.mode != TrainMode::order) {
        eff.lambda = 0.0;
        eff.beta = 0.0;
    }
    return eff;
}

bool uses_memory(TrainMode m) { return m == TrainMode::order || m == TrainMode::er; }

LossBreakdown run_step(Trainer& tr, std::size_t t, std::span<const Episode> current) {
    if (current.empty()) throw ContractError("step: no current episodes");
    const TrainerConfig eff = effective(tr.cfg);

    std::vector<ReplayTask> replay;
    if (uses_memory(tr.cfg.mode) && tr.cfg.memory_batch > 0) {
        for (std::size_t i : sample_memory_batch(tr.buffer, tr.cfg.memory_batch, tr.memory_rng)) {
            const MemoryEntry& e = tr.buffer.at(i);
            replay.push_back({&e.episode, &e.snapshot});
        }
    }
    if (eff.lambda != 0.0) {
        std::vector<Episode> tasks;
        for (const ReplayTask& r : replay) tasks.push_back(*r.episode);
        tasks.insert(tasks.end(), current.begin(), current.end());
        auxiliary_update(tr.model, tasks, eff);
    }
    GradBuf grad = GradBuf::zeros_like(tr.model.embed);
    LossBreakdown br = step_objective(tr.model, current, replay, eff, &grad);
    br.step = tr.steps;
    br.t = t;
    adam_step(tr.model.embed, grad, tr.model.embed_opt);
    ++tr.steps;

    if (uses_memory(tr.cfg.mode)) {
        for (const Episode& ep : current) {
            reservoir_offer(tr.buffer, ep, take_snapshot(tr.model.embed, ep, eff), tr.memory_rng);
        }
    }
    return br;
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::order: return "order";
        case TrainMode::seq: return "seq";
        case TrainMode::er: return "er";
        case TrainMode::joint: return "joint";
    }
    return "order";
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "order") return TrainMode::order;
    if (s == "seq") return TrainMode::seq;
    if (s == "er") return TrainMode::er;
    if (s == "joint") return TrainMode::joint;
    throw ConfigError("unknown mode '" + s + "' (expected order, seq, er or joint)");
}

std::string to_string(RefinePolicy p) { return p == RefinePolicy::all ? "all" : "id_only"; }

RefinePolicy refine_policy_from_string(const std::string& s) {
    if (s == "all") return RefinePolicy::all;
    if (s == "id_only") return RefinePolicy::id_only;
    throw ConfigError("unknown refine policy '" + s + "' (expected all or id_only)");
}

void TrainerConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("trainer." + field + ": " + why);
    };
    auto finite_nonneg = [&](double v, const char* field) {
        if (!std::isfinite(v) || v < 0.0) fail(field, "must be a finite value >= 0");
    };
    finite_nonneg(lambda, "lambda");
    finite_nonneg(beta, "beta");
    if (!std::isfinite(lr) || lr <= 0.0) fail("lr", "must be > 0");
    if (!std::isfinite(aux_lr) || aux_lr <= 0.0) fail("aux_lr", "must be > 0");
    if (!std::isfinite(ood_multiplier)) fail("ood_multiplier", "must be finite");
    if (meta_batch == 0) fail("meta_batch", "must be >= 1");
    if (embed_dim == 0) fail("embed_dim", "must be >= 1");
    for (std::size_t h : embed_hidden)
        if (h == 0) fail("embed_hidden", "layer widths must be >= 1");
    if (decoder_hidden == 0) fail("decoder_hidden", "must be >= 1");
    if (critic_hidden == 0) fail("critic_hidden", "must be >= 1");
    if (ot_solver == OtSolver::sinkhorn && !(sinkhorn_eps > 0.0)) fail("sinkhorn_eps", "must be > 0");
    if (eval_episodes < 2) fail("eval_episodes", "must be >= 2");
}

OrderModel OrderModel::init(const TrainerConfig& cfg, std::size_t input_dim) {
    Rng rng(mix_seed(cfg.seed, kInitTag));
    std::vector<std::size_t> dims{input_dim};
    dims.insert(dims.end(), cfg.embed_hidden.begin(), cfg.embed_hidden.end());
    dims.push_back(cfg.embed_dim);
    OrderModel m;
    m.embed = MlpParams::init(dims, Activation::relu, rng);
    m.embed_opt = AdamState::for_params(m.embed, cfg.lr);
    m.decoder = VariationalDecoder::init(cfg.embed_dim, cfg.embed_dim, cfg.decoder_hidden, rng);
    m.decoder_opt = AdamState::for_params(m.decoder.mean_net, cfg.aux_lr);
    m.critic = Critic::init(cfg.embed_dim, cfg.embed_dim, cfg.critic_hidden, rng);
    m.critic_opt = AdamState::for_params(m.critic.net, cfg.aux_lr);
    return m;
}

LossBreakdown step_objective(const OrderModel& model, std::span<const Episode> current,
                             std::span<const ReplayTask> replay, const TrainerConfig& cfg,
                             GradBuf* grad) {
    LossBreakdown br;
    br.lambda = cfg.lambda;
    br.beta = cfg.beta;
    br.replayed = replay.size();
    if (!current.empty()) br.domain_id = current.front().domain_id;
    const bool want = grad != nullptr;
    if (want) *grad = GradBuf::zeros_like(model.embed);
    for (const Episode& ep : current) {
        TaskLoss l = task_loss(model, ep, nullptr, cfg, want);
        br.meta_current += l.meta;
        br.mi_ood += l.mi_ood;
        br.mi_id += l.mi_id;
        if (want) *grad += l.grad;
    }
    for (const ReplayTask& r : replay) {
        TaskLoss l = task_loss(model, *r.episode, r.snapshot, cfg, want);
        br.meta_memory += l.meta + cfg.lambda * (l.mi_ood - l.mi_id);
        br.ot += l.ot;
        if (want) *grad += l.grad;
    }
    br.total = br.reconstructed_total();
    if (!std::isfinite(br.total)) throw NumericError("step objective is not finite");
    return br;
}

void auxiliary_update(OrderModel& model, std::span<const Episode> tasks, const TrainerConfig& cfg) {
    if (cfg.aux_steps == 0) return;
    for (const Episode& ep : tasks) {
        const Mat emb = mlp_apply(model.embed, stack_inputs(ep));
        const TaskGeometry g = task_geometry(emb, ep, cfg, ep.class_ids.size());
        if (!g.split.ood_indices.empty()) {
            const PairBatch pb = pair_nearest(g.eu.gather_rows(g.split.ood_indices), g.refined);
            train_decoder(model.decoder, pb, cfg.aux_steps, model.decoder_opt);
        }
        if (!g.split.id_indices.empty()) {
            const PairBatch pb = pair_nearest(g.eu.gather_rows(g.split.id_indices), g.refined);
            train_critic(model.critic, pb, cfg.aux_steps, model.critic_opt);
        }
    }
}

FeatureSnapshot take_snapshot(const MlpParams& embed, const Episode& ep, const TrainerConfig& cfg) {
    const Mat emb = mlp_apply(embed, stack_inputs(ep));
    const std::size_t ns = ep.support_x.rows(), nu = ep.unlabeled_x.rows(), nq = ep.query_x.rows();
    const Mat es = emb.gather_rows(range_indices(0, ns));
    const Mat eu = emb.gather_rows(range_indices(ns, ns + nu));
    const Mat eq = emb.gather_rows(range_indices(ns + nu, ns + nu + nq));
    const OodSplit split = detect(es, ep.support_y, ep.class_ids.size(), eu, eq, cfg.ood_multiplier);
    FeatureSnapshot snap;
    snap.support_rows = ns;
    snap.unlabeled_ids = split.id_indices;
    snap.features = es;
    snap.features.append_rows(eu.gather_rows(split.id_indices));
    return snap;
}

Trainer::Trainer(const TrainerConfig& c, std::size_t input_dim)
    : cfg(c),
      model((c.validate(), OrderModel::init(c, input_dim))),
      buffer(uses_memory(c.mode) ? c.memory_capacity : 0),
      memory_rng(mix_seed(c.seed, kMemoryTag)) {}

LossBreakdown order_step(Trainer& tr, std::size_t t, std::span<const Episode> current) {
    if (tr.cfg.mode != TrainMode::order) throw ContractError("order_step: mode must be order");
    return run_step(tr, t, current);
}

LossBreakdown baseline_step(Trainer& tr, std::size_t t, std::span<const Episode> current) {
    if (tr.cfg.mode == TrainMode::order) throw ContractError("baseline_step: mode must not be order");
    return run_step(tr, t, current);
}

double EvalResult::mean_accuracy() const noexcept {
    if (domains.empty()) return 0.0;
    double s = 0.0;
    for (const DomainAccuracy& d : domains) s += d.mean;
    return s / static_cast<double>(domains.size());
}

EvalResult evaluate(const MlpParams& embed, std::span<const DomainSpec> domains, const OodPool& ood,
                    const EpisodeShape& shape, std::size_t episodes_per_domain,
                    const TrainerConfig& cfg, std::uint64_t seed) {
    EvalResult res;
    for (const DomainSpec& dom : domains) {
        std::vector<double> acc;
        for (std::size_t e = 0; e < episodes_per_domain; ++e) {
            Rng rng(mix_seed(mix_seed(seed, kEvalTag + dom.domain_id), e));
            const Episode ep = sample_episode(dom, shape, ood, rng, true);
            const Mat emb = mlp_apply(embed, stack_inputs(ep));
            const TaskGeometry g = task_geometry(emb, ep, cfg, ep.class_ids.size());
            acc.push_back(predict(g.eq, g.refined, ep.query_y).accuracy);
        }
        DomainAccuracy da;
        da.domain_id = dom.domain_id;
        da.mean = mean_of(acc);
        if (acc.size() > 1) {
            double ss = 0.0;
            for (double a : acc) ss += (a - da.mean) * (a - da.mean);
            const double sd = std::sqrt(ss / static_cast<double>(acc.size() - 1));
            da.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(acc.size()));
        }
        res.domains.push_back(da);
    }
    return res;
}

TrainResult train_stream(TaskStream stream, const TrainerConfig& cfg, std::size_t max_tasks) {
    const auto& domains = stream.domains();
    Trainer tr(cfg, domains.front().dim());
    TrainResult res;
    const std::size_t n_tasks = std::min(stream.size(), max_tasks);
    if (n_tasks == 0) {
        res.model = tr.model;
        return res;
    }
    const std::size_t tpd = stream.tasks_per_domain();
    const std::size_t n_domains = domains.size();
    res.after_domain.assign(n_domains, 0.0);

    auto run_eval = [&](std::size_t consumed) {
        const EvalResult ev = evaluate(tr.model.embed, domains, stream.ood(), stream.shape(),
                                       cfg.eval_episodes, cfg, stream.seed());
        EvalRow row;
        row.step = tr.steps;
        row.t = consumed;
        for (const DomainAccuracy& d : ev.domains) row.accuracy.push_back(d.mean);
        res.evals.push_back(std::move(row));
    };

    try {
        run_eval(0);
        std::size_t t = 0;
        while (t < n_tasks) {
            const std::size_t domain_end = std::min((t / tpd + 1) * tpd, n_tasks);
            const std::size_t end = std::min(t + cfg.meta_batch, domain_end);
            std::vector<Episode> batch;
            if (cfg.mode == TrainMode::joint) {
                // Same number of tasks per step as a replaying mode, drawn
                // uniformly over all domains.
                const std::size_t draws = (end - t) + cfg.memory_batch;
                for (std::size_t k = 0; k < draws; ++k) {
                    Rng rng(mix_seed(mix_seed(stream.seed(), kJointTag + k), tr.steps));
                    std::uniform_int_distribution<std::size_t> pick(0, n_domains - 1);
                    const DomainSpec& dom = domains[pick(rng)];
                    batch.push_back(sample_episode(dom, stream.shape(), stream.ood(), rng));
                }
            } else {
                for (std::size_t k = t; k < end; ++k) batch.push_back(stream.episode_at(k));
            }
            LossBreakdown br = cfg.mode == TrainMode::order ? order_step(tr, t, batch)
                                                            : baseline_step(tr, t, batch);
            br.domain_id = t / tpd;
            res.log.push_back(br);
            t = end;
            const bool at_domain_end = t == domain_end;
            const bool periodic = cfg.eval_every > 0 && tr.steps % cfg.eval_every == 0;
            if (at_domain_end || periodic) run_eval(t);
            if (at_domain_end) {
                const std::size_t d = (t - 1) / tpd;
                res.after_domain[d] = res.evals.back().accuracy[d];
            }
        }
        res.final_accuracy = res.evals.back().accuracy;
        res.final_mean = mean_of(res.final_accuracy);
        const std::size_t finished = (n_tasks + tpd - 1) / tpd;
        if (finished > 1) {
            double f = 0.0;
            for (std::size_t d = 0; d + 1 < finished; ++d) f += res.after_domain[d] - res.final_accuracy[d];
            res.forgetting = f / static_cast<double>(finished - 1);
        }
    } catch (const std::exception& e) {
        res.error = e.what();
    }
    res.model = tr.model;
    return res;
}

}  // namespace orderlab
