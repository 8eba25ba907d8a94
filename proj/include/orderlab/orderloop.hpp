#ifndef ORDERLAB_ORDERLOOP_HPP
#define ORDERLAB_ORDERLOOP_HPP

// Continual semi-supervised meta-training over a task stream: the
// MI- and OT-regularized replay step, its baselines, evaluation and the
// outer loop with forgetting bookkeeping.

#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "orderlab/miestim.hpp"
#include "orderlab/oodgate.hpp"
#include "orderlab/otreg.hpp"
#include "orderlab/protoss.hpp"
#include "orderlab/taskstream.hpp"
#include "orderlab/tensor.hpp"

namespace orderlab {

enum class TrainMode { order, seq, er, joint };
std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

/// Which unlabeled rows enter prototype refinement.
enum class RefinePolicy { all, id_only };
std::string to_string(RefinePolicy p);
RefinePolicy refine_policy_from_string(const std::string& s);

struct TrainerConfig {
    TrainMode mode = TrainMode::order;
    double lambda = 1e-5;
    double beta = 0.003;
    double lr = 1e-3;
    std::size_t meta_batch = 2;  // stream episodes consumed per step
    std::size_t memory_capacity = 200;
    std::size_t memory_batch = 2;
    double ood_multiplier = 1.0;
    std::size_t aux_steps = 1;
    double aux_lr = 1e-3;

    std::vector<std::size_t> embed_hidden{64};
    std::size_t embed_dim = 16;
    std::size_t decoder_hidden = 32;
    std::size_t critic_hidden = 10;
    RefinePolicy refine = RefinePolicy::all;
    bool distractor = false;
    OtSolver ot_solver = OtSolver::exact;
    double sinkhorn_eps = 1e-2;

    std::size_t eval_every = 50;  // steps; 0 evaluates only at domain ends
    std::size_t eval_episodes = 20;
    std::uint64_t seed = 1;

    /// Throws ConfigError naming the offending field.
    void validate() const;
    friend bool operator==(const TrainerConfig&, const TrainerConfig&) = default;
};

struct OrderModel {
    MlpParams embed;
    AdamState embed_opt;
    VariationalDecoder decoder;
    AdamState decoder_opt;
    Critic critic;
    AdamState critic_opt;

    static OrderModel init(const TrainerConfig& cfg, std::size_t input_dim);
    friend bool operator==(const OrderModel&, const OrderModel&) = default;
};

struct LossBreakdown {
    std::size_t step = 0;
    std::size_t t = 0;  // stream index of the first current episode
    std::size_t domain_id = 0;
    double meta_current = 0.0;
    double mi_ood = 0.0;  // current tasks, upper estimate on the OOD split
    double mi_id = 0.0;   // current tasks, lower estimate on the ID split
    double meta_memory = 0.0;  // replayed tasks including their own MI terms
    double ot = 0.0;
    double total = 0.0;
    double lambda = 0.0;
    double beta = 0.0;
    std::size_t replayed = 0;

    double reconstructed_total() const noexcept {
        return meta_current + lambda * (mi_ood - mi_id) + meta_memory + beta * ot;
    }
};

/// One replayed task: the stored episode and its feature snapshot.
struct ReplayTask {
    const Episode* episode = nullptr;
    const FeatureSnapshot* snapshot = nullptr;
};

/// H(theta) for fixed estimators. Writes d H / d theta into `grad` when given.
/// lambda and beta come from the config (the mode does not override them).
LossBreakdown step_objective(const OrderModel& model, std::span<const Episode> current,
                             std::span<const ReplayTask> replay, const TrainerConfig& cfg,
                             GradBuf* grad);

/// Updates the decoder on OOD pairs and the critic on ID pairs of each task.
void auxiliary_update(OrderModel& model, std::span<const Episode> tasks, const TrainerConfig& cfg);

/// Snapshot of support and detected-ID unlabeled embeddings under `model`.
FeatureSnapshot take_snapshot(const MlpParams& embed, const Episode& ep, const TrainerConfig& cfg);

/// Mutable state of one training run.
struct Trainer {
    TrainerConfig cfg;
    OrderModel model;
    MemoryBuffer buffer;
    Rng memory_rng;
    std::size_t steps = 0;

    Trainer(const TrainerConfig& cfg, std::size_t input_dim);
};

/// One update for modes order, er and seq. er and seq run the same objective
/// with lambda = beta = 0; seq additionally neither replays nor stores.
LossBreakdown order_step(Trainer& tr, std::size_t t, std::span<const Episode> current);
/// Dispatches on the mode. Joint mode uses the episodes it is handed, which
/// train_stream draws uniformly from all domains.
LossBreakdown baseline_step(Trainer& tr, std::size_t t, std::span<const Episode> current);

struct DomainAccuracy {
    std::size_t domain_id = 0;
    double mean = 0.0;
    double ci95 = 0.0;
};

struct EvalResult {
    std::vector<DomainAccuracy> domains;
    double mean_accuracy() const noexcept;
};

/// Inference on held-out classes of every domain: detect, refine, predict.
/// Episodes come from a substream disjoint from training.
EvalResult evaluate(const MlpParams& embed, std::span<const DomainSpec> domains,
                    const OodPool& ood, const EpisodeShape& shape, std::size_t episodes_per_domain,
                    const TrainerConfig& cfg, std::uint64_t seed);

struct EvalRow {
    std::size_t step = 0;
    std::size_t t = 0;  // stream episodes consumed so far
    std::vector<double> accuracy;  // per domain
};

struct TrainResult {
    OrderModel model;
    std::vector<LossBreakdown> log;
    std::vector<EvalRow> evals;
    std::vector<double> after_domain;  // accuracy on domain d right after its last task
    std::vector<double> final_accuracy;
    double final_mean = 0.0;
    double forgetting = 0.0;  // mean over past domains of after_domain - final
    std::optional<std::string> error;
};

/// Runs the configured mode over the first `max_tasks` stream episodes.
/// Errors end the run early; the partial log is kept and `error` is set.
TrainResult train_stream(TaskStream stream, const TrainerConfig& cfg,
                         std::size_t max_tasks = std::numeric_limits<std::size_t>::max());

}  // namespace orderlab

#endif  // ORDERLAB_ORDERLOOP_HPP
