#ifndef ORDERLAB_BENCH_HPP
#define ORDERLAB_BENCH_HPP

// Experiment harness: JSON configs, (mode x sweep point x seed) run grids,
// per-step metric CSVs, summary JSON and the standalone diagnostics behind
// the command-line tool.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "orderlab/orderloop.hpp"
#include "orderlab/taskstream.hpp"

namespace orderlab {

/// Run variants. ot_only and mi_only are order with lambda or beta zeroed.
const std::vector<std::string>& known_modes();
TrainerConfig apply_mode(TrainerConfig cfg, const std::string& mode);

enum class Sweep { none, ood, memory };
std::string to_string(Sweep s);

struct ExperimentConfig {
    std::string name = "experiment";
    std::string out_dir = "results";
    TrainerConfig trainer;  // mode and seed are set per run
    StreamSpec stream;
    std::vector<std::string> modes{"order", "er", "seq"};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<std::size_t> ood_values{10, 50, 100};
    std::vector<std::size_t> memory_sizes{10, 50, 200};

    void validate() const;
    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Missing keys keep their defaults. Unknown keys and bad values throw
/// ConfigError naming the offending paths.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& cfg, const std::string& path);

struct RunSpec {
    std::size_t run_id = 0;
    std::string mode;
    Sweep sweep = Sweep::none;
    std::size_t sweep_value = 0;  // R or memory capacity; 0 without a sweep
    std::uint64_t seed = 0;
};

struct RunRecord {
    RunSpec spec;
    TrainResult result;
};

/// Runs in mode-major, then sweep point, then seed order.
std::vector<RunSpec> plan_runs(const ExperimentConfig& cfg, Sweep sweep);
TrainerConfig run_trainer_config(const ExperimentConfig& cfg, const RunSpec& run);
StreamSpec run_stream_spec(const ExperimentConfig& cfg, const RunSpec& run);
RunRecord execute_run(const ExperimentConfig& cfg, const RunSpec& run);

/// ORDERLAB_THREADS if set to a positive integer, else the hardware count.
std::size_t thread_cap();
/// Results come back in `runs` order whatever the thread count.
std::vector<RunRecord> execute_runs(const ExperimentConfig& cfg, const std::vector<RunSpec>& runs,
                                    std::size_t threads);

std::string metrics_header(std::size_t n_domains);
/// One row per training step. Accuracy columns carry the latest evaluation
/// forward; forgetting is over domains finished before the current one.
std::string metrics_csv(const std::vector<RunRecord>& records, std::size_t n_domains);

struct MeanCi {
    double mean = 0.0;
    double ci95 = 0.0;  // Student t half-width; 0 for fewer than two values
};
MeanCi mean_ci(const std::vector<double>& v);

/// Paired comparison a - b: mean difference and its two-sided 95% interval.
struct PairedDiff {
    double mean = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};
PairedDiff paired_diff(const std::vector<double>& a, const std::vector<double>& b);

struct GroupSummary {
    std::string mode;
    std::size_t sweep_value = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<double> final_accuracy;  // mean over domains, per seed
    std::vector<double> forgetting;
    MeanCi accuracy;
    MeanCi forgetting_stat;
};

struct Degradation {
    std::string mode;
    double slope = 0.0;  // least-squares d accuracy / d sweep value
    double drop = 0.0;   // accuracy at the first sweep value minus at the last
};

struct RunFailure {
    std::size_t run_id = 0;
    std::string mode;
    std::uint64_t seed = 0;
    std::string error;
};

struct ExperimentSummary {
    std::string name;
    Sweep sweep = Sweep::none;
    std::vector<GroupSummary> groups;
    std::vector<Degradation> degradation;  // sweeps only
    std::vector<RunFailure> failures;

    const GroupSummary* find(const std::string& mode, std::size_t sweep_value = 0) const;
};

ExperimentSummary summarize(const std::string& name, Sweep sweep, const std::vector<RunRecord>& records);
std::string summary_to_json(const ExperimentSummary& s);

struct ExperimentOutput {
    std::vector<RunRecord> records;
    ExperimentSummary summary;
    std::string metrics_path;
    std::string summary_path;
};

/// Executes the grid and writes <out_dir>/<name>[_sweep]_metrics.csv and
/// _summary.json. Failed runs are recorded and the rest continue.
ExperimentOutput run_experiment(const ExperimentConfig& cfg, Sweep sweep = Sweep::none,
                                std::optional<std::size_t> threads = std::nullopt);
ExperimentOutput sweep_ood(const ExperimentConfig& cfg, std::optional<std::size_t> threads = std::nullopt);
ExperimentOutput sweep_memory(const ExperimentConfig& cfg,
                              std::optional<std::size_t> threads = std::nullopt);

// Diagnostics.

struct GradCheckRow {
    std::string name;
    std::size_t instances = 0;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass() const noexcept { return max_rel_err < tolerance; }
};
/// Central-difference checks of every differentiable loss on random instances.
std::vector<GradCheckRow> grad_check_suite(std::size_t instances, std::uint64_t seed);

struct MiBenchRow {
    double rho = 0.0;
    double truth = 0.0;
    double lower = 0.0;
    double upper = 0.0;
};
/// Trains both estimators on correlated 1-D Gaussian pairs, then evaluates
/// on `samples` fresh pairs.
std::vector<MiBenchRow> mi_bench(const std::vector<double>& rhos, std::size_t samples,
                                 std::uint64_t seed);

struct OtCheckReport {
    std::size_t instances = 0;
    double max_cost_gap = 0.0;       // |exact - vertex enumeration|
    double max_marginal_err = 0.0;
    double max_symmetry_gap = 0.0;
    double max_self_cost = 0.0;      // cost of a point set against itself
    bool pass() const noexcept;
};
OtCheckReport ot_check(std::size_t instances, std::uint64_t seed);

struct OodEvalReport {
    std::size_t episodes = 0;
    double precision = 0.0;
    double recall = 0.0;
    double offset_in_stds = 0.0;  // OOD offset divided by the class std
};
/// Detector quality on raw features of episodes from `spec`.
OodEvalReport ood_eval(const StreamSpec& spec, double multiplier, std::size_t episodes);

}  // namespace orderlab

#endif  // ORDERLAB_BENCH_HPP
