// orderlab: command-line front end for experiments and diagnostics.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "orderlab/bench.hpp"
#include "orderlab/errors.hpp"

using namespace orderlab;

namespace {

struct GlobalFlags {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::string> mode;
};

ExperimentConfig load_with_overrides(const std::string& path, const GlobalFlags& g) {
    ExperimentConfig cfg = load_config(path);
    if (g.seed) cfg.seeds = {*g.seed};
    if (g.out_dir) cfg.out_dir = *g.out_dir;
    if (g.mode) cfg.modes = {*g.mode};
    cfg.validate();
    return cfg;
}

int report(const ExperimentOutput& out) {
    const ExperimentSummary& s = out.summary;
    const bool sweep = s.sweep != Sweep::none;
    std::printf("%-8s %s%-7s %-18s %-18s\n", "mode", sweep ? "point  " : "", "seeds", "final accuracy", "forgetting");
    for (const GroupSummary& gr : s.groups) {
        std::printf("%-8s ", gr.mode.c_str());
        if (sweep) std::printf("%-6zu ", gr.sweep_value);
        std::printf("%-7zu %.4f +- %.4f    %.4f +- %.4f\n", gr.seeds.size(), gr.accuracy.mean, gr.accuracy.ci95,
                    gr.forgetting_stat.mean, gr.forgetting_stat.ci95);
    }
    for (const Degradation& d : s.degradation)
        std::printf("degradation %-8s slope %.3e  drop %.4f\n", d.mode.c_str(), d.slope, d.drop);
    for (const RunFailure& f : s.failures)
        std::printf("FAILED run %zu (%s, seed %llu): %s\n", f.run_id, f.mode.c_str(),
                    static_cast<unsigned long long>(f.seed), f.error.c_str());
    std::printf("metrics: %s\nsummary: %s\n", out.metrics_path.c_str(), out.summary_path.c_str());
    return s.failures.empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual semi-supervised meta-learning lab"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalFlags g;
    std::uint64_t seed = 0;
    std::string out_dir, mode;
    auto* seed_opt = app.add_option("--seed", seed, "Single seed (replaces the config's seed list)");
    auto* out_opt = app.add_option("--out-dir", out_dir, "Output directory (replaces the config's out_dir)");
    auto* mode_opt = app.add_option("--mode", mode, "Single mode: order, seq, er, joint, ot_only or mi_only");

    std::string config;
    auto* run = app.add_subcommand("run", "Train every (mode, seed) pair of a config");
    run->add_option("config", config, "Experiment JSON")->required()->check(CLI::ExistingFile);
    auto* sood = app.add_subcommand("sweep-ood", "Repeat the runs for each OOD count in ood_values");
    sood->add_option("config", config, "Experiment JSON")->required()->check(CLI::ExistingFile);
    auto* smem = app.add_subcommand("sweep-memory", "Repeat the runs for each buffer size in memory_sizes");
    smem->add_option("config", config, "Experiment JSON")->required()->check(CLI::ExistingFile);

    std::size_t instances = 20;
    auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every loss gradient");
    gc->add_option("--instances", instances, "Random instances per loss")->capture_default_str();

    std::size_t samples = 10000;
    std::vector<double> rhos{0.0, 0.5, 0.9};
    auto* mib = app.add_subcommand("mi-bench", "Both MI estimates on correlated Gaussian pairs");
    mib->add_option("--samples", samples, "Evaluation pairs")->capture_default_str();
    mib->add_option("--rho", rhos, "Correlations")->capture_default_str();

    std::size_t ot_instances = 200;
    auto* otc = app.add_subcommand("ot-check", "Exact OT against vertex enumeration on small instances");
    otc->add_option("--instances", ot_instances, "Random instances")->capture_default_str();

    StreamSpec ood_spec;
    double multiplier = 1.0;
    std::size_t episodes = 200;
    auto* oe = app.add_subcommand("ood-eval", "Detector precision and recall on raw synthetic episodes");
    oe->add_option("--multiplier", multiplier, "Threshold is mean + multiplier * std")->capture_default_str();
    oe->add_option("--episodes", episodes, "Episodes to score")->capture_default_str();
    oe->add_option("--class-std", ood_spec.class_std, "Class standard deviation")->capture_default_str();
    oe->add_option("--offset", ood_spec.ood_offset_multiplier, "OOD offset in domain radii")->capture_default_str();
    oe->add_option("--ood", ood_spec.shape.ood, "OOD points per episode")->capture_default_str();

    CLI11_PARSE(app, argc, argv);
    if (*seed_opt) g.seed = seed;
    if (*out_opt) g.out_dir = out_dir;
    if (*mode_opt) g.mode = mode;
    const std::uint64_t diag_seed = g.seed.value_or(1);

    try {
        if (*run) return report(run_experiment(load_with_overrides(config, g)));
        if (*sood) return report(sweep_ood(load_with_overrides(config, g)));
        if (*smem) return report(sweep_memory(load_with_overrides(config, g)));
        if (*gc) {
            bool ok = true;
            std::printf("%-16s %-10s %-12s %s\n", "loss", "instances", "max rel err", "tolerance");
            for (const GradCheckRow& r : grad_check_suite(instances, diag_seed)) {
                std::printf("%-16s %-10zu %-12.3g %.0e  %s\n", r.name.c_str(), r.instances, r.max_rel_err,
                            r.tolerance, r.pass() ? "ok" : "FAIL");
                ok = ok && r.pass();
            }
            return ok ? 0 : 1;
        }
        if (*mib) {
            std::printf("%-6s %-10s %-10s %-10s\n", "rho", "true MI", "lower", "upper");
            for (const MiBenchRow& r : mi_bench(rhos, samples, diag_seed))
                std::printf("%-6.2f %-10.4f %-10.4f %-10.4f\n", r.rho, r.truth, r.lower, r.upper);
            return 0;
        }
        if (*otc) {
            const OtCheckReport r = ot_check(ot_instances, diag_seed);
            std::printf("instances %zu\ncost gap %.3g\nmarginal error %.3g\nsymmetry gap %.3g\nself cost %.3g\n%s\n",
                        r.instances, r.max_cost_gap, r.max_marginal_err, r.max_symmetry_gap, r.max_self_cost,
                        r.pass() ? "ok" : "FAIL");
            return r.pass() ? 0 : 1;
        }
        if (*oe) {
            ood_spec.seed = diag_seed;
            const OodEvalReport r = ood_eval(ood_spec, multiplier, episodes);
            std::printf("episodes %zu\noffset %.2f class stds\nprecision %.4f\nrecall %.4f\n", r.episodes,
                        r.offset_in_stds, r.precision, r.recall);
            return 0;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
