// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
// usage: orderlab_acceptance <configs dir> <scratch dir>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "orderlab/bench.hpp"
#include "orderlab/oodgate.hpp"

using namespace orderlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void verdict(int id, const std::string& title, bool ok, const std::string& detail) {
    std::printf("criterion %d %s: %s  (%s)\n", id, title.c_str(), ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

void note(const char* fmt, auto... args) {
    std::printf("  ");
    std::printf(fmt, args...);
    std::printf("\n");
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Runs `body`, turning an exception into a failed verdict.
void guarded(int id, const std::string& title, const std::function<void()>& body) {
    try {
        body();
    } catch (const std::exception& e) {
        verdict(id, title, false, std::string("error: ") + e.what());
    }
}

void gradient_integrity() {
    const auto t0 = Clock::now();
    const auto rows = grad_check_suite(20, 2024);
    const double secs = seconds_since(t0);
    bool ok = secs < 60.0;
    for (const GradCheckRow& r : rows) {
        note("%-15s %zu instances  max rel err %.3g (tol %.0e)", r.name.c_str(), r.instances, r.max_rel_err,
             r.tolerance);
        ok = ok && r.pass() && r.instances >= 20;
    }
    verdict(1, "gradient integrity", ok, fmt("%.1f s", secs));
}

void ot_oracle() {
    const auto t0 = Clock::now();
    const OtCheckReport r = ot_check(200, 99);
    const double secs = seconds_since(t0);
    note("cost gap %.3g  marginal err %.3g  symmetry gap %.3g  self cost %.3g", r.max_cost_gap,
         r.max_marginal_err, r.max_symmetry_gap, r.max_self_cost);
    verdict(2, "OT oracle equivalence", r.pass() && secs < 30.0, fmt("%zu instances, %.1f s", r.instances, secs));
}

void mi_sandwich() {
    const auto t0 = Clock::now();
    const auto rows = mi_bench({0.0, 0.5, 0.9}, 10000, 7);
    const double secs = seconds_since(t0);
    bool ok = secs < 180.0;
    for (const MiBenchRow& r : rows) {
        const bool row_ok = r.lower <= r.truth + 0.05 && r.upper >= r.truth - 0.05 &&
                            std::abs(r.lower - r.truth) <= 0.15 && std::abs(r.upper - r.truth) <= 0.15;
        note("rho %.1f  truth %.4f  lower %.4f  upper %.4f  %s", r.rho, r.truth, r.lower, r.upper,
             row_ok ? "ok" : "out of bounds");
        ok = ok && row_ok;
    }
    verdict(3, "MI sandwich", ok, fmt("10000 samples, %.1f s", secs));
}

void ood_detector() {
    StreamSpec spec;
    spec.class_std = 0.5;
    spec.ood_offset_multiplier = 1.0;
    spec.seed = 11;
    const OodEvalReport q = ood_eval(spec, 3.0, 200);
    note("offset %.1f class stds, multiplier 3: precision %.4f recall %.4f over %zu episodes", q.offset_in_stds,
         q.precision, q.recall, q.episodes);

    // Properties on the default stream: flagged sets shrink as the multiplier
    // grows, and a global rescale of the features changes nothing.
    StreamSpec base;
    base.seed = 12;
    const auto domains = make_domains(base);
    const OodPool pool = make_ood_pool(base);
    bool monotone = true, invariant = true;
    for (std::size_t e = 0; e < 100; ++e) {
        Rng rng(mix_seed(base.seed, e));
        const Episode ep = sample_episode(domains[e % domains.size()], base.shape, pool, rng);
        std::size_t prev = ep.unlabeled_x.rows() + 1;
        for (double m : {-1.0, 0.0, 0.5, 1.0, 2.0, 3.0, 5.0}) {
            const OodSplit s = detect(ep.support_x, ep.support_y, ep.way(), ep.unlabeled_x, ep.query_x, m);
            monotone = monotone && s.ood_indices.size() <= prev;
            prev = s.ood_indices.size();
        }
        const OodSplit ref = detect(ep.support_x, ep.support_y, ep.way(), ep.unlabeled_x, ep.query_x, 1.0);
        for (double c : {0.01, 3.7, 250.0}) {
            auto scaled = [c](Mat m) {
                for (double& v : m.data()) v *= c;
                return m;
            };
            const OodSplit s = detect(scaled(ep.support_x), ep.support_y, ep.way(), scaled(ep.unlabeled_x),
                                      scaled(ep.query_x), 1.0);
            invariant = invariant && s.ood_indices == ref.ood_indices;
        }
    }
    note("monotone in the multiplier: %s  scale invariant: %s", monotone ? "yes" : "no", invariant ? "yes" : "no");
    const bool ok = q.offset_in_stds >= 8.0 && q.precision >= 0.9 && q.recall >= 0.9 && monotone && invariant;
    verdict(4, "OOD detector quality", ok, fmt("precision %.3f recall %.3f", q.precision, q.recall));
}

void reservoir() {
    bool ok = true;
    std::string detail;
    for (auto [k, n] : {std::pair<std::size_t, std::size_t>{5, 50}, {200, 1000}}) {
        const std::size_t trials = 10000;
        std::vector<double> hits(n, 0.0);
        Rng rng(mix_seed(5, k));
        for (std::size_t t = 0; t < trials; ++t) {
            MemoryBuffer buf(k);
            for (std::size_t i = 0; i < n; ++i) {
                Episode ep;
                ep.domain_id = i;  // tag
                reservoir_offer(buf, std::move(ep), {}, rng);
            }
            for (const MemoryEntry& e : buf.slots()) hits[e.episode.domain_id] += 1.0;
        }
        const double p = static_cast<double>(k) / static_cast<double>(n);
        const double se = std::sqrt(p * (1.0 - p) / static_cast<double>(trials));
        double worst_key = 0.0, worst_all = 0.0;
        for (std::size_t i : {std::size_t{0}, std::size_t{1}, k - 1, k, k + 1, n / 2, n - 1})
            worst_key = std::max(worst_key, std::abs(hits[i] / trials - p) / se);
        for (double h : hits) worst_all = std::max(worst_all, std::abs(h / trials - p) / se);
        note("k=%zu n=%zu: worst deviation %.2f SE at fixed positions, %.2f SE over all %zu positions", k, n,
             worst_key, worst_all, n);
        ok = ok && worst_key < 3.0 && worst_all < 4.5;
        detail += fmt("%s(%zu,%zu) %.2f SE", detail.empty() ? "" : ", ", k, n, worst_key);
    }
    verdict(5, "reservoir inclusion", ok, detail);
}

double group_mean(const ExperimentSummary& s, const std::string& mode, std::size_t point = 0) {
    const GroupSummary* g = s.find(mode, point);
    if (g == nullptr || g->final_accuracy.empty()) throw std::runtime_error("no results for " + mode);
    return g->accuracy.mean;
}

void print_groups(const ExperimentSummary& s) {
    for (const GroupSummary& g : s.groups)
        note("%-8s point %-4zu accuracy %.4f +- %.4f  forgetting %.4f +- %.4f", g.mode.c_str(), g.sweep_value,
             g.accuracy.mean, g.accuracy.ci95, g.forgetting_stat.mean, g.forgetting_stat.ci95);
    for (const RunFailure& f : s.failures) note("run %zu (%s, seed %llu) failed: %s", f.run_id, f.mode.c_str(),
                                                static_cast<unsigned long long>(f.seed), f.error.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 3) {
        std::fprintf(stderr, "usage: %s <configs dir> <scratch dir>\n", argv[0]);
        return 2;
    }
    const fs::path configs = argv[1], scratch = argv[2];
    fs::create_directories(scratch);
    const auto load = [&](const char* file) {
        ExperimentConfig c = load_config((configs / file).string());
        c.out_dir = scratch.string();
        return c;
    };

    guarded(1, "gradient integrity", gradient_integrity);
    guarded(2, "OT oracle equivalence", ot_oracle);
    guarded(3, "MI sandwich", mi_sandwich);
    guarded(4, "OOD detector quality", ood_detector);
    guarded(5, "reservoir inclusion", reservoir);

    ExperimentSummary desk;
    guarded(6, "forgetting reduction", [&] {
        const auto t0 = Clock::now();
        desk = run_experiment(load("desk.json")).summary;
        const double secs = seconds_since(t0);
        print_groups(desk);
        const double order = group_mean(desk, "order"), er = group_mean(desk, "er"), seq = group_mean(desk, "seq"),
                     joint = group_mean(desk, "joint");
        bool joint_top = true;
        for (const GroupSummary& g : desk.groups) joint_top = joint_top && joint >= g.accuracy.mean;
        const PairedDiff d = paired_diff(desk.find("seq")->forgetting, desk.find("order")->forgetting);
        note("forgetting seq - order: %.4f, 95%% interval [%.4f, %.4f]", d.mean, d.lo, d.hi);
        const bool ok = desk.failures.empty() && order >= er && er >= seq && d.lo > 0.0 && joint_top && secs < 900.0;
        verdict(6, "forgetting reduction", ok,
                fmt("order %.4f >= er %.4f >= seq %.4f, joint %.4f, %.0f s", order, er, seq, joint, secs));
    });

    guarded(7, "OOD robustness", [&] {
        const ExperimentSummary s = sweep_ood(load("ood_sweep.json")).summary;
        print_groups(s);
        const double drop_order = group_mean(s, "order", 10) - group_mean(s, "order", 100);
        const double drop_ablation = group_mean(s, "ot_only", 10) - group_mean(s, "ot_only", 100);
        const double ot_only = group_mean(desk, "ot_only"), er = group_mean(desk, "er");
        note("drop R=10 -> R=100: order %.4f, without MI %.4f", drop_order, drop_ablation);
        note("at R=50: OT-only %.4f vs er %.4f", ot_only, er);
        const bool ok = s.failures.empty() && drop_order < drop_ablation && ot_only > er;
        verdict(7, "OOD robustness", ok,
                fmt("drop %.4f < %.4f, OT-only %.4f > er %.4f", drop_order, drop_ablation, ot_only, er));
    });

    guarded(8, "memory size", [&] {
        const ExperimentSummary s = sweep_memory(load("memory_sweep.json")).summary;
        print_groups(s);
        const double m10 = group_mean(s, "order", 10), m50 = group_mean(s, "order", 50),
                     m200 = group_mean(s, "order", 200);
        verdict(8, "memory size", s.failures.empty() && m10 <= m50 && m50 <= m200,
                fmt("10: %.4f  50: %.4f  200: %.4f", m10, m50, m200));
    });

    guarded(9, "determinism", [&] {
        ExperimentConfig c = load("desk.json");
        c.modes = {"order", "er", "joint"};
        c.seeds = {1, 2};
        c.stream.tasks_per_domain = 60;
        c.name = "determinism";
        c.out_dir = (scratch / "repeat_a").string();
        const ExperimentOutput a = run_experiment(c, Sweep::none, 1);
        c.out_dir = (scratch / "repeat_b").string();
        const ExperimentOutput b = run_experiment(c, Sweep::none, 2);
        const std::string ca = slurp(a.metrics_path), cb = slurp(b.metrics_path);
        const bool ok = !ca.empty() && ca == cb && slurp(a.summary_path) == slurp(b.summary_path);
        verdict(9, "determinism", ok, fmt("%zu CSV bytes, 1 vs 2 threads", ca.size()));
    });

    return failures == 0 ? 0 : 1;
}
