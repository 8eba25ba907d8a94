#include "orderlab/bench.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "orderlab/errors.hpp"

namespace orderlab {

namespace {

using ojson = nlohmann::ordered_json;

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string to_string(OtSolver s) { return s == OtSolver::exact ? "exact" : "sinkhorn"; }

OtSolver ot_solver_from_string(const std::string& s) {
    if (s == "exact") return OtSolver::exact;
    if (s == "sinkhorn") return OtSolver::sinkhorn;
    throw ConfigError("unknown ot_solver '" + s + "' (expected exact or sinkhorn)");
}

// Reads one JSON object, remembering which keys were consumed so the rest
// can be reported as unknown.
class ObjectReader {
public:
    ObjectReader(const ojson& obj, std::string prefix, std::vector<std::string>& unknown)
        : obj_(obj), prefix_(std::move(prefix)), unknown_(unknown) {
        if (!obj_.is_object()) fail("", "expected an object");
    }
    void finish() {
        for (auto it = obj_.begin(); it != obj_.end(); ++it)
            if (!seen_.count(it.key())) unknown_.push_back(prefix_ + it.key());
    }

    const ojson* find(const std::string& key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }

    void get(const std::string& key, double& out) {
        if (const ojson* v = find(key)) out = as_double(*v, key);
    }
    void get(const std::string& key, bool& out) {
        if (const ojson* v = find(key)) {
            if (!v->is_boolean()) fail(key, "expected true or false");
            out = v->get<bool>();
        }
    }
    void get(const std::string& key, std::string& out) {
        if (const ojson* v = find(key)) out = as_string(*v, key);
    }
    template <class U>
        requires std::is_unsigned_v<U>
    void get(const std::string& key, U& out) {
        if (const ojson* v = find(key)) out = static_cast<U>(as_unsigned(*v, key));
    }
    template <class U>
    void get(const std::string& key, std::vector<U>& out) {
        const ojson* v = find(key);
        if (v == nullptr) return;
        if (!v->is_array()) fail(key, "expected an array");
        out.clear();
        for (std::size_t i = 0; i < v->size(); ++i) {
            const std::string k = key + "[" + std::to_string(i) + "]";
            if constexpr (std::is_same_v<U, std::string>) {
                out.push_back(as_string((*v)[i], k));
            } else {
                out.push_back(static_cast<U>(as_unsigned((*v)[i], k)));
            }
        }
    }

    [[noreturn]] void fail(const std::string& key, const std::string& why) const {
        throw ConfigError(prefix_ + key + ": " + why);
    }

private:
    double as_double(const ojson& v, const std::string& key) const {
        if (!v.is_number()) fail(key, "expected a number");
        return v.get<double>();
    }
    std::uint64_t as_unsigned(const ojson& v, const std::string& key) const {
        if (!v.is_number_unsigned()) fail(key, "expected a non-negative integer");
        return v.get<std::uint64_t>();
    }
    std::string as_string(const ojson& v, const std::string& key) const {
        if (!v.is_string()) fail(key, "expected a string");
        return v.get<std::string>();
    }

    const ojson& obj_;
    std::string prefix_;
    std::vector<std::string>& unknown_;
    std::set<std::string> seen_;
};

void read_trainer(const ojson& j, TrainerConfig& t, std::vector<std::string>& unknown) {
    ObjectReader r(j, "trainer.", unknown);
    r.get("lambda", t.lambda);
    r.get("beta", t.beta);
    r.get("lr", t.lr);
    r.get("meta_batch", t.meta_batch);
    r.get("memory_capacity", t.memory_capacity);
    r.get("memory_batch", t.memory_batch);
    r.get("ood_multiplier", t.ood_multiplier);
    r.get("aux_steps", t.aux_steps);
    r.get("aux_lr", t.aux_lr);
    r.get("embed_hidden", t.embed_hidden);
    r.get("embed_dim", t.embed_dim);
    r.get("decoder_hidden", t.decoder_hidden);
    r.get("critic_hidden", t.critic_hidden);
    std::string refine = to_string(t.refine), solver = to_string(t.ot_solver);
    r.get("refine", refine);
    r.get("ot_solver", solver);
    try {
        t.refine = refine_policy_from_string(refine);
        t.ot_solver = ot_solver_from_string(solver);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("trainer: ") + e.what());
    }
    r.get("distractor", t.distractor);
    r.get("sinkhorn_eps", t.sinkhorn_eps);
    r.get("eval_every", t.eval_every);
    r.get("eval_episodes", t.eval_episodes);
    r.finish();
}

void read_stream(const ojson& j, StreamSpec& s, std::vector<std::string>& unknown) {
    ObjectReader r(j, "stream.", unknown);
    r.get("n_domains", s.n_domains);
    r.get("tasks_per_domain", s.tasks_per_domain);
    r.get("dim", s.dim);
    r.get("subspace_dim", s.subspace_dim);
    r.get("train_classes", s.train_classes);
    r.get("eval_classes", s.eval_classes);
    r.get("domain_radius", s.domain_radius);
    r.get("class_std", s.class_std);
    r.get("ood_offset_multiplier", s.ood_offset_multiplier);
    r.get("ood_classes", s.ood_classes);
    r.get("way", s.shape.way);
    r.get("shot", s.shape.shot);
    r.get("unlabeled_per_class", s.shape.unlabeled_per_class);
    r.get("ood", s.shape.ood);
    r.get("query_per_class", s.shape.query_per_class);
    r.finish();
}

double t_quantile_975(std::size_t df) {
    static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                   2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
                                   2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
    if (df == 0) return 0.0;
    return df <= 30 ? table[df - 1] : 1.96;
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw ConfigError("write to '" + path + "' failed");
}

std::vector<double> random_simplex(std::size_t n, Rng& rng, bool lattice) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::uniform_int_distribution<int> k(1, 3);
    std::vector<double> w(n);
    double s = 0.0;
    for (double& v : w) s += (v = lattice ? k(rng) : u(rng));
    for (double& v : w) v /= s;
    return w;
}

Mat random_mat(std::size_t r, std::size_t c, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Mat m(r, c);
    for (double& v : m.data()) v = n(rng);
    return m;
}

// Minimum cost over the basic feasible solutions of the transportation
// polytope: every (n+m-1)-subset of cells, solved by Gaussian elimination.
double vertex_enumeration(const std::vector<double>& a, const std::vector<double>& b, const Mat& c) {
    const std::size_t n = a.size(), m = b.size(), cells = n * m, k = n + m - 1, eqs = n + m;
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> pick(k);
    std::iota(pick.begin(), pick.end(), 0);
    while (true) {
        // augmented system [A | rhs], rows are marginal constraints
        std::vector<std::vector<double>> sys(eqs, std::vector<double>(k + 1, 0.0));
        for (std::size_t col = 0; col < k; ++col) {
            sys[pick[col] / m][col] = 1.0;
            sys[n + pick[col] % m][col] = 1.0;
        }
        for (std::size_t i = 0; i < n; ++i) sys[i][k] = a[i];
        for (std::size_t j = 0; j < m; ++j) sys[n + j][k] = b[j];
        bool singular = false;
        for (std::size_t col = 0; col < k && !singular; ++col) {
            std::size_t piv = col;
            for (std::size_t r = col; r < eqs; ++r)
                if (std::abs(sys[r][col]) > std::abs(sys[piv][col])) piv = r;
            if (std::abs(sys[piv][col]) < 1e-12) {
                singular = true;
                break;
            }
            std::swap(sys[col], sys[piv]);
            for (std::size_t r = 0; r < eqs; ++r) {
                if (r == col || sys[r][col] == 0.0) continue;
                const double f = sys[r][col] / sys[col][col];
                for (std::size_t q = col; q <= k; ++q) sys[r][q] -= f * sys[col][q];
            }
        }
        if (!singular && std::abs(sys[k][k]) < 1e-9) {  // the redundant equation must hold
            double cost = 0.0;
            bool feasible = true;
            for (std::size_t col = 0; col < k; ++col) {
                const double x = sys[col][k] / sys[col][col];
                if (x < -1e-12) feasible = false;
                cost += x * c.data()[pick[col]];
            }
            if (feasible) best = std::min(best, cost);
        }
        // next combination
        std::size_t i = k;
        while (i > 0 && pick[i - 1] == cells - k + i - 1) --i;
        if (i == 0) break;
        ++pick[i - 1];
        for (std::size_t q = i; q < k; ++q) pick[q] = pick[q - 1] + 1;
    }
    return best;
}

}  // namespace

const std::vector<std::string>& known_modes() {
    static const std::vector<std::string> modes{"order", "seq", "er", "joint", "ot_only", "mi_only"};
    return modes;
}

TrainerConfig apply_mode(TrainerConfig cfg, const std::string& mode) {
    if (mode == "ot_only") {
        cfg.mode = TrainMode::order;
        cfg.lambda = 0.0;
    } else if (mode == "mi_only") {
        cfg.mode = TrainMode::order;
        cfg.beta = 0.0;
    } else {
        cfg.mode = train_mode_from_string(mode);
    }
    return cfg;
}

std::string to_string(Sweep s) {
    switch (s) {
        case Sweep::none: return "run";
        case Sweep::ood: return "ood";
        case Sweep::memory: return "memory";
    }
    return "run";
}

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
    if (name.empty()) fail("name", "must not be empty");
    for (char ch : name)
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.'))
            fail("name", "only letters, digits, '_', '-' and '.' are allowed");
    if (out_dir.empty()) fail("out_dir", "must not be empty");
    if (modes.empty()) fail("modes", "must not be empty");
    std::set<std::string> seen;
    for (const std::string& m : modes) {
        if (std::find(known_modes().begin(), known_modes().end(), m) == known_modes().end())
            fail("modes", "unknown mode '" + m + "'");
        if (!seen.insert(m).second) fail("modes", "duplicate mode '" + m + "'");
    }
    if (seeds.empty()) fail("seeds", "must not be empty");
    if (ood_values.empty()) fail("ood_values", "must not be empty");
    if (memory_sizes.empty()) fail("memory_sizes", "must not be empty");
    trainer.validate();

    const StreamSpec& s = stream;
    if (s.n_domains == 0) fail("stream.n_domains", "must be >= 1");
    if (s.tasks_per_domain == 0) fail("stream.tasks_per_domain", "must be >= 1");
    if (s.dim == 0) fail("stream.dim", "must be >= 1");
    if (s.subspace_dim == 0 || s.subspace_dim > s.dim) fail("stream.subspace_dim", "must lie in [1, dim]");
    if (s.shape.way == 0) fail("stream.way", "must be >= 1");
    if (s.shape.shot == 0) fail("stream.shot", "must be >= 1");
    if (s.shape.way * s.shape.query_per_class < 2) fail("stream.query_per_class", "need at least 2 query points");
    if (s.train_classes < s.shape.way) fail("stream.train_classes", "must be >= way");
    if (s.eval_classes < s.shape.way) fail("stream.eval_classes", "must be >= way");
    if (!(s.class_std > 0.0) || !std::isfinite(s.class_std)) fail("stream.class_std", "must be > 0");
    if (!(s.domain_radius >= 0.0) || !std::isfinite(s.domain_radius)) fail("stream.domain_radius", "must be >= 0");
    if (!(s.ood_offset_multiplier >= 0.0) || !std::isfinite(s.ood_offset_multiplier))
        fail("stream.ood_offset_multiplier", "must be >= 0");
    if (s.ood_classes == 0) fail("stream.ood_classes", "must be >= 1");
}

ExperimentConfig config_from_json(const std::string& text) {
    ExperimentConfig cfg;
    ojson j;
    try {
        j = text.find_first_not_of(" \t\r\n") == std::string::npos ? ojson::object() : ojson::parse(text);
    } catch (const ojson::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    std::vector<std::string> unknown;
    ObjectReader r(j, "", unknown);
    r.get("name", cfg.name);
    r.get("out_dir", cfg.out_dir);
    r.get("modes", cfg.modes);
    r.get("seeds", cfg.seeds);
    r.get("ood_values", cfg.ood_values);
    r.get("memory_sizes", cfg.memory_sizes);
    if (const ojson* t = r.find("trainer")) read_trainer(*t, cfg.trainer, unknown);
    if (const ojson* s = r.find("stream")) read_stream(*s, cfg.stream, unknown);
    r.finish();
    if (!unknown.empty()) {
        std::string msg = "unknown config keys:";
        for (const std::string& k : unknown) msg += " " + k;
        throw ConfigError(msg);
    }
    cfg.validate();
    return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
    const TrainerConfig& t = cfg.trainer;
    const StreamSpec& s = cfg.stream;
    ojson j;
    j["name"] = cfg.name;
    j["out_dir"] = cfg.out_dir;
    j["modes"] = cfg.modes;
    j["seeds"] = cfg.seeds;
    j["ood_values"] = cfg.ood_values;
    j["memory_sizes"] = cfg.memory_sizes;
    ojson& tj = j["trainer"];
    tj["lambda"] = t.lambda;
    tj["beta"] = t.beta;
    tj["lr"] = t.lr;
    tj["meta_batch"] = t.meta_batch;
    tj["memory_capacity"] = t.memory_capacity;
    tj["memory_batch"] = t.memory_batch;
    tj["ood_multiplier"] = t.ood_multiplier;
    tj["aux_steps"] = t.aux_steps;
    tj["aux_lr"] = t.aux_lr;
    tj["embed_hidden"] = t.embed_hidden;
    tj["embed_dim"] = t.embed_dim;
    tj["decoder_hidden"] = t.decoder_hidden;
    tj["critic_hidden"] = t.critic_hidden;
    tj["refine"] = to_string(t.refine);
    tj["distractor"] = t.distractor;
    tj["ot_solver"] = to_string(t.ot_solver);
    tj["sinkhorn_eps"] = t.sinkhorn_eps;
    tj["eval_every"] = t.eval_every;
    tj["eval_episodes"] = t.eval_episodes;
    ojson& sj = j["stream"];
    sj["n_domains"] = s.n_domains;
    sj["tasks_per_domain"] = s.tasks_per_domain;
    sj["dim"] = s.dim;
    sj["subspace_dim"] = s.subspace_dim;
    sj["train_classes"] = s.train_classes;
    sj["eval_classes"] = s.eval_classes;
    sj["domain_radius"] = s.domain_radius;
    sj["class_std"] = s.class_std;
    sj["ood_offset_multiplier"] = s.ood_offset_multiplier;
    sj["ood_classes"] = s.ood_classes;
    sj["way"] = s.shape.way;
    sj["shot"] = s.shape.shot;
    sj["unlabeled_per_class"] = s.shape.unlabeled_per_class;
    sj["ood"] = s.shape.ood;
    sj["query_per_class"] = s.shape.query_per_class;
    return j.dump(2) + "\n";
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return config_from_json(ss.str());
}

void save_config(const ExperimentConfig& cfg, const std::string& path) { write_file(path, config_to_json(cfg)); }

std::vector<RunSpec> plan_runs(const ExperimentConfig& cfg, Sweep sweep) {
    std::vector<std::size_t> points{0};
    if (sweep == Sweep::ood) points = cfg.ood_values;
    if (sweep == Sweep::memory) points = cfg.memory_sizes;
    std::vector<RunSpec> runs;
    for (const std::string& mode : cfg.modes)
        for (std::size_t p : points)
            for (std::uint64_t seed : cfg.seeds) runs.push_back({runs.size(), mode, sweep, p, seed});
    return runs;
}

TrainerConfig run_trainer_config(const ExperimentConfig& cfg, const RunSpec& run) {
    TrainerConfig t = apply_mode(cfg.trainer, run.mode);
    t.seed = run.seed;
    if (run.sweep == Sweep::memory) t.memory_capacity = run.sweep_value;
    return t;
}

StreamSpec run_stream_spec(const ExperimentConfig& cfg, const RunSpec& run) {
    StreamSpec s = cfg.stream;
    s.seed = run.seed;
    if (run.sweep == Sweep::ood) s.shape.ood = run.sweep_value;
    return s;
}

RunRecord execute_run(const ExperimentConfig& cfg, const RunSpec& run) {
    RunRecord rec;
    rec.spec = run;
    try {
        rec.result = train_stream(make_stream(run_stream_spec(cfg, run)), run_trainer_config(cfg, run));
    } catch (const std::exception& e) {
        rec.result.error = e.what();
    }
    return rec;
}

std::size_t thread_cap() {
    if (const char* env = std::getenv("ORDERLAB_THREADS")) {
        std::size_t v = 0;
        const char* end = env + std::char_traits<char>::length(env);
        auto [ptr, ec] = std::from_chars(env, end, v);
        if (ec == std::errc() && ptr == end && v > 0) return v;
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

std::vector<RunRecord> execute_runs(const ExperimentConfig& cfg, const std::vector<RunSpec>& runs,
                                    std::size_t threads) {
    std::vector<RunRecord> out(runs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < runs.size(); i = next++) out[i] = execute_run(cfg, runs[i]);
    };
    const std::size_t n = std::min(std::max<std::size_t>(threads, 1), runs.size());
    if (n <= 1) {
        worker();
        return out;
    }
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < n; ++k) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
    return out;
}

std::string metrics_header(std::size_t n_domains) {
    std::string h = "run_id,mode,sweep,sweep_value,seed,step,t,domain_id,meta_current,mi_ood,mi_id,"
                    "meta_memory,ot,lambda,beta,total,replayed";
    for (std::size_t d = 0; d < n_domains; ++d) h += ",acc_" + std::to_string(d);
    return h + ",acc_mean,forgetting";
}

std::string metrics_csv(const std::vector<RunRecord>& records, std::size_t n_domains) {
    std::string out = metrics_header(n_domains) + "\n";
    for (const RunRecord& rec : records) {
        const TrainResult& r = rec.result;
        std::size_t ev = 0;
        for (const LossBreakdown& b : r.log) {
            while (ev + 1 < r.evals.size() && r.evals[ev + 1].step <= b.step + 1) ++ev;
            std::vector<double> acc(n_domains, 0.0);
            if (ev < r.evals.size()) acc = r.evals[ev].accuracy;
            if (acc.size() != n_domains) throw ContractError("metrics_csv: domain count mismatch");
            double forgetting = 0.0;
            if (b.domain_id > 0) {
                for (std::size_t d = 0; d < b.domain_id; ++d) forgetting += r.after_domain[d] - acc[d];
                forgetting /= static_cast<double>(b.domain_id);
            }
            std::string row = std::to_string(rec.spec.run_id) + "," + rec.spec.mode + "," +
                              to_string(rec.spec.sweep) + "," + std::to_string(rec.spec.sweep_value) + "," +
                              std::to_string(rec.spec.seed) + "," + std::to_string(b.step) + "," +
                              std::to_string(b.t) + "," + std::to_string(b.domain_id);
            for (double v : {b.meta_current, b.mi_ood, b.mi_id, b.meta_memory, b.ot, b.lambda, b.beta, b.total})
                row += "," + num(v);
            row += "," + std::to_string(b.replayed);
            for (double a : acc) row += "," + num(a);
            row += "," + num(mean_of(acc)) + "," + num(forgetting) + "\n";
            out += row;
        }
    }
    return out;
}

MeanCi mean_ci(const std::vector<double>& v) {
    MeanCi r;
    r.mean = mean_of(v);
    if (v.size() < 2) return r;
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    r.ci95 = t_quantile_975(v.size() - 1) * sd / std::sqrt(static_cast<double>(v.size()));
    return r;
}

PairedDiff paired_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ContractError("paired_diff: samples differ in length");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    const MeanCi m = mean_ci(d);
    return {m.mean, m.mean - m.ci95, m.mean + m.ci95};
}

const GroupSummary* ExperimentSummary::find(const std::string& mode, std::size_t sweep_value) const {
    for (const GroupSummary& g : groups)
        if (g.mode == mode && g.sweep_value == sweep_value) return &g;
    return nullptr;
}

ExperimentSummary summarize(const std::string& name, Sweep sweep, const std::vector<RunRecord>& records) {
    ExperimentSummary s;
    s.name = name;
    s.sweep = sweep;
    for (const RunRecord& rec : records) {
        if (rec.result.error) {
            s.failures.push_back({rec.spec.run_id, rec.spec.mode, rec.spec.seed, *rec.result.error});
            continue;
        }
        auto it = std::find_if(s.groups.begin(), s.groups.end(), [&](const GroupSummary& g) {
            return g.mode == rec.spec.mode && g.sweep_value == rec.spec.sweep_value;
        });
        if (it == s.groups.end()) {
            s.groups.push_back({});
            it = std::prev(s.groups.end());
            it->mode = rec.spec.mode;
            it->sweep_value = rec.spec.sweep_value;
        }
        it->seeds.push_back(rec.spec.seed);
        it->final_accuracy.push_back(mean_of(rec.result.final_accuracy));
        it->forgetting.push_back(rec.result.forgetting);
    }
    for (GroupSummary& g : s.groups) {
        g.accuracy = mean_ci(g.final_accuracy);
        g.forgetting_stat = mean_ci(g.forgetting);
    }
    if (sweep != Sweep::none) {
        std::vector<std::string> modes;
        for (const GroupSummary& g : s.groups)
            if (std::find(modes.begin(), modes.end(), g.mode) == modes.end()) modes.push_back(g.mode);
        for (const std::string& m : modes) {
            std::vector<double> x, y;
            for (const GroupSummary& g : s.groups) {
                if (g.mode != m) continue;
                x.push_back(static_cast<double>(g.sweep_value));
                y.push_back(g.accuracy.mean);
            }
            Degradation d;
            d.mode = m;
            d.drop = y.front() - y.back();
            const double mx = mean_of(x), my = mean_of(y);
            double sxy = 0.0, sxx = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                sxy += (x[i] - mx) * (y[i] - my);
                sxx += (x[i] - mx) * (x[i] - mx);
            }
            d.slope = sxx > 0.0 ? sxy / sxx : 0.0;
            s.degradation.push_back(d);
        }
    }
    return s;
}

std::string summary_to_json(const ExperimentSummary& s) {
    ojson j;
    j["name"] = s.name;
    j["sweep"] = to_string(s.sweep);
    j["groups"] = ojson::array();
    for (const GroupSummary& g : s.groups) {
        ojson gj;
        gj["mode"] = g.mode;
        gj["sweep_value"] = g.sweep_value;
        gj["seeds"] = g.seeds;
        gj["final_accuracy"] = g.final_accuracy;
        gj["forgetting"] = g.forgetting;
        gj["accuracy_mean"] = g.accuracy.mean;
        gj["accuracy_ci95"] = g.accuracy.ci95;
        gj["forgetting_mean"] = g.forgetting_stat.mean;
        gj["forgetting_ci95"] = g.forgetting_stat.ci95;
        j["groups"].push_back(gj);
    }
    j["degradation"] = ojson::array();
    for (const Degradation& d : s.degradation)
        j["degradation"].push_back({{"mode", d.mode}, {"slope", d.slope}, {"drop", d.drop}});
    j["failures"] = ojson::array();
    for (const RunFailure& f : s.failures)
        j["failures"].push_back({{"run_id", f.run_id}, {"mode", f.mode}, {"seed", f.seed}, {"error", f.error}});
    return j.dump(2) + "\n";
}

ExperimentOutput run_experiment(const ExperimentConfig& cfg, Sweep sweep, std::optional<std::size_t> threads) {
    cfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec || !fs::is_directory(cfg.out_dir)) throw ConfigError("out_dir: cannot create '" + cfg.out_dir + "'");
    const std::string stem =
        (fs::path(cfg.out_dir) / (cfg.name + (sweep == Sweep::none ? "" : "_" + to_string(sweep)))).string();
    ExperimentOutput out;
    out.metrics_path = stem + "_metrics.csv";
    out.summary_path = stem + "_summary.json";
    for (const std::string& p : {out.metrics_path, out.summary_path}) {
        std::ofstream probe(p, std::ios::app);
        if (!probe) throw ConfigError("out_dir: '" + p + "' is not writable");
    }

    out.records = execute_runs(cfg, plan_runs(cfg, sweep), threads.value_or(thread_cap()));
    out.summary = summarize(cfg.name, sweep, out.records);
    write_file(out.metrics_path, metrics_csv(out.records, cfg.stream.n_domains));
    write_file(out.summary_path, summary_to_json(out.summary));
    return out;
}

ExperimentOutput sweep_ood(const ExperimentConfig& cfg, std::optional<std::size_t> threads) {
    return run_experiment(cfg, Sweep::ood, threads);
}

ExperimentOutput sweep_memory(const ExperimentConfig& cfg, std::optional<std::size_t> threads) {
    return run_experiment(cfg, Sweep::memory, threads);
}

// ---------------------------------------------------------------- diagnostics

std::vector<GradCheckRow> grad_check_suite(std::size_t instances, std::uint64_t seed) {
    const double h = 1e-6;
    GradCheckRow nll{"query_nll", instances, 0.0, 1e-4}, club{"club_upper", instances, 0.0, 1e-4},
        critic{"critic_lower", instances, 0.0, 1e-4}, mireg{"mi_regularizer", instances, 0.0, 1e-4},
        ot{"ot_loss", instances, 0.0, 1e-3}, step{"order_step", instances, 0.0, 1e-4};
    for (std::size_t k = 0; k < instances; ++k) {
        Rng rng(mix_seed(seed, k));
        const std::size_t d = 3 + k % 3, way = 2 + k % 4;

        {  // query loss wrt query rows and prototypes jointly
            const std::size_t q = 2 * way + 1;
            const Mat eq0 = random_mat(q, d, rng);
            const Mat p0 = random_mat(way, d, rng);
            std::vector<int> y(q);
            for (std::size_t i = 0; i < q; ++i) y[i] = static_cast<int>(i % way);
            std::vector<double> x = eq0.data();
            x.insert(x.end(), p0.data().begin(), p0.data().end());
            FlatObjective f = [&](std::span<const double> v, std::span<double> g) {
                const Mat eq(q, d, std::vector<double>(v.begin(), v.begin() + q * d));
                PrototypeSet ps;
                ps.protos = Mat(way, d, std::vector<double>(v.begin() + q * d, v.end()));
                const NllResult r = query_nll(eq, y, ps);
                if (!g.empty()) {
                    std::copy(r.grad_query.data().begin(), r.grad_query.data().end(), g.begin());
                    std::copy(r.grad_protos.data().begin(), r.grad_protos.data().end(), g.begin() + q * d);
                }
                return r.loss;
            };
            nll.max_rel_err = std::max(nll.max_rel_err, grad_check(f, x, h));
        }

        const std::size_t L = 3 + k % 5;
        PairBatch pb;
        pb.emb = random_mat(L, d, rng);
        pb.proto = random_mat(L, d, rng);
        pb.proto_index.assign(L, 0);
        const VariationalDecoder dec = VariationalDecoder::init(d, d, 6, rng);
        const Critic cr = Critic::init(d, d, 5, rng);
        auto pair_obj = [&](auto estimate) {
            return FlatObjective([&, estimate](std::span<const double> v, std::span<double> g) {
                PairBatch q = pb;
                q.emb = Mat(L, d, std::vector<double>(v.begin(), v.begin() + L * d));
                q.proto = Mat(L, d, std::vector<double>(v.begin() + L * d, v.end()));
                const MiEstimate e = estimate(q);
                if (!g.empty()) {
                    std::copy(e.grad_emb.data().begin(), e.grad_emb.data().end(), g.begin());
                    std::copy(e.grad_proto.data().begin(), e.grad_proto.data().end(), g.begin() + L * d);
                }
                return e.value;
            });
        };
        std::vector<double> px = pb.emb.data();
        px.insert(px.end(), pb.proto.data().begin(), pb.proto.data().end());
        club.max_rel_err = std::max(club.max_rel_err,
                                    grad_check(pair_obj([&](const PairBatch& q) { return club_upper(q, dec); }), px, h));
        MlpObjective dec_params = [&](const MlpParams& p, GradBuf* g) {
            VariationalDecoder dd = dec;
            dd.mean_net = p;
            const MiEstimate e = club_upper(pb, dd);
            if (g) *g = e.grad_params;
            return e.value;
        };
        club.max_rel_err = std::max(club.max_rel_err, grad_check(dec_params, dec.mean_net, h));
        critic.max_rel_err = std::max(
            critic.max_rel_err, grad_check(pair_obj([&](const PairBatch& q) { return critic_lower(q, cr); }), px, h));
        MlpObjective crit_params = [&](const MlpParams& p, GradBuf* g) {
            const MiEstimate e = critic_lower(pb, Critic{p});
            if (g) *g = e.grad_params;
            return e.value;
        };
        critic.max_rel_err = std::max(critic.max_rel_err, grad_check(crit_params, cr.net, h));

        {  // combined regularizer over a random split
            const std::size_t nu = 4 + k % 6;
            const Mat u0 = random_mat(nu, d, rng);
            const Mat p0 = random_mat(way, d, rng);
            OodSplit split;
            std::bernoulli_distribution coin(0.5);
            for (std::size_t i = 0; i < nu; ++i) (coin(rng) ? split.ood_indices : split.id_indices).push_back(i);
            const double lambda = 0.1 + 0.1 * static_cast<double>(k % 7);
            std::vector<double> x = u0.data();
            x.insert(x.end(), p0.data().begin(), p0.data().end());
            FlatObjective f = [&](std::span<const double> v, std::span<double> g) {
                const Mat u(nu, d, std::vector<double>(v.begin(), v.begin() + nu * d));
                PrototypeSet ps;
                ps.protos = Mat(way, d, std::vector<double>(v.begin() + nu * d, v.end()));
                const MiRegularizer r = mi_regularizer(u, ps, split, dec, cr, lambda);
                if (!g.empty()) {
                    std::copy(r.grad_unlabeled.data().begin(), r.grad_unlabeled.data().end(), g.begin());
                    std::copy(r.grad_protos.data().begin(), r.grad_protos.data().end(), g.begin() + nu * d);
                }
                return r.value;
            };
            mireg.max_rel_err = std::max(mireg.max_rel_err, grad_check(f, x, h));
        }

        {  // transport loss wrt the current rows
            const std::size_t n = 2 + k % 6;
            const Mat g0 = random_mat(n, d, rng);
            FlatObjective f = [&](std::span<const double> v, std::span<double> g) {
                const OtLoss l = ot_loss(Mat(n, d, std::vector<double>(v.begin(), v.end())), g0);
                if (!g.empty()) std::copy(l.grad.data().begin(), l.grad.data().end(), g.begin());
                return l.value;
            };
            ot.max_rel_err = std::max(ot.max_rel_err, grad_check(f, random_mat(n, d, rng).data(), h));
        }

        {  // full objective of one step with replayed tasks and fixed estimators
            StreamSpec s;
            s.n_domains = 2;
            s.tasks_per_domain = 4;
            s.dim = 6;
            s.subspace_dim = 2;
            s.train_classes = 6;
            s.eval_classes = 4;
            s.shape = EpisodeShape{3, 2, 3, 4, 3};
            s.seed = mix_seed(seed, 1000 + k);
            const TaskStream stream = make_stream(s);
            TrainerConfig cfg;
            cfg.embed_hidden = {16};
            cfg.embed_dim = 4;
            cfg.decoder_hidden = 6;
            cfg.critic_hidden = 5;
            cfg.lambda = 0.5;
            cfg.beta = 0.7;
            cfg.seed = s.seed;
            const OrderModel model = OrderModel::init(cfg, s.dim);
            const std::vector<Episode> current{stream.episode_at(0), stream.episode_at(1)};
            const std::vector<Episode> stored{stream.episode_at(2), stream.episode_at(5)};
            std::vector<FeatureSnapshot> snaps;
            for (const Episode& ep : stored) {
                MlpParams old = model.embed;
                std::normal_distribution<double> jitter(0.0, 0.05);
                for (Mat& w : old.weights)
                    for (double& v : w.data()) v += jitter(rng);
                snaps.push_back(take_snapshot(old, ep, cfg));
            }
            const std::vector<ReplayTask> replay{{&stored[0], &snaps[0]}, {&stored[1], &snaps[1]}};
            MlpObjective f = [&](const MlpParams& p, GradBuf* g) {
                OrderModel m = model;
                m.embed = p;
                return step_objective(m, current, replay, cfg, g).total;
            };
            step.max_rel_err = std::max(step.max_rel_err, grad_check(f, model.embed, h));
        }
    }
    return {nll, club, critic, mireg, ot, step};
}

std::vector<MiBenchRow> mi_bench(const std::vector<double>& rhos, std::size_t samples, std::uint64_t seed) {
    // Decoder steps are linear in the batch, critic steps quadratic.
    constexpr std::size_t kDecoderBatch = 1024, kDecoderSteps = 2000;
    constexpr std::size_t kCriticBatch = 128, kCriticSteps = 1500;
    std::vector<MiBenchRow> rows;
    for (std::size_t r = 0; r < rhos.size(); ++r) {
        const double rho = rhos[r];
        if (!(std::abs(rho) < 1.0)) throw ContractError("mi_bench: |rho| must be < 1");
        Rng rng(mix_seed(seed, r));
        std::normal_distribution<double> n01(0.0, 1.0);
        const double s = std::sqrt(1.0 - rho * rho);
        auto draw = [&](std::size_t L) {
            PairBatch pb;
            pb.emb = Mat(L, 1);
            pb.proto = Mat(L, 1);
            pb.proto_index.assign(L, 0);
            for (std::size_t i = 0; i < L; ++i) {
                const double e = n01(rng);
                pb.emb(i, 0) = e;
                pb.proto(i, 0) = rho * e + s * n01(rng);
            }
            return pb;
        };
        VariationalDecoder dec = VariationalDecoder::init(1, 1, 32, rng);
        Critic critic = Critic::init(1, 1, 10, rng);
        AdamState dopt = AdamState::for_params(dec.mean_net, 3e-3);
        AdamState copt = AdamState::for_params(critic.net, 1e-2);
        for (std::size_t k = 0; k < kDecoderSteps; ++k) train_decoder(dec, draw(kDecoderBatch), 1, dopt);
        for (std::size_t k = 0; k < kCriticSteps; ++k) train_critic(critic, draw(kCriticBatch), 1, copt);
        const PairBatch eval = draw(samples);
        MiBenchRow row;
        row.rho = rho;
        row.truth = -0.5 * std::log(1.0 - rho * rho);
        row.lower = critic_lower(eval, critic, false).value;
        row.upper = club_upper(eval, dec).value;
        rows.push_back(row);
    }
    return rows;
}

bool OtCheckReport::pass() const noexcept {
    return max_cost_gap <= 1e-9 && max_marginal_err <= 1e-7 && max_symmetry_gap <= 1e-9 && max_self_cost <= 1e-12;
}

OtCheckReport ot_check(std::size_t instances, std::uint64_t seed) {
    OtCheckReport rep;
    rep.instances = instances;
    for (std::size_t k = 0; k < instances; ++k) {
        Rng rng(mix_seed(seed, k));
        std::uniform_int_distribution<std::size_t> size(1, 4);
        const std::size_t n = size(rng), m = size(rng);
        const bool lattice = k % 3 == 0;  // equal masses make degenerate bases
        const auto a = random_simplex(n, rng, lattice);
        const auto b = random_simplex(m, rng, lattice);
        const Mat pa = random_mat(n, 2, rng), pb = random_mat(m, 2, rng);
        Mat c = cost_matrix(pa, pb);
        if (k % 5 == 0)
            for (double& v : c.data()) v = std::round(v);
        const TransportPlan p = ot_exact(a, b, c);
        const double ref = vertex_enumeration(a, b, c);
        rep.max_cost_gap = std::max(rep.max_cost_gap, std::abs(p.cost - ref) / std::max(1.0, std::abs(ref)));
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                s += p.W(i, j);
                rep.max_marginal_err = std::max(rep.max_marginal_err, -p.W(i, j));
            }
            rep.max_marginal_err = std::max(rep.max_marginal_err, std::abs(s - a[i]));
        }
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += p.W(i, j);
            rep.max_marginal_err = std::max(rep.max_marginal_err, std::abs(s - b[j]));
        }
        Mat ct(m, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) ct(j, i) = c(i, j);
        const TransportPlan back = ot_exact(b, a, ct);
        rep.max_symmetry_gap = std::max(rep.max_symmetry_gap, std::abs(back.cost - p.cost) / std::max(1.0, std::abs(p.cost)));
        rep.max_self_cost = std::max(rep.max_self_cost, std::abs(ot_loss(pa, pa).value));
    }
    return rep;
}

OodEvalReport ood_eval(const StreamSpec& spec, double multiplier, std::size_t episodes) {
    const std::vector<DomainSpec> domains = make_domains(spec);
    const OodPool pool = make_ood_pool(spec);
    OodEvalReport rep;
    rep.episodes = episodes;
    rep.offset_in_stds = spec.ood_offset_multiplier * spec.domain_radius / spec.class_std;
    for (std::size_t e = 0; e < episodes; ++e) {
        Rng rng(mix_seed(spec.seed, e));
        const Episode ep = sample_episode(domains[e % domains.size()], spec.shape, pool, rng);
        const OodSplit split = detect(ep.support_x, ep.support_y, ep.way(), ep.unlabeled_x, ep.query_x, multiplier);
        std::vector<bool> truth;
        for (Origin o : ep.unlabeled_truth) truth.push_back(o == Origin::out_of_distribution);
        const DetectionQuality q = score_split(split, truth);
        rep.precision += q.precision;
        rep.recall += q.recall;
    }
    if (episodes > 0) {
        rep.precision /= static_cast<double>(episodes);
        rep.recall /= static_cast<double>(episodes);
    }
    return rep;
}

}  // namespace orderlab
