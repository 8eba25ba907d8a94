#include "orderlab/taskstream.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "orderlab/errors.hpp"

namespace orderlab {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
    auto splitmix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return splitmix(splitmix(a) ^ (b + 0x632be59bd9b4e019ULL + (a << 6) + (a >> 2)));
}

namespace {

void draw_gaussian(std::span<const double> mean, double scale, Rng& rng, std::span<double> out) {
    std::normal_distribution<double> n01(0.0, 1.0);
    for (std::size_t k = 0; k < mean.size(); ++k) out[k] = mean[k] + scale * n01(rng);
}

std::vector<double> random_unit(std::size_t dim, Rng& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> v(dim);
    double norm = 0.0;
    do {
        for (double& x : v) x = n01(rng);
        norm = std::sqrt(dot(v, v));
    } while (norm < 1e-12);
    for (double& x : v) x /= norm;
    return v;
}

// Orthonormal basis (rows) of a random k-dimensional subspace of R^dim.
Mat random_subspace(std::size_t dim, std::size_t k, Rng& rng) {
    Mat basis;
    while (basis.rows() < k) {
        std::vector<double> v = random_unit(dim, rng);
        for (std::size_t r = 0; r < basis.rows(); ++r) {
            const double proj = dot(v, basis.row(r));
            for (std::size_t c = 0; c < dim; ++c) v[c] -= proj * basis(r, c);
        }
        const double norm = std::sqrt(dot(v, v));
        if (norm < 1e-6) continue;
        for (double& x : v) x /= norm;
        basis.append_row(v);
    }
    return basis;
}

Mat means_on_sphere(const Mat& basis, std::size_t count, double radius, Rng& rng) {
    Mat out(count, basis.cols());
    for (std::size_t i = 0; i < count; ++i) {
        const std::vector<double> u = random_unit(basis.rows(), rng);
        for (std::size_t r = 0; r < basis.rows(); ++r)
            for (std::size_t c = 0; c < basis.cols(); ++c) out(i, c) += radius * u[r] * basis(r, c);
    }
    return out;
}

}  // namespace

Episode sample_episode(const DomainSpec& domain, const EpisodeShape& shape, const OodPool& ood,
                       Rng& rng, bool eval) {
    const Mat& means = eval ? domain.eval_class_means : domain.class_means;
    const std::size_t n_classes = means.rows();
    if (shape.way == 0) throw ConfigError("sample_episode: way must be positive");
    if (shape.way > n_classes) {
        throw ConfigError("sample_episode: way " + std::to_string(shape.way) + " exceeds " +
                          std::to_string(n_classes) + " available classes");
    }
    if (domain.class_cov_scale < 0.0) throw ConfigError("sample_episode: negative class scale");
    if (shape.ood > 0 && ood.n_classes() == 0) throw ConfigError("sample_episode: empty OOD pool");
    const std::size_t dim = means.cols();

    // Independent substreams for class choice, labeled draws, unlabeled ID
    // draws and OOD draws.
    Rng class_rng(rng());
    Rng labeled_rng(rng());
    Rng unlabeled_rng(rng());
    Rng ood_rng(rng());

    std::vector<std::size_t> order(n_classes);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < shape.way; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n_classes - 1);
        std::swap(order[i], order[pick(class_rng)]);
    }
    std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<long>(shape.way));
    std::sort(chosen.begin(), chosen.end());

    Episode ep;
    ep.domain_id = domain.domain_id;
    for (std::size_t c : chosen) ep.class_ids.push_back(domain.class_id(c, eval));

    ep.support_x = Mat(shape.support_size(), dim);
    ep.query_x = Mat(shape.query_size(), dim);
    ep.unlabeled_x = Mat(shape.unlabeled_size(), dim);
    std::size_t s = 0, q = 0, u = 0;
    for (std::size_t local = 0; local < chosen.size(); ++local) {
        const auto mean = means.row(chosen[local]);
        for (std::size_t k = 0; k < shape.shot; ++k, ++s) {
            draw_gaussian(mean, domain.class_cov_scale, labeled_rng, ep.support_x.row(s));
            ep.support_y.push_back(static_cast<int>(local));
        }
        for (std::size_t k = 0; k < shape.query_per_class; ++k, ++q) {
            draw_gaussian(mean, domain.class_cov_scale, labeled_rng, ep.query_x.row(q));
            ep.query_y.push_back(static_cast<int>(local));
        }
        for (std::size_t k = 0; k < shape.unlabeled_per_class; ++k, ++u) {
            draw_gaussian(mean, domain.class_cov_scale, unlabeled_rng, ep.unlabeled_x.row(u));
            ep.unlabeled_truth.push_back(Origin::in_distribution);
            ep.unlabeled_class.push_back(ep.class_ids[local]);
        }
    }
    if (shape.ood > 0) {
        if (ood.class_means.cols() != dim) throw DimensionError("sample_episode: OOD pool dim");
        std::uniform_int_distribution<std::size_t> pick(0, ood.n_classes() - 1);
        for (std::size_t k = 0; k < shape.ood; ++k, ++u) {
            const std::size_t c = pick(ood_rng);
            draw_gaussian(ood.class_means.row(c), ood.class_cov_scale, ood_rng, ep.unlabeled_x.row(u));
            ep.unlabeled_truth.push_back(Origin::out_of_distribution);
            ep.unlabeled_class.push_back(OodPool::class_id_base + static_cast<long>(c));
        }
    }
    return ep;
}

std::vector<DomainSpec> make_domains(const StreamSpec& spec) {
    if (spec.n_domains == 0) throw ConfigError("make_domains: at least one domain required");
    if (spec.subspace_dim == 0 || spec.subspace_dim > spec.dim) {
        throw ConfigError("make_domains: subspace_dim must lie in [1, dim]");
    }
    if (!(spec.class_std > 0.0)) throw ConfigError("make_domains: class_std must be positive");
    if (spec.train_classes < spec.shape.way || spec.eval_classes < spec.shape.way) {
        throw ConfigError("make_domains: fewer classes than the episode way");
    }
    std::vector<DomainSpec> out;
    for (std::size_t d = 0; d < spec.n_domains; ++d) {
        DomainSpec dom;
        dom.domain_id = d;
        dom.rng_seed = mix_seed(spec.seed, 0xD0A1000ULL + d);
        Rng rng(dom.rng_seed);
        const Mat basis = random_subspace(spec.dim, spec.subspace_dim, rng);
        dom.class_means = means_on_sphere(basis, spec.train_classes, spec.domain_radius, rng);
        dom.eval_class_means = means_on_sphere(basis, spec.eval_classes, spec.domain_radius, rng);
        dom.class_cov_scale = spec.class_std;
        out.push_back(std::move(dom));
    }
    return out;
}

OodPool make_ood_pool(const StreamSpec& spec) {
    OodPool pool;
    pool.class_cov_scale = spec.class_std;
    Rng rng(mix_seed(spec.seed, 0x00D0000ULL));
    const double radius = (1.0 + spec.ood_offset_multiplier) * spec.domain_radius;
    pool.class_means = Mat(spec.ood_classes, spec.dim);
    for (std::size_t c = 0; c < spec.ood_classes; ++c) {
        const std::vector<double> u = random_unit(spec.dim, rng);
        for (std::size_t k = 0; k < spec.dim; ++k) pool.class_means(c, k) = radius * u[k];
    }
    return pool;
}

TaskStream::TaskStream(std::vector<DomainSpec> domains, std::size_t tasks_per_domain,
                       EpisodeShape shape, OodPool ood, std::uint64_t seed)
    : domains_(std::move(domains)),
      tasks_per_domain_(tasks_per_domain),
      shape_(shape),
      ood_(std::move(ood)),
      seed_(seed) {
    if (domains_.empty()) throw ConfigError("make_stream: empty domain list");
    if (tasks_per_domain_ == 0) throw ConfigError("make_stream: tasks_per_domain must be >= 1");
    for (const auto& d : domains_) {
        if (shape_.way > d.n_classes()) {
            throw ConfigError("make_stream: domain " + std::to_string(d.domain_id) +
                              " has fewer classes than the episode way");
        }
    }
}

Episode TaskStream::episode_at(std::size_t t) const {
    if (t >= size()) throw ContractError("TaskStream::episode_at: index past end of stream");
    Rng rng(mix_seed(seed_, t));
    return sample_episode(domains_[t / tasks_per_domain_], shape_, ood_, rng);
}

std::optional<std::pair<std::size_t, Episode>> TaskStream::next() {
    if (next_ >= size()) return std::nullopt;
    const std::size_t t = next_++;
    return std::make_pair(t, episode_at(t));
}

TaskStream make_stream(std::vector<DomainSpec> specs, std::size_t tasks_per_domain,
                       std::uint64_t seed, EpisodeShape shape, OodPool ood) {
    return TaskStream(std::move(specs), tasks_per_domain, shape, std::move(ood), seed);
}

TaskStream make_stream(const StreamSpec& spec) {
    return TaskStream(make_domains(spec), spec.tasks_per_domain, spec.shape, make_ood_pool(spec),
                      spec.seed);
}

Mat FeatureSnapshot::gather_inputs(const Episode& ep) const {
    check_matches(ep);
    Mat x(rows(), ep.support_x.cols());
    for (std::size_t r = 0; r < support_rows; ++r) {
        std::copy(ep.support_x.row(r).begin(), ep.support_x.row(r).end(), x.row(r).begin());
    }
    for (std::size_t k = 0; k < unlabeled_ids.size(); ++k) {
        const auto src = ep.unlabeled_x.row(unlabeled_ids[k]);
        std::copy(src.begin(), src.end(), x.row(support_rows + k).begin());
    }
    return x;
}

void FeatureSnapshot::check_matches(const Episode& ep) const {
    if (support_rows != ep.support_x.rows()) {
        throw ContractError("FeatureSnapshot: support row count differs from the episode");
    }
    if (features.rows() != support_rows + unlabeled_ids.size()) {
        throw ContractError("FeatureSnapshot: feature rows != |S| + |U_id|");
    }
    for (std::size_t id : unlabeled_ids) {
        if (id >= ep.unlabeled_x.rows()) throw ContractError("FeatureSnapshot: bad unlabeled index");
    }
}

bool reservoir_offer(MemoryBuffer& buffer, Episode episode, FeatureSnapshot snapshot, Rng& rng) {
    snapshot.check_matches(episode);
    ++buffer.seen_;
    if (buffer.capacity_ == 0) return false;
    if (buffer.slots_.size() < buffer.capacity_) {
        buffer.slots_.push_back({std::move(episode), std::move(snapshot)});
        return true;
    }
    // Draw j uniformly from [0, seen); keep the episode iff j lands in a slot.
    std::uniform_int_distribution<std::size_t> pick(0, buffer.seen_ - 1);
    const std::size_t j = pick(rng);
    if (j >= buffer.capacity_) return false;
    buffer.slots_[j] = {std::move(episode), std::move(snapshot)};
    return true;
}

std::vector<std::size_t> sample_memory_batch(const MemoryBuffer& buffer, std::size_t batch_size,
                                             Rng& rng) {
    const std::size_t n = buffer.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (batch_size >= n) return idx;
    for (std::size_t i = 0; i < batch_size; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(batch_size);
    return idx;
}

namespace {

nlohmann::json row_json(const Mat& m, std::size_t r) {
    return nlohmann::json(std::vector<double>(m.row(r).begin(), m.row(r).end()));
}

}  // namespace

std::string episode_to_json(const Episode& ep) {
    nlohmann::json j;
    j["domain_id"] = ep.domain_id;
    j["class_ids"] = ep.class_ids;
    j["support"] = nlohmann::json::array();
    for (std::size_t r = 0; r < ep.support_x.rows(); ++r) {
        j["support"].push_back({row_json(ep.support_x, r), ep.support_y[r]});
    }
    j["unlabeled"] = nlohmann::json::array();
    for (std::size_t r = 0; r < ep.unlabeled_x.rows(); ++r) {
        const char* truth = ep.unlabeled_truth[r] == Origin::in_distribution ? "id" : "ood";
        j["unlabeled"].push_back({row_json(ep.unlabeled_x, r), truth, ep.unlabeled_class[r]});
    }
    j["query"] = nlohmann::json::array();
    for (std::size_t r = 0; r < ep.query_x.rows(); ++r) {
        j["query"].push_back({row_json(ep.query_x, r), ep.query_y[r]});
    }
    return j.dump();
}

Episode episode_from_json(const std::string& text) {
    Episode ep;
    try {
        const auto j = nlohmann::json::parse(text);
        ep.domain_id = j.at("domain_id").get<std::size_t>();
        ep.class_ids = j.at("class_ids").get<std::vector<long>>();
        for (const auto& item : j.at("support")) {
            ep.support_x.append_row(item.at(0).get<std::vector<double>>());
            ep.support_y.push_back(item.at(1).get<int>());
        }
        for (const auto& item : j.at("unlabeled")) {
            ep.unlabeled_x.append_row(item.at(0).get<std::vector<double>>());
            const auto truth = item.at(1).get<std::string>();
            if (truth != "id" && truth != "ood") throw ConfigError("episode JSON: bad truth tag");
            ep.unlabeled_truth.push_back(truth == "id" ? Origin::in_distribution
                                                       : Origin::out_of_distribution);
            ep.unlabeled_class.push_back(item.at(2).get<long>());
        }
        for (const auto& item : j.at("query")) {
            ep.query_x.append_row(item.at(0).get<std::vector<double>>());
            ep.query_y.push_back(item.at(1).get<int>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("episode JSON: ") + e.what());
    }
    return ep;
}

}  // namespace orderlab
