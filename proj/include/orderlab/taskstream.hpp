#ifndef ORDERLAB_TASKSTREAM_HPP
#define ORDERLAB_TASKSTREAM_HPP

// Synthetic evolving episode streams, OOD injection and the reservoir
// memory of stored episodes with their feature snapshots.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "orderlab/tensor.hpp"

namespace orderlab {

using Rng = std::mt19937_64;

/// splitmix64-style combination of two seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

/// One task distribution: isotropic Gaussian classes with fixed means.
struct DomainSpec {
    std::size_t domain_id = 0;
    Mat class_means;       // meta-training classes, one row per class
    Mat eval_class_means;  // held-out classes used only for evaluation
    double class_cov_scale = 1.0;
    std::uint64_t rng_seed = 0;

    std::size_t n_classes() const noexcept { return class_means.rows(); }
    std::size_t dim() const noexcept { return class_means.cols(); }
    /// Global id of training class c (held-out classes are offset by 500).
    long class_id(std::size_t c, bool eval = false) const noexcept {
        return static_cast<long>(domain_id) * 1000 + (eval ? 500 : 0) + static_cast<long>(c);
    }
};

/// External distribution used to draw out-of-distribution unlabeled points.
struct OodPool {
    static constexpr long class_id_base = 1'000'000;

    Mat class_means;
    double class_cov_scale = 1.0;

    std::size_t n_classes() const noexcept { return class_means.rows(); }
};

struct EpisodeShape {
    std::size_t way = 5;                  // N
    std::size_t shot = 1;                 // K
    std::size_t unlabeled_per_class = 10; // Z
    std::size_t ood = 50;                 // R
    std::size_t query_per_class = 15;

    std::size_t support_size() const noexcept { return way * shot; }
    std::size_t unlabeled_size() const noexcept { return way * unlabeled_per_class + ood; }
    std::size_t query_size() const noexcept { return way * query_per_class; }
    friend bool operator==(const EpisodeShape&, const EpisodeShape&) = default;
};

enum class Origin { in_distribution, out_of_distribution };

/// A semi-supervised few-shot task. Labels are local (0..way-1), ordered by
/// ascending global class id. The unlabeled ground truth is for evaluation only.
struct Episode {
    std::size_t domain_id = 0;
    std::vector<long> class_ids;

    Mat support_x;
    std::vector<int> support_y;

    Mat unlabeled_x;
    std::vector<Origin> unlabeled_truth;
    std::vector<long> unlabeled_class;

    Mat query_x;
    std::vector<int> query_y;

    std::size_t way() const noexcept { return class_ids.size(); }
    friend bool operator==(const Episode&, const Episode&) = default;
};

/// Draws one episode from `domain`. `eval` selects the held-out classes.
Episode sample_episode(const DomainSpec& domain, const EpisodeShape& shape, const OodPool& ood,
                       Rng& rng, bool eval = false);

/// Parameters of the default synthetic benchmark.
struct StreamSpec {
    std::size_t n_domains = 3;
    std::size_t tasks_per_domain = 300;
    std::size_t dim = 16;
    std::size_t subspace_dim = 3;  // class means of a domain span a random subspace
    std::size_t train_classes = 20;
    std::size_t eval_classes = 10;
    double domain_radius = 4.0;
    double class_std = 1.0;
    double ood_offset_multiplier = 2.0;
    std::size_t ood_classes = 30;
    EpisodeShape shape;
    std::uint64_t seed = 1;

    friend bool operator==(const StreamSpec&, const StreamSpec&) = default;
};

std::vector<DomainSpec> make_domains(const StreamSpec& spec);
/// OOD means sit at radius (1 + offset) * domain_radius, so each is at least
/// offset * domain_radius away from every domain class mean.
OodPool make_ood_pool(const StreamSpec& spec);

/// Ordered sequence of episodes; episode t is seeded by mix_seed(seed, t).
class TaskStream {
public:
    TaskStream(std::vector<DomainSpec> domains, std::size_t tasks_per_domain, EpisodeShape shape,
               OodPool ood, std::uint64_t seed);

    std::size_t size() const noexcept { return domains_.size() * tasks_per_domain_; }
    std::size_t position() const noexcept { return next_; }
    Episode episode_at(std::size_t t) const;
    std::optional<std::pair<std::size_t, Episode>> next();
    void rewind() noexcept { next_ = 0; }

    const std::vector<DomainSpec>& domains() const noexcept { return domains_; }
    const OodPool& ood() const noexcept { return ood_; }
    const EpisodeShape& shape() const noexcept { return shape_; }
    std::size_t tasks_per_domain() const noexcept { return tasks_per_domain_; }
    std::uint64_t seed() const noexcept { return seed_; }

private:
    std::vector<DomainSpec> domains_;
    std::size_t tasks_per_domain_;
    EpisodeShape shape_;
    OodPool ood_;
    std::uint64_t seed_;
    std::size_t next_ = 0;
};

TaskStream make_stream(std::vector<DomainSpec> specs, std::size_t tasks_per_domain,
                       std::uint64_t seed, EpisodeShape shape, OodPool ood);
TaskStream make_stream(const StreamSpec& spec);

/// Embeddings of S ∪ U_id taken when an episode was stored.
struct FeatureSnapshot {
    Mat features;
    std::size_t support_rows = 0;
    std::vector<std::size_t> unlabeled_ids;  // row support_rows + k is unlabeled_ids[k]

    std::size_t rows() const noexcept { return features.rows(); }
    /// Raw inputs of the snapshotted points, in row order.
    Mat gather_inputs(const Episode& ep) const;
    void check_matches(const Episode& ep) const;
};

struct MemoryEntry {
    Episode episode;
    FeatureSnapshot snapshot;
};

class MemoryBuffer {
public:
    explicit MemoryBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t size() const noexcept { return slots_.size(); }
    bool empty() const noexcept { return slots_.empty(); }
    std::size_t seen_count() const noexcept { return seen_; }
    const MemoryEntry& at(std::size_t i) const { return slots_.at(i); }
    const std::vector<MemoryEntry>& slots() const noexcept { return slots_; }

    /// Reservoir update; returns whether the episode was stored.
    friend bool reservoir_offer(MemoryBuffer& buffer, Episode episode, FeatureSnapshot snapshot,
                                Rng& rng);

private:
    std::size_t capacity_;
    std::vector<MemoryEntry> slots_;
    std::size_t seen_ = 0;
};

bool reservoir_offer(MemoryBuffer& buffer, Episode episode, FeatureSnapshot snapshot, Rng& rng);

/// Uniform draw without replacement of slot indices.
std::vector<std::size_t> sample_memory_batch(const MemoryBuffer& buffer, std::size_t batch_size,
                                             Rng& rng);

/// JSON text for fixtures:
/// {domain_id, class_ids, support: [[x...], y], unlabeled: [[x...], "id"|"ood", class], query}.
std::string episode_to_json(const Episode& ep);
Episode episode_from_json(const std::string& text);

}  // namespace orderlab

#endif  // ORDERLAB_TASKSTREAM_HPP
