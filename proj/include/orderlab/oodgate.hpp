#ifndef ORDERLAB_OODGATE_HPP
#define ORDERLAB_OODGATE_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "orderlab/tensor.hpp"

namespace orderlab {

/// Partition of an episode's unlabeled set into ID and OOD rows.
struct OodSplit {
    std::vector<std::size_t> id_indices;
    std::vector<std::size_t> ood_indices;
    double threshold = 0.0;
    double calib_mean = 0.0;
    double calib_std = 0.0;
};

/// Metric OOD detection on unit-normalized embeddings. Prototypes come from
/// the normalized support rows; the query set calibrates the threshold
/// mean + multiplier * std (population std) of query-to-prototype distances.
/// An unlabeled row is OOD iff its nearest-prototype distance exceeds it.
OodSplit detect(const Mat& support_emb, std::span<const int> labels, std::size_t way,
                const Mat& unlabeled_emb, const Mat& query_emb, double multiplier = 1.0);

struct DetectionQuality {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Scores flagged-OOD rows against ground truth (true = OOD).
/// Precision is 1 when nothing is flagged, recall is 1 when nothing is OOD.
DetectionQuality score_split(const OodSplit& split, const std::vector<bool>& is_ood);

}  // namespace orderlab

#endif  // ORDERLAB_OODGATE_HPP
