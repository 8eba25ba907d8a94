#include "orderlab/oodgate.hpp"

#include <cmath>
#include <limits>

#include "orderlab/errors.hpp"
#include "orderlab/protoss.hpp"

namespace orderlab {

namespace {

Mat normalize_rows(const Mat& m) {
    Mat out = m;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        const double norm = std::sqrt(dot(row, row));
        if (!(norm > 0.0) || !std::isfinite(norm)) {
            throw NumericError("detect: embedding row with zero or non-finite norm");
        }
        for (double& v : row) v /= norm;
    }
    return out;
}

double nearest_distance(std::span<const double> w, const Mat& protos) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < protos.rows(); ++c) {
        best = std::min(best, squared_distance(w, protos.row(c)));
    }
    return std::sqrt(best);
}

}  // namespace

OodSplit detect(const Mat& support_emb, std::span<const int> labels, std::size_t way,
                const Mat& unlabeled_emb, const Mat& query_emb, double multiplier) {
    if (query_emb.rows() < 2) throw ContractError("detect: at least two query rows are required");
    const PrototypeSet ps = prototypes(normalize_rows(support_emb), labels, way);
    const Mat wq = normalize_rows(query_emb);

    OodSplit split;
    std::vector<double> d(wq.rows());
    double sum = 0.0;
    for (std::size_t i = 0; i < wq.rows(); ++i) {
        d[i] = nearest_distance(wq.row(i), ps.protos);
        sum += d[i];
    }
    const double n = static_cast<double>(d.size());
    split.calib_mean = sum / n;
    double var = 0.0;
    for (double di : d) var += (di - split.calib_mean) * (di - split.calib_mean);
    split.calib_std = std::sqrt(var / n);
    split.threshold = split.calib_mean + multiplier * split.calib_std;

    if (unlabeled_emb.rows() == 0) return split;
    const Mat wu = normalize_rows(unlabeled_emb);
    for (std::size_t i = 0; i < wu.rows(); ++i) {
        if (nearest_distance(wu.row(i), ps.protos) > split.threshold) {
            split.ood_indices.push_back(i);
        } else {
            split.id_indices.push_back(i);
        }
    }
    return split;
}

DetectionQuality score_split(const OodSplit& split, const std::vector<bool>& is_ood) {
    std::size_t tp = 0;
    for (std::size_t i : split.ood_indices) {
        if (i >= is_ood.size()) throw DimensionError("score_split: index beyond truth vector");
        if (is_ood[i]) ++tp;
    }
    std::size_t positives = 0;
    for (bool b : is_ood) positives += b ? 1 : 0;
    DetectionQuality q;
    q.precision = split.ood_indices.empty()
                      ? 1.0
                      : static_cast<double>(tp) / static_cast<double>(split.ood_indices.size());
    q.recall = positives == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(positives);
    q.f1 = (q.precision + q.recall) > 0.0 ? 2.0 * q.precision * q.recall / (q.precision + q.recall)
                                          : 0.0;
    return q;
}

}  // namespace orderlab
