#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "orderlab/errors.hpp"
#include "orderlab/oodgate.hpp"
#include "orderlab/taskstream.hpp"

using namespace orderlab;

namespace {

Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Mat m(r, c);
    for (double& v : m.data()) v = n(rng);
    return m;
}

void check_partition(const OodSplit& s, std::size_t n) {
    std::vector<std::size_t> all = s.id_indices;
    all.insert(all.end(), s.ood_indices.begin(), s.ood_indices.end());
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expect(n);
    std::iota(expect.begin(), expect.end(), 0);
    CHECK(all == expect);
}

}  // namespace

TEST_CASE("unlabeled copies of support points are all in-distribution") {
    const Mat s = Mat::from_rows({{1, 0}, {0, 1}});
    const std::vector<int> y{0, 1};
    const Mat q = Mat::from_rows({{1, 0.1}, {1, -0.1}, {0.1, 1}, {-0.1, 1}});
    const OodSplit split = detect(s, y, 2, s, q);
    CHECK(split.id_indices == std::vector<std::size_t>{0, 1});
    CHECK(split.ood_indices.empty());
    CHECK(split.threshold == doctest::Approx(split.calib_mean + split.calib_std));
}

TEST_CASE("far unlabeled point is flagged by hand-computed threshold") {
    // Two classes on the axes. After normalization the query points sit at
    // angles +-a from their prototype.
    const Mat s = Mat::from_rows({{1, 0}, {0, 1}});
    const std::vector<int> y{0, 1};
    const double a = 0.1;
    const Mat q = Mat::from_rows({{std::cos(a), std::sin(a)}, {std::cos(a), -std::sin(a)},
                                  {std::sin(a), std::cos(a)}, {-std::sin(a), std::cos(a)}});
    // every query distance is the chord 2 sin(a/2); std is zero
    const double chord = 2.0 * std::sin(a / 2.0);
    const Mat u = Mat::from_rows({{1, 0.02}, {-1, -1}});
    const OodSplit split = detect(s, y, 2, u, q);
    CHECK(split.calib_mean == doctest::Approx(chord));
    CHECK(split.calib_std == doctest::Approx(0.0));
    // (-1,-1) normalized is at distance sqrt(2 + sqrt 2) ~ 1.85 >> chord
    CHECK(split.ood_indices == std::vector<std::size_t>{1});
    CHECK(split.id_indices == std::vector<std::size_t>{0});
}

TEST_CASE("empty unlabeled set and error paths") {
    const Mat s = Mat::from_rows({{1, 0}, {0, 1}});
    const std::vector<int> y{0, 1};
    const OodSplit split = detect(s, y, 2, Mat(0, 2), s);
    CHECK(split.id_indices.empty());
    CHECK(split.ood_indices.empty());
    CHECK_THROWS_AS(detect(s, y, 2, s, Mat::from_rows({{1, 0}})), ContractError);
    CHECK_THROWS_AS(detect(s, y, 2, Mat::from_rows({{0, 0}}), s), NumericError);
}

TEST_CASE("partition, monotonicity and scale invariance on random embeddings") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        std::mt19937_64 rng(seed);
        const Mat s = random_mat(6, 4, rng);
        const std::vector<int> y{0, 0, 1, 1, 2, 2};
        const Mat u = random_mat(25, 4, rng);
        const Mat q = random_mat(9, 4, rng);
        std::vector<std::size_t> prev_ood;
        bool first = true;
        for (double mult : {-1.0, 0.0, 0.5, 1.0, 2.0, 3.0}) {
            const OodSplit split = detect(s, y, 3, u, q, mult);
            check_partition(split, 25);
            if (!first) {
                // every OOD index at the larger multiplier was OOD before
                for (std::size_t i : split.ood_indices) {
                    CHECK(std::find(prev_ood.begin(), prev_ood.end(), i) != prev_ood.end());
                }
            }
            prev_ood = split.ood_indices;
            first = false;
        }
        const double c = 0.37 + static_cast<double>(seed);
        auto scaled = [c](Mat m) {
            for (double& v : m.data()) v *= c;
            return m;
        };
        const OodSplit a = detect(s, y, 3, u, q);
        const OodSplit b = detect(scaled(s), y, 3, scaled(u), scaled(q));
        CHECK(a.ood_indices == b.ood_indices);
    }
}

TEST_CASE("precision and recall scoring") {
    OodSplit split;
    split.ood_indices = {1, 2};
    split.id_indices = {0, 3};
    const DetectionQuality q = score_split(split, {false, true, false, true});
    CHECK(q.precision == 0.5);
    CHECK(q.recall == 0.5);
    CHECK(q.f1 == 0.5);
}
