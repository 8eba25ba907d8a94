#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "orderlab/errors.hpp"
#include "orderlab/miestim.hpp"

using namespace orderlab;

namespace {

Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Mat m(r, c);
    for (double& v : m.data()) v = n(rng);
    return m;
}

PairBatch random_pairs(std::size_t L, std::size_t de, std::size_t dp, std::mt19937_64& rng) {
    PairBatch pb;
    pb.emb = random_mat(L, de, rng);
    pb.proto = random_mat(L, dp, rng);
    pb.proto_index.resize(L, 0);
    return pb;
}

// Lower bound written as the double loop over (i, j).
double lower_oracle(const PairBatch& pb, const Critic& c) {
    const std::size_t L = pb.size();
    auto f = [&](std::size_t i, std::size_t j) {
        std::vector<double> x(pb.emb.row(i).begin(), pb.emb.row(i).end());
        x.insert(x.end(), pb.proto.row(j).begin(), pb.proto.row(j).end());
        return oracle::mlp_row(c.net, x)[0];
    };
    double diag = 0.0, off = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        diag += f(i, i);
        for (std::size_t j = 0; j < L; ++j) off += std::exp(f(i, j));
    }
    const double l = static_cast<double>(L);
    return diag / l - off / (l * l) + 1.0;
}

// Upper bound written with explicit Gaussian log densities.
double upper_oracle(const PairBatch& pb, const VariationalDecoder& d) {
    const std::size_t L = pb.size();
    const double var = std::exp(d.log_variance);
    auto logz = [&](std::size_t i, std::size_t j) {
        const auto m = oracle::mlp_row(d.mean_net, {pb.emb.row(j).begin(), pb.emb.row(j).end()});
        double s = 0.0;
        for (std::size_t k = 0; k < m.size(); ++k) s += (pb.proto(i, k) - m[k]) * (pb.proto(i, k) - m[k]);
        return -0.5 * s / var - 0.5 * static_cast<double>(m.size()) * std::log(2 * std::numbers::pi * var);
    };
    double diag = 0.0, all = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        diag += logz(i, i);
        for (std::size_t j = 0; j < L; ++j) all += logz(i, j);
    }
    const double l = static_cast<double>(L);
    return diag / l - all / (l * l);
}

PairBatch gaussian_pairs(double rho, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    PairBatch pb;
    pb.emb = Mat(n, 1);
    pb.proto = Mat(n, 1);
    pb.proto_index.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = g(rng), z = g(rng);
        pb.emb(i, 0) = x;
        pb.proto(i, 0) = rho * x + std::sqrt(1 - rho * rho) * z;
    }
    return pb;
}

}  // namespace

TEST_CASE("a single pair gives an upper estimate of exactly zero") {
    std::mt19937_64 rng(1);
    const auto dec = VariationalDecoder::init(3, 2, 8, rng);
    const PairBatch pb = random_pairs(1, 3, 2, rng);
    CHECK(club_upper(pb, dec).value == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
}

TEST_CASE("upper estimate matches the explicit log-density double sum") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        auto dec = VariationalDecoder::init(3, 2, 8, rng);
        dec.log_variance = 0.3 * static_cast<double>(seed % 3);
        const PairBatch pb = random_pairs(2 + seed, 3, 2, rng);
        const double v = club_upper(pb, dec).value;
        CHECK(v == doctest::Approx(upper_oracle(pb, dec)).epsilon(1e-10));
        CHECK(v == doctest::Approx(club_from_log_density(log_density_matrix(pb, dec))).epsilon(1e-10));
    }
}

TEST_CASE("upper estimate for two pairs has the closed form") {
    // identity-like decoder: m(e) = e
    VariationalDecoder dec;
    dec.mean_net.layer_dims = {1, 1};
    dec.mean_net.weights = {Mat(1, 1, 1.0)};
    dec.mean_net.biases = {Mat(1, 1, 0.0)};
    dec.mean_net.activations = {Activation::identity};
    PairBatch pb;
    pb.emb = Mat::from_rows({{0.0}, {1.0}});
    pb.proto = Mat::from_rows({{0.0}, {1.0}});
    pb.proto_index = {0, 1};
    // diag log Z = c, off-diagonal = c - 1/2; mean diff = (1/4)(2 * 1/2)
    CHECK(club_upper(pb, dec).value == doctest::Approx(0.25));
}

TEST_CASE("lower estimate matches the explicit double loop") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        const auto critic = Critic::init(3, 2, 6, rng);
        const PairBatch pb = random_pairs(1 + seed, 3, 2, rng);
        const double ref = lower_oracle(pb, critic);
        CHECK(critic_lower(pb, critic).value == doctest::Approx(ref).epsilon(1e-12));
        CHECK(critic_lower(pb, critic, false).value == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("constant critic output c gives c - e^c + 1") {
    std::mt19937_64 rng(4);
    Critic critic = Critic::init(2, 2, 4, rng);
    for (Mat& w : critic.net.weights) w.fill(0.0);
    for (double c : {0.0, 0.5, -1.2}) {
        critic.net.biases.back().fill(c);
        const PairBatch pb = random_pairs(7, 2, 2, rng);
        CHECK(critic_lower(pb, critic).value == doctest::Approx(c - std::exp(c) + 1.0));
    }
}

TEST_CASE("estimator gradients agree with finite differences over 20 seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(100 + seed);
        const std::size_t L = 2 + seed % 5;
        const PairBatch pb = random_pairs(L, 3, 3, rng);
        auto dec = VariationalDecoder::init(3, 3, 6, rng);
        const auto critic = Critic::init(3, 3, 5, rng);

        const MiEstimate up = club_upper(pb, dec);
        const MiEstimate lo = critic_lower(pb, critic);
        auto with_emb = [&](const std::vector<double>& flat) {
            PairBatch q = pb;
            q.emb = Mat(L, 3, flat);
            return std::make_pair(upper_oracle(q, dec), lower_oracle(q, critic));
        };
        auto with_proto = [&](const std::vector<double>& flat) {
            PairBatch q = pb;
            q.proto = Mat(L, 3, flat);
            return std::make_pair(upper_oracle(q, dec), lower_oracle(q, critic));
        };
        const double h = 1e-5;
        CHECK(oracle::max_rel_err(up.grad_emb.data(), oracle::fd_gradient([&](auto& x) { return with_emb(x).first; }, pb.emb.data(), h)) < 1e-4);
        CHECK(oracle::max_rel_err(up.grad_proto.data(), oracle::fd_gradient([&](auto& x) { return with_proto(x).first; }, pb.proto.data(), h)) < 1e-4);
        CHECK(oracle::max_rel_err(lo.grad_emb.data(), oracle::fd_gradient([&](auto& x) { return with_emb(x).second; }, pb.emb.data(), h)) < 1e-4);
        CHECK(oracle::max_rel_err(lo.grad_proto.data(), oracle::fd_gradient([&](auto& x) { return with_proto(x).second; }, pb.proto.data(), h)) < 1e-4);

        MlpObjective dec_obj = [&](const MlpParams& p, GradBuf* g) {
            VariationalDecoder d = dec;
            d.mean_net = p;
            if (g) *g = club_upper(pb, d).grad_params;
            return upper_oracle(pb, d);
        };
        CHECK(grad_check(dec_obj, dec.mean_net, h) < 1e-4);
        MlpObjective crit_obj = [&](const MlpParams& p, GradBuf* g) {
            Critic c{p};
            if (g) *g = critic_lower(pb, c).grad_params;
            return lower_oracle(pb, c);
        };
        CHECK(grad_check(crit_obj, critic.net, h) < 1e-4);
    }
}

TEST_CASE("training traces improve their objectives") {
    const PairBatch pb = gaussian_pairs(0.8, 200, 3);
    Rng rng(5);
    auto dec = VariationalDecoder::init(1, 1, 16, rng);
    AdamState dopt = AdamState::for_params(dec.mean_net, 1e-2);
    const auto ll = train_decoder(dec, pb, 200, dopt);
    REQUIRE(ll.size() == 200);
    CHECK(ll.back() > ll.front());
    auto critic = Critic::init(1, 1, 10, rng);
    AdamState copt = AdamState::for_params(critic.net, 1e-2);
    const auto tr = train_critic(critic, pb, 200, copt);
    REQUIRE(tr.size() == 200);
    CHECK(tr.back() > tr.front());
    CHECK(tr.back() < oracle::gaussian_mi(0.8) + 0.1);
}

TEST_CASE("identical embedding and prototype drives the lower bound above one nat") {
    std::mt19937_64 rng(8);
    PairBatch pb;
    pb.emb = random_mat(100, 1, rng, 2.0);
    pb.proto = pb.emb;
    pb.proto_index.assign(100, 0);
    Rng r2(2);
    auto critic = Critic::init(1, 1, 10, r2);
    AdamState opt = AdamState::for_params(critic.net, 2e-2);
    const auto tr = train_critic(critic, pb, 500, opt);
    CHECK(tr.back() > 1.0);
}

TEST_CASE("independent pairs give estimates near zero") {
    const PairBatch pb = gaussian_pairs(0.0, 1000, 9);
    Rng rng(3);
    auto dec = VariationalDecoder::init(1, 1, 16, rng);
    AdamState dopt = AdamState::for_params(dec.mean_net, 1e-2);
    train_decoder(dec, pb, 300, dopt);
    CHECK(std::abs(club_upper(pb, dec).value) < 0.05);
    auto critic = Critic::init(1, 1, 10, rng);
    AdamState copt = AdamState::for_params(critic.net, 1e-2);
    train_critic(critic, gaussian_pairs(0.0, 150, 10), 200, copt);
    CHECK(critic_lower(pb, critic, false).value < 0.05);
}

TEST_CASE("critic with two hidden layers is rejected") {
    Rng rng(1);
    Critic deep{MlpParams::init({4, 3, 3, 1}, Activation::tanh, rng)};
    std::mt19937_64 r2(1);
    CHECK_THROWS_AS(critic_lower(random_pairs(3, 2, 2, r2), deep), DimensionError);
}

TEST_CASE("estimates are invariant to a joint permutation of pairs") {
    std::mt19937_64 rng(12);
    const PairBatch pb = random_pairs(9, 2, 2, rng);
    const auto dec = VariationalDecoder::init(2, 2, 5, rng);
    const auto critic = Critic::init(2, 2, 5, rng);
    std::vector<std::size_t> perm{4, 2, 8, 0, 1, 7, 3, 6, 5};
    PairBatch q;
    q.emb = pb.emb.gather_rows(perm);
    q.proto = pb.proto.gather_rows(perm);
    q.proto_index = pb.proto_index;
    CHECK(club_upper(q, dec).value == doctest::Approx(club_upper(pb, dec).value).epsilon(1e-12));
    CHECK(critic_lower(q, critic).value == doctest::Approx(critic_lower(pb, critic).value).epsilon(1e-12));
}

TEST_CASE("pairing picks the nearest prototype and rejects empty sets") {
    PrototypeSet ps{Mat::from_rows({{0, 0}, {5, 5}}), {0, 1}};
    const PairBatch pb = pair_nearest(Mat::from_rows({{4, 4}, {1, 0}, {2.5, 2.5}}), ps);
    CHECK(pb.proto_index == std::vector<std::size_t>{1, 0, 0});
    CHECK(pb.proto(0, 0) == 5.0);
    CHECK(pair_nearest(Mat(0, 2), ps).size() == 0);
    CHECK_THROWS_AS(pair_nearest(Mat(1, 2), PrototypeSet{}), ContractError);
}

TEST_CASE("regularizer combines the splits with the right signs") {
    std::mt19937_64 rng(21);
    const Mat u = random_mat(10, 3, rng);
    PrototypeSet ps{random_mat(3, 3, rng), {0, 1, 2}};
    const auto dec = VariationalDecoder::init(3, 3, 6, rng);
    const auto critic = Critic::init(3, 3, 6, rng);

    OodSplit split;
    split.id_indices = {0, 2, 3, 5, 6, 9};
    split.ood_indices = {1, 4, 7, 8};
    const double lambda = 0.7;
    const MiRegularizer r = mi_regularizer(u, ps, split, dec, critic, lambda);
    const double up = club_upper(pair_nearest(u.gather_rows(split.ood_indices), ps), dec).value;
    const double lo = critic_lower(pair_nearest(u.gather_rows(split.id_indices), ps), critic).value;
    CHECK(r.upper_ood == doctest::Approx(up));
    CHECK(r.lower_id == doctest::Approx(lo));
    CHECK(r.value == doctest::Approx(lambda * (up - lo)));

    // gradient wrt unlabeled rows with the pairing held fixed
    auto f = [&](const std::vector<double>& flat) {
        return mi_regularizer(Mat(10, 3, flat), ps, split, dec, critic, lambda).value;
    };
    CHECK(oracle::max_rel_err(r.grad_unlabeled.data(), oracle::fd_gradient(f, u.data(), 1e-6)) < 1e-4);
    auto g = [&](const std::vector<double>& flat) {
        PrototypeSet q{Mat(3, 3, flat), ps.class_ids};
        return mi_regularizer(u, q, split, dec, critic, lambda).value;
    };
    CHECK(oracle::max_rel_err(r.grad_protos.data(), oracle::fd_gradient(g, ps.protos.data(), 1e-6)) < 1e-4);

    const MiRegularizer zero = mi_regularizer(u, ps, split, dec, critic, 0.0);
    CHECK(zero.value == 0.0);
    for (double v : zero.grad_unlabeled.data()) CHECK(v == 0.0);

    OodSplit id_only;
    id_only.id_indices = split.id_indices;
    const MiRegularizer r2 = mi_regularizer(u, ps, id_only, dec, critic, lambda);
    CHECK(r2.upper_ood == 0.0);
    CHECK(r2.value == doctest::Approx(-lambda * lo));
}
