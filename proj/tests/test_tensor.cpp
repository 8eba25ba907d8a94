#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "orderlab/errors.hpp"
#include "orderlab/tensor.hpp"

using namespace orderlab;

namespace {

MlpParams identity_net(std::size_t dim) {
    MlpParams p;
    p.layer_dims = {dim, dim};
    p.weights = {Mat::identity(dim)};
    p.biases = {Mat(1, dim)};
    p.activations = {Activation::identity};
    return p;
}

Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Mat m(r, c);
    for (double& v : m.data()) v = n(rng);
    return m;
}

}  // namespace

TEST_CASE("identity network passes input through") {
    const Mat x = Mat::from_rows({{1.0, 2.0}});
    auto [y, cache] = mlp_forward(identity_net(2), x);
    CHECK(y == x);
}

TEST_CASE("zero input with zero biases gives zero relu output") {
    std::mt19937_64 rng(3);
    const MlpParams p = MlpParams::init({4, 5, 3}, {Activation::relu, Activation::relu}, rng);
    const Mat y = mlp_apply(p, Mat(2, 4));
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("two-layer forward matches straight-line evaluation") {
    std::mt19937_64 rng(11);
    const MlpParams p = MlpParams::init({2, 6, 3}, Activation::tanh, rng);
    const Mat x = Mat::from_rows({{0.3, -0.7}});
    const Mat y = mlp_apply(p, x);
    const auto ref = oracle::mlp_row(p, {0.3, -0.7});
    for (std::size_t k = 0; k < 3; ++k) CHECK(y(0, k) == doctest::Approx(ref[k]).epsilon(1e-14));
}

TEST_CASE("forward is bit-identical across calls") {
    std::mt19937_64 rng(5);
    const MlpParams p = MlpParams::init({4, 8, 2}, Activation::relu, rng);
    const Mat x = random_mat(7, 4, rng);
    CHECK(mlp_apply(p, x) == mlp_apply(p, x));
    CHECK(mlp_forward(p, x).first == mlp_apply(p, x));
}

TEST_CASE("forward rejects mismatched input") {
    std::mt19937_64 rng(5);
    const MlpParams p = MlpParams::init({4, 2}, Activation::relu, rng);
    CHECK_THROWS_AS(mlp_forward(p, Mat(1, 3)), DimensionError);
}

TEST_CASE("linear layer weight gradient is x^T times upstream") {
    MlpParams p = identity_net(2);
    const Mat x = Mat::from_rows({{2.0, -3.0}});
    auto [y, cache] = mlp_forward(p, x);
    auto [g, gx] = mlp_backward(p, cache, Mat(1, 2, 1.0));
    CHECK(g.weights[0](0, 0) == 2.0);
    CHECK(g.weights[0](0, 1) == 2.0);
    CHECK(g.weights[0](1, 0) == -3.0);
    CHECK(g.biases[0](0, 1) == 1.0);
    CHECK(gx(0, 0) == 1.0);
}

TEST_CASE("relu blocks gradient at negative pre-activation") {
    MlpParams p = identity_net(1);
    p.activations = {Activation::relu};
    auto [y, cache] = mlp_forward(p, Mat::from_rows({{-1.5}}));
    auto [g, gx] = mlp_backward(p, cache, Mat(1, 1, 1.0));
    CHECK(g.weights[0](0, 0) == 0.0);
    CHECK(gx(0, 0) == 0.0);
}

TEST_CASE("backward rejects a cache from other parameters") {
    std::mt19937_64 rng(1);
    MlpParams p = MlpParams::init({3, 4, 2}, Activation::relu, rng);
    auto [y, cache] = mlp_forward(p, Mat(2, 3, 0.5));
    p.weights[0](0, 0) += 1.0;
    CHECK_THROWS_AS(mlp_backward(p, cache, Mat(2, 2, 1.0)), ContractError);
    MlpParams q = MlpParams::init({3, 5, 2}, Activation::relu, rng);
    CHECK_THROWS_AS(mlp_backward(q, cache, Mat(2, 2, 1.0)), ContractError);
}

TEST_CASE("three-layer backward agrees with finite differences over 20 seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        const MlpParams p = MlpParams::init({3, 5, 4, 2}, {Activation::tanh, Activation::relu, Activation::identity}, rng);
        const Mat x = random_mat(4, 3, rng);
        const Mat target = random_mat(4, 2, rng);
        MlpObjective loss = [&](const MlpParams& q, GradBuf* g) {
            auto [y, cache] = mlp_forward(q, x);
            Mat gy(y.rows(), y.cols());
            double v = 0.0;
            for (std::size_t k = 0; k < y.size(); ++k) {
                const double d = y.data()[k] - target.data()[k];
                v += 0.5 * d * d;
                gy.data()[k] = d;
            }
            if (g) *g = mlp_backward(q, cache, gy).first;
            return v;
        };
        CHECK(grad_check(loss, p, 1e-5) < 1e-4);

        // input gradient
        auto [y, cache] = mlp_forward(p, x);
        Mat gy(y.rows(), y.cols(), 1.0);
        const Mat gx = mlp_backward(p, cache, gy).second;
        auto f = [&](const std::vector<double>& flat) {
            const Mat y2 = mlp_apply(p, Mat(4, 3, flat));
            double s = 0.0;
            for (double v : y2.data()) s += v;
            return s;
        };
        CHECK(oracle::max_rel_err(gx.data(), oracle::fd_gradient(f, x.data(), 1e-5)) < 1e-4);
    }
}

TEST_CASE("grad_check on a quadratic and a constant") {
    std::mt19937_64 rng(2);
    const MlpParams p = MlpParams::init({3, 4, 2}, Activation::relu, rng);
    MlpObjective quad = [](const MlpParams& q, GradBuf* g) {
        double v = 0.0;
        for (double x : flatten(q)) v += 0.5 * x * x;
        if (g) {
            for (std::size_t l = 0; l < q.weights.size(); ++l) {
                g->weights[l] = q.weights[l];
                g->biases[l] = q.biases[l];
            }
        }
        return v;
    };
    CHECK(grad_check(quad, p, 1e-5) < 1e-8);
    MlpObjective constant = [](const MlpParams&, GradBuf*) { return 4.0; };
    CHECK(grad_check(constant, p, 1e-5) == 0.0);
    MlpObjective bad = [](const MlpParams&, GradBuf*) { return std::nan(""); };
    CHECK_THROWS_AS(grad_check(bad, p, 1e-5), NumericError);
    CHECK_THROWS_AS(grad_check(quad, p, 1e-2), ContractError);
}

TEST_CASE("adam first step moves each weight by lr against the gradient sign") {
    std::mt19937_64 rng(9);
    MlpParams p = MlpParams::init({2, 3}, Activation::identity, rng);
    const MlpParams before = p;
    GradBuf g = GradBuf::zeros_like(p);
    g.weights[0] = Mat::from_rows({{0.5, -2.0, 1e-3}, {-0.1, 3.0, 7.0}});
    g.biases[0] = Mat::from_rows({{1.0, -1.0, 0.25}});
    AdamState st = AdamState::for_params(p, 0.01);
    adam_step(p, g, st);
    CHECK(st.step_count == 1);
    for (std::size_t k = 0; k < 6; ++k) {
        const double gk = g.weights[0].data()[k];
        const double moved = p.weights[0].data()[k] - before.weights[0].data()[k];
        CHECK(moved == doctest::Approx(-0.01 * (gk > 0 ? 1 : -1)).epsilon(1e-4));
    }
}

TEST_CASE("adam with zero gradient leaves parameters and decays moments") {
    std::mt19937_64 rng(9);
    MlpParams p = MlpParams::init({2, 2}, Activation::identity, rng);
    AdamState st = AdamState::for_params(p, 0.1);
    GradBuf g = GradBuf::zeros_like(p);
    g.weights[0].fill(1.0);
    adam_step(p, g, st);
    const MlpParams after_first = p;
    const double m_before = st.m.weights[0](0, 0);
    g.zero();
    g.weights[0].fill(0.0);
    // A zero gradient still moves by the decayed first moment; with fresh
    // moments it is an exact no-op.
    AdamState fresh = AdamState::for_params(p, 0.1);
    adam_step(p, g, fresh);
    CHECK(p == after_first);
    adam_step(p, g, st);
    CHECK(st.m.weights[0](0, 0) < m_before);
}

TEST_CASE("adam with lr 0 is the identity") {
    std::mt19937_64 rng(4);
    MlpParams p = MlpParams::init({3, 3}, Activation::identity, rng);
    const MlpParams before = p;
    GradBuf g = GradBuf::zeros_like(p);
    g.weights[0].fill(2.0);
    AdamState st = AdamState::for_params(p, 0.0);
    for (int i = 0; i < 5; ++i) adam_step(p, g, st);
    CHECK(p == before);
}

TEST_CASE("adam rejects non-finite gradients") {
    std::mt19937_64 rng(4);
    MlpParams p = MlpParams::init({1, 1}, Activation::identity, rng);
    GradBuf g = GradBuf::zeros_like(p);
    g.weights[0](0, 0) = std::numeric_limits<double>::infinity();
    AdamState st = AdamState::for_params(p, 0.1);
    CHECK_THROWS_AS(adam_step(p, g, st), NumericError);
}

TEST_CASE("adam minimizes (w-3)^2 in 100 steps at lr 0.1") {
    MlpParams p;
    p.layer_dims = {1, 1};
    p.weights = {Mat(1, 1, 0.0)};
    p.biases = {Mat(1, 1, 0.0)};
    p.activations = {Activation::identity};
    AdamState st = AdamState::for_params(p, 0.1);
    for (int i = 0; i < 100; ++i) {
        GradBuf g = GradBuf::zeros_like(p);
        g.weights[0](0, 0) = 2.0 * (p.weights[0](0, 0) - 3.0);
        adam_step(p, g, st);
    }
    CHECK(std::abs(p.weights[0](0, 0) - 3.0) < 0.05);
}
