#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "grad_cases.hpp"

using namespace milpath;

TEST(Tensor, ShapeMismatchThrows) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    Graph g;
    auto a = g.constant(Tensor({2, 3}));
    auto b = g.constant(Tensor({2, 2}));
    EXPECT_THROW(add(a, b), ShapeError);
    EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Tensor, MatmulValues) {
    Graph g;
    auto a = g.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    auto b = g.constant(Tensor::matrix(2, 1, {5, 6}));
    auto c = matmul(a, b);
    EXPECT_EQ(c.value(), Tensor::matrix(2, 1, {17, 39}));
}

TEST(Tensor, SumOfSquaresGradient) {
    Tensor x = Tensor::matrix(1, 3, {1, 2, 3});
    x.set_requires_grad(true);
    Graph g;
    auto v = g.parameter(x);
    auto loss = sum(mul(v, v));
    g.backward(loss);
    EXPECT_EQ(loss.value()[0], 14.0);
    ASSERT_TRUE(x.has_grad());
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Tensor, ReluSubgradientAtZeroIsZero) {
    Tensor x = Tensor::matrix(1, 3, {-1, 0, 2});
    x.set_requires_grad(true);
    Graph g;
    g.backward(sum(relu(g.parameter(x))));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 0, 1}));
}

TEST(Tensor, SoftmaxRowsSumToOneForLargeLogits) {
    Graph g;
    auto p = softmax_rows(g.constant(Tensor::matrix(2, 3, {1000, 1001, 1002, -1000, 0, 1000})));
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 3; ++c) s += p.value()(r, c);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Tensor, CrossEntropyMatchesHandComputation) {
    Graph g;
    auto l = cross_entropy(g.constant(Tensor::matrix(1, 2, {0.0, 0.0})), {1});
    EXPECT_NEAR(l.value()[0], std::log(2.0), 1e-15);
    EXPECT_THROW(cross_entropy(g.constant(Tensor::matrix(1, 2, {0.0, 0.0})), {2}), Error);
}

TEST(Graph, BackwardTwiceIsAnError) {
    Tensor x = Tensor::matrix(1, 1, {2});
    x.set_requires_grad(true);
    Graph g;
    auto loss = sum(g.parameter(x));
    g.backward(loss);
    EXPECT_THROW(g.backward(loss), Error);
}

TEST(Graph, NonScalarLossIsRejected) {
    Tensor x = Tensor::matrix(1, 2, {2, 3});
    x.set_requires_grad(true);
    Graph g;
    auto v = g.parameter(x);
    EXPECT_THROW(g.backward(v), ShapeError);
}

TEST(Graph, StaleVarAfterResetThrows) {
    Graph g;
    auto v = g.constant(Tensor::matrix(1, 1, {1}));
    g.reset();
    EXPECT_THROW((void)v.value(), Error);
}

TEST(Graph, MixingGraphsThrows) {
    Graph g1, g2;
    auto a = g1.constant(Tensor::matrix(1, 1, {1}));
    auto b = g2.constant(Tensor::matrix(1, 1, {1}));
    EXPECT_THROW(add(a, b), Error);
}

TEST(Graph, NonFiniteForwardValueThrows) {
    Graph g;
    EXPECT_THROW(g.constant(Tensor::matrix(1, 1, {std::numeric_limits<double>::quiet_NaN()})), NumericError);
    auto z = g.constant(Tensor::matrix(1, 1, {0.0}));
    EXPECT_THROW(reciprocal(z), NumericError);
    auto big = g.constant(Tensor::matrix(1, 1, {1e300}));
    EXPECT_THROW(mul(big, big), NumericError);
}

TEST(Graph, GradientsAccumulateAcrossGraphsUntilZeroed) {
    Tensor x = Tensor::matrix(1, 1, {3});
    x.set_requires_grad(true);
    for (int i = 0; i < 2; ++i) {
        Graph g;
        g.backward(scale(g.parameter(x), 2.0));
    }
    EXPECT_EQ(x.grad()[0], 4.0);
    x.zero_grad();
    EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Graph, ConstantsReceiveNoGradient) {
    Tensor w = Tensor::matrix(1, 1, {3});
    w.set_requires_grad(true);
    Graph g;
    auto c = g.constant(Tensor::matrix(1, 1, {5}));
    auto loss = mul(g.parameter(w), c);
    g.backward(loss);
    EXPECT_EQ(w.grad()[0], 5.0);
    EXPECT_TRUE(g.grad(c).empty() || g.grad(c)[0] == 0.0);
}

TEST(DepthwiseConv, MatchesDirectLoop) {
    Rng rng(3);
    const std::size_t side = 4, C = 3, k = 5;
    Tensor x = oracle::random_tensor(rng, side * side, C);
    Tensor K = oracle::random_tensor(rng, C, k * k);
    Tensor b = oracle::random_tensor(rng, 1, C);
    Graph g;
    auto y = depthwise_conv2d(g.constant(x), g.constant(K), g.constant(b), side, k);
    const int pad = static_cast<int>(k / 2);
    for (int r = 0; r < static_cast<int>(side); ++r)
        for (int c = 0; c < static_cast<int>(side); ++c)
            for (std::size_t ch = 0; ch < C; ++ch) {
                double expect = b[ch];
                for (int dy = -pad; dy <= pad; ++dy)
                    for (int dx = -pad; dx <= pad; ++dx) {
                        const int rr = r + dy, cc = c + dx;
                        if (rr < 0 || cc < 0 || rr >= static_cast<int>(side) || cc >= static_cast<int>(side)) continue;
                        expect += K(ch, static_cast<std::size_t>((dy + pad) * static_cast<int>(k) + dx + pad)) *
                                  x(static_cast<std::size_t>(rr) * side + static_cast<std::size_t>(cc), ch);
                    }
                EXPECT_NEAR(y.value()(static_cast<std::size_t>(r) * side + static_cast<std::size_t>(c), ch), expect, 1e-12);
            }
}

class OpGradient : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradient, EveryOpMatchesFiniteDifferences) {
    for (auto& c : oracle::op_cases(GetParam())) {
        auto r = oracle::check_op_case(c);
        EXPECT_LT(r.max_rel_error, 1e-5) << c.name << " worst " << r.worst;
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Values(1, 2, 3, 4, 5, 6, 7, 8));
