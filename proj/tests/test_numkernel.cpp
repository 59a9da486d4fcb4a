#include <cmath>

#include "helpers.hpp"
#include "star/gradcheck.hpp"

using namespace star;
using star::testing::expect_close;
using star::testing::randn;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    EXPECT_EQ(kernel::matmul(Tensor::matrix({{1, 0}, {0, 1}}), a), a);
}

TEST(Matmul, OrthogonalPick) {
    EXPECT_EQ(kernel::matmul(Tensor::matrix({{1, 0}}), Tensor::matrix({{0}, {5}})), Tensor::matrix({{0}}));
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 rng(1);
    const Tensor a = randn({3, 4}, rng), b = randn({4, 2}, rng);
    Tensor ref({3, 2}, 0.0);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            for (std::size_t k = 0; k < 4; ++k) ref(i, j) += a(i, k) * b(k, j);
    expect_close(kernel::matmul(a, b), ref, 1e-12);
}

TEST(Matmul, RejectsInnerMismatch) {
    EXPECT_THROW(kernel::matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Softmax, UniformOnEqualInputs) {
    const Tensor y = kernel::softmax(Tensor::vector({0, 0, 0}));
    for (double v : y.storage()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeInputsDoNotOverflow) {
    const Tensor y = kernel::softmax(Tensor::vector({1000, 0, 0}));
    EXPECT_TRUE(y.all_finite());
    EXPECT_NEAR(y[0], 1.0, 1e-15);
    EXPECT_NEAR(y[1], 0.0, 1e-15);
}

TEST(Softmax, TwoElementAnalytic) {
    const Tensor y = kernel::softmax(Tensor::vector({1, 2}));
    const double e = std::exp(1.0);
    EXPECT_NEAR(y[0], 1.0 / (1.0 + e), 1e-15);
    EXPECT_NEAR(y[1], e / (1.0 + e), 1e-15);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
    const Tensor y = kernel::layer_norm(Tensor::matrix({{3, 3, 3, 3}}), Tensor({4}, 1.0), Tensor({4}, 0.0), 1e-5);
    for (double v : y.storage()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, AlreadyNormalizedRowIsFixed) {
    const Tensor y = kernel::layer_norm(Tensor::matrix({{1, -1}}), Tensor({2}, 1.0), Tensor({2}, 0.0), 1e-14);
    EXPECT_NEAR(y[0], 1.0, 1e-12);
    EXPECT_NEAR(y[1], -1.0, 1e-12);
}

TEST(LayerNorm, RandomRowHasZeroMeanUnitVariance) {
    std::mt19937_64 rng(2);
    const Tensor y = kernel::layer_norm(randn({1, 32}, rng, 3.0), Tensor({32}, 1.0), Tensor({32}, 0.0), 1e-14);
    double mean = 0.0, var = 0.0;
    for (double v : y.storage()) mean += v / 32.0;
    for (double v : y.storage()) var += (v - mean) * (v - mean) / 32.0;
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-9);
}

TEST(TemporalResample, SingleRowIsRepeated) {
    const Tensor y = kernel::temporal_resample(Tensor::matrix({{1, 2, 3}}), 8);
    ASSERT_EQ(y.shape(), (Shape{8, 3}));
    for (std::size_t f = 0; f < 8; ++f)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y(f, c), static_cast<double>(c + 1));
}

TEST(TemporalResample, MidpointOfTwoRows) {
    EXPECT_EQ(kernel::temporal_resample(Tensor::matrix({{0}, {2}}), 3), Tensor::matrix({{0}, {1}, {2}}));
}

TEST(TemporalResample, MatchesPiecewiseLinearOracle) {
    std::mt19937_64 rng(3);
    const Tensor x = randn({3, 5}, rng);
    const Tensor y = kernel::temporal_resample(x, 8);
    for (std::size_t f = 0; f < 8; ++f) {
        // Grid point f/7 on [0, 1], source knots at 0, 0.5, 1.
        const double u = static_cast<double>(f) / 7.0;
        const std::size_t seg = u < 0.5 ? 0 : 1;
        const double local = (u - 0.5 * static_cast<double>(seg)) / 0.5;
        for (std::size_t c = 0; c < 5; ++c)
            EXPECT_NEAR(y(f, c), (1 - local) * x(seg, c) + local * x(seg + 1, c), 1e-12);
    }
}

TEST(Conv1d, CenteredDeltaIsIdentity) {
    std::mt19937_64 rng(4);
    const Tensor x = randn({6, 3}, rng);
    Tensor k({3, 3, 3}, 0.0);
    for (std::size_t c = 0; c < 3; ++c) k[(1 * 3 + c) * 3 + c] = 1.0;
    expect_close(conv1d(constant(x), constant(k)).value(), x, 0.0);
}

TEST(Conv1d, ZeroKernelGivesZero) {
    std::mt19937_64 rng(5);
    const Tensor y = conv1d(constant(randn({6, 3}, rng)), constant(Tensor({3, 3, 2}, 0.0))).value();
    for (double v : y.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Conv1d, MatchesSlidingWindow) {
    std::mt19937_64 rng(6);
    const Tensor x = randn({6, 2}, rng), k = randn({3, 2, 4}, rng);
    const Tensor y = conv1d(constant(x), constant(k)).value();
    for (long l = 0; l < 6; ++l)
        for (std::size_t co = 0; co < 4; ++co) {
            double s = 0.0;
            for (long tap = -1; tap <= 1; ++tap) {
                if (l + tap < 0 || l + tap >= 6) continue;
                for (std::size_t ci = 0; ci < 2; ++ci)
                    s += x(static_cast<std::size_t>(l + tap), ci) * k[(static_cast<std::size_t>(tap + 1) * 2 + ci) * 4 + co];
            }
            EXPECT_NEAR(y(static_cast<std::size_t>(l), co), s, 1e-12);
        }
}

TEST(Conv1d, RejectsEvenKernel) {
    EXPECT_THROW(conv1d(constant(Tensor({4, 2})), constant(Tensor({2, 2, 2}))), ConfigError);
}

TEST(Autodiff, NoGradGuardStopsRecording) {
    Var x = parameter(Tensor::vector({1, 2}));
    {
        NoGradGuard g;
        EXPECT_FALSE(sum(mul(x, x)).requires_grad());
    }
    EXPECT_TRUE(sum(mul(x, x)).requires_grad());
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
    Var x = parameter(Tensor::vector({3}));
    Var y = mul(x, x);
    backward(sum(add(y, y)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, BackwardNeedsScalar) {
    Var x = parameter(Tensor::vector({1, 2}));
    EXPECT_THROW(backward(x), DimensionError);
}

TEST(GradCheck, Quadratic) {
    Var x = parameter(Tensor::vector({1, 2}));
    const auto r = grad_check([&] { return sum(mul(x, x)); }, {{"x", x}});
    EXPECT_LT(r.max_rel_error, 1e-7);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
    Var x = parameter(Tensor::vector({1, 2}));
    const auto r = grad_check([&] { return constant(Tensor::scalar(4.0)); }, {{"x", x}});
    EXPECT_EQ(r.max_rel_error, 0.0);
    EXPECT_EQ(r.worst_numeric, 0.0);
}

TEST(GradCheck, DetectsWrongGradient) {
    Var x = parameter(Tensor::vector({1.5}));
    // Forward squares, backward pretends the derivative is x.
    auto broken = [&] {
        Tensor v = x.value();
        v[0] *= v[0];
        return record(std::move(v), {x}, [](Node& n) { n.parents[0]->grad_buffer()[0] += n.grad[0] * n.parents[0]->value[0]; });
    };
    EXPECT_GT(grad_check(broken, {{"x", x}}).max_rel_error, 0.1);
}

TEST(GradCheck, EveryKernelOpInIsolation) {
    std::mt19937_64 rng(7);
    Var a = parameter(randn({3, 4}, rng)), b = parameter(randn({4, 2}, rng));
    Var row = parameter(randn({4}, rng)), col = parameter(randn({3}, rng));
    Var k = parameter(randn({3, 4, 2}, rng, 0.5)), cw = parameter(randn({2, 4}, rng)), cb = parameter(randn({4}, rng));
    Var pos = parameter(Tensor::matrix({{0.5, 1.5, 2.0, 0.7}, {1.1, 0.3, 0.9, 2.2}, {0.4, 0.8, 1.3, 1.9}}));
    auto probe = [](const Var& y) {
        std::mt19937_64 r(8);
        return sum(mul(y, constant(randn(y.shape(), r))));
    };
    const std::vector<std::pair<const char*, std::function<Var()>>> cases{
        {"matmul", [&] { return probe(matmul(a, b)); }},
        {"transpose", [&] { return probe(transpose(a)); }},
        {"sub", [&] { return probe(sub(a, mul(a, a))); }},
        {"add_row", [&] { return probe(add_row(a, row)); }},
        {"mul_row", [&] { return probe(mul_row(a, row)); }},
        {"mul_col", [&] { return probe(mul_col(a, col)); }},
        {"softmax", [&] { return probe(softmax(a)); }},
        {"log_softmax", [&] { return probe(log_softmax(a)); }},
        {"layer_norm", [&] { return probe(layer_norm(a, row, row)); }},
        {"resample_up", [&] { return probe(temporal_resample(a, 7)); }},
        {"resample_down", [&] { return probe(temporal_resample(a, 2)); }},
        {"conv1d", [&] { return probe(conv1d(a, k)); }},
        {"causal_conv", [&] { return probe(causal_depthwise_conv(a, cw, cb)); }},
        {"row_normalize", [&] { return probe(row_normalize(a)); }},
        {"sigmoid", [&] { return probe(sigmoid(a)); }},
        {"silu", [&] { return probe(silu(a)); }},
        {"softplus", [&] { return probe(softplus(a)); }},
        {"exp", [&] { return probe(exp(a)); }},
        {"log", [&] { return probe(log(pos)); }},
        {"mean_rows", [&] { return probe(mean_rows(a)); }},
        {"select_reverse", [&] { return probe(reverse_rows(select_rows(a, {2, 0, 2}))); }},
        {"concat", [&] { return probe(concat_cols({concat_rows({a, a}), concat_rows({a, a})})); }},
        {"slice_cols", [&] { return probe(slice_cols(a, 1, 2)); }},
        {"min_axis", [&] { return add(probe(min_axis(a, 0)), probe(min_axis(a, 1))); }},
        {"weighted_sum", [&] { return probe(weighted_sum({a, mul(a, a)}, {0.3, 0.7})); }},
        {"stack_scalars", [&] { return probe(stack_scalars({element(a, 1), element(a, 5)}, {2})); }},
        {"mul_scalar", [&] { return probe(mul_scalar(a, element(row, 0))); }},
    };
    for (const auto& [name, f] : cases) {
        const auto r = grad_check(f, {{"a", a}, {"b", b}, {"row", row}, {"col", col}, {"k", k}, {"cw", cw}, {"cb", cb}, {"pos", pos}});
        EXPECT_LT(r.max_rel_error, 1e-6) << name << " worst " << r.worst_param << "[" << r.worst_index << "]";
    }
}
