#include <gtest/gtest.h>

#include <cmath>

#include "facelet/core/adam.hpp"
#include "facelet/core/ops.hpp"
#include "facelet/core/random.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/primitive_cases.hpp"

using namespace facelet;
using facelet::check::GraphEval;

namespace {

Var cst(Tensor t) { return Var::constant(std::move(t)); }

Tensor ones(Shape s) { return Tensor(std::move(s), 1.0f); }

}  // namespace

TEST(Conv2d, AllOnesValidIsNine) {
    auto y = conv2d(cst(ones({1, 3, 3})), cst(ones({1, 1, 3, 3})), cst(Tensor::zeros({1})), 0, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
    EXPECT_FLOAT_EQ(y.value()[0], 9.0f);
}

TEST(Conv2d, ZeroPaddingCornersAndCenter) {
    auto y = conv2d(cst(ones({1, 3, 3})), cst(ones({1, 1, 3, 3})), cst(Tensor::zeros({1})), 1, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 3, 3}));
    EXPECT_FLOAT_EQ(y.value().at(0, 1, 1), 9.0f);
    EXPECT_FLOAT_EQ(y.value().at(0, 0, 0), 4.0f);
    EXPECT_FLOAT_EQ(y.value().at(0, 2, 2), 4.0f);
    EXPECT_FLOAT_EQ(y.value().at(0, 0, 1), 6.0f);
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
    Rng rng(7);
    auto x = uniform_tensor<float>({2, 5, 5}, rng, -1, 1);
    auto w = uniform_tensor<float>({3, 2, 3, 3}, rng, -1, 1);
    auto b = uniform_tensor<float>({3}, rng, -1, 1);
    auto y = conv2d(cst(x), cst(w), cst(b), 1, 1);
    EXPECT_LT(max_abs_diff(y.value(), check::naive_conv2d(x, w, b, 1, 1)), 1e-5);
}

TEST(Conv2d, OracleAcrossShapesStridesAndBatch) {
    Rng rng(11);
    struct Case {
        std::size_t c, h, w, co, k, pad, stride;
    };
    for (auto cs : {Case{1, 7, 7, 2, 3, 0, 2}, Case{4, 8, 6, 5, 1, 0, 1}, Case{3, 9, 9, 4, 5, 2, 1},
                    Case{16, 4, 4, 8, 3, 1, 1}}) {
        auto w = uniform_tensor<float>({cs.co, cs.c, cs.k, cs.k}, rng, -1, 1);
        auto b = uniform_tensor<float>({cs.co}, rng, -1, 1);
        auto xb = uniform_tensor<float>({3, cs.c, cs.h, cs.w}, rng, -1, 1);
        auto yb = conv2d(cst(xb), cst(w), cst(b), cs.pad, cs.stride).value();
        const std::size_t per_in = cs.c * cs.h * cs.w;
        for (std::size_t n = 0; n < 3; ++n) {
            Tensor xn({cs.c, cs.h, cs.w}, std::vector<float>(xb.data() + n * per_in, xb.data() + (n + 1) * per_in));
            auto ref = check::naive_conv2d(xn, w, b, static_cast<int>(cs.pad), static_cast<int>(cs.stride));
            const std::size_t per_out = ref.numel();
            Tensor yn(ref.shape(), std::vector<float>(yb.data() + n * per_out, yb.data() + (n + 1) * per_out));
            EXPECT_LT(max_abs_diff(yn, ref), 1e-5);
        }
    }
}

TEST(Conv2d, RejectsChannelMismatch) {
    EXPECT_THROW(conv2d(cst(ones({2, 4, 4})), cst(ones({1, 3, 3, 3})), cst(Tensor::zeros({1}))), ShapeError);
    EXPECT_THROW(conv2d(cst(ones({1, 2, 2})), cst(ones({1, 1, 5, 5})), cst(Tensor::zeros({1})), 0, 1), ShapeError);
}

TEST(Relu, Definition) {
    auto y = relu(cst(Tensor({3}, {-1.f, 0.f, 2.f})));
    EXPECT_EQ(y.value().storage(), (std::vector<float>{0.f, 0.f, 2.f}));
    EXPECT_EQ(relu(cst(Tensor({2, 2}, -3.0f))).value(), Tensor::zeros({2, 2}));
    Rng rng(1);
    auto pos = uniform_tensor<float>({4, 4}, rng, 0.01, 5);
    EXPECT_EQ(relu(cst(pos)).value(), pos);
}

TEST(Resample, DownUpExamples) {
    auto d = downsample2x(cst(Tensor({1, 2, 2}, {1.f, 3.f, 5.f, 7.f})));
    ASSERT_EQ(d.shape(), (Shape{1, 1, 1}));
    EXPECT_FLOAT_EQ(d.value()[0], 4.0f);
    auto u = upsample2x(cst(Tensor({1, 1, 1}, {2.f})));
    EXPECT_EQ(u.value(), Tensor({1, 2, 2}, 2.0f));
}

TEST(Resample, UpThenDownIsExactInverse) {
    Rng rng(3);
    auto x = uniform_tensor<float>({3, 8, 8}, rng, -4, 4);
    EXPECT_EQ(downsample2x(upsample2x(cst(x))).value(), x);
}

TEST(Resample, OddExtentRejected) { EXPECT_THROW(downsample2x(cst(ones({1, 3, 4}))), ShapeError); }

TEST(Concat, ChannelsAndProjection) {
    auto y = concat_channels(cst(Tensor::zeros({1, 2, 2})), cst(ones({1, 2, 2})));
    ASSERT_EQ(y.shape(), (Shape{2, 2, 2}));
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(y.value()[i], 0.0f);
        EXPECT_EQ(y.value()[4 + i], 1.0f);
    }
    Rng rng(5);
    auto a = uniform_tensor<float>({3, 4, 4}, rng, -1, 1);
    auto b = uniform_tensor<float>({5, 4, 4}, rng, -1, 1);
    auto ab = concat_channels(cst(a), cst(b));
    EXPECT_EQ(ab.shape(), (Shape{8, 4, 4}));
    EXPECT_EQ(slice_channels(ab, 0, 3).value(), a);
    EXPECT_EQ(slice_channels(ab, 3, 8).value(), b);
    EXPECT_THROW(concat_channels(cst(a), cst(ones({1, 4, 5}))), ShapeError);
}

TEST(Mse, SumConvention) {
    EXPECT_EQ(mse(cst(ones({2, 3})), cst(ones({2, 3}))).value().item(), 0.0f);
    EXPECT_FLOAT_EQ(mse(cst(Tensor({2}, {1.f, 2.f})), cst(Tensor::zeros({2}))).value().item(), 5.0f);
    Rng rng(9);
    auto a = uniform_tensor<float>({3, 5, 5}, rng, -2, 2);
    auto b = uniform_tensor<float>({3, 5, 5}, rng, -2, 2);
    double ref = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) ref += (a[i] - b[i]) * double(a[i] - b[i]);
    EXPECT_NEAR(mse(cst(a), cst(b)).value().item(), ref, 1e-5 * ref);
    EXPECT_THROW(mse(cst(a), cst(ones({3, 5, 4}))), ShapeError);
}

TEST(Backward, ScalarSquare) {
    Parameter p(Tensor::scalar(3.0f));
    backward(mse(Var::param(p), cst(Tensor::zeros({1}))));
    EXPECT_FLOAT_EQ(p.grad[0], 6.0f);
}

TEST(Backward, UnusedParameterGetsZeroGrad) {
    Parameter used(Tensor::scalar(1.0f)), unused(Tensor({2, 2}, 5.0f));
    auto loss = mse(Var::param(used), cst(Tensor::zeros({1})));
    auto dangling = Var::param(unused);
    backward(loss);
    EXPECT_EQ(unused.grad, Tensor::zeros({2, 2}));
}

TEST(Backward, RepeatedCallsAccumulate) {
    Parameter p(Tensor::scalar(3.0f));
    auto loss = mse(scale(Var::param(p), 2.0f), cst(Tensor::zeros({1})));
    backward(loss);
    backward(loss);
    EXPECT_FLOAT_EQ(p.grad[0], 48.0f);
}

TEST(Backward, NonScalarRejected) {
    Parameter p(Tensor({2}, 1.0f));
    EXPECT_THROW(backward(relu(Var::param(p))), ShapeError);
}

TEST(Backward, FrozenParameterUntouched) {
    Parameter p(Tensor::scalar(2.0f), false);
    backward(mse(Var::param(p), Var::leaf(Tensor::scalar(0.0f))));
    EXPECT_EQ(p.grad[0], 0.0f);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    Parameter p(Tensor::scalar(2.0f));
    NoGradGuard ng;
    auto loss = mse(Var::param(p), cst(Tensor::zeros({1})));
    EXPECT_FALSE(loss.requires_grad());
}

namespace {

// Composite graph over every differentiable primitive, on [C,8,8] inputs.
template <class T>
GraphEval<T> composite(const std::vector<BasicVar<T>>& v) {
    // v: x, w1, b1, w2, b2, target
    auto h = conv2d(v[0], v[1], v[2], 1, 1);
    auto r = relu(h);
    auto up = upsample2x(downsample2x(r));
    auto cat = concat_channels(up, v[0]);
    auto out = conv2d(cat, v[3], v[4], 1, 1);
    auto cl = clamp(out, T(-0.8), T(0.8));
    auto loss = add(scale(mse(cl, v[5]), T(1.0 / 16)), scale(mse(slice_channels(cat, 0, 1), slice_channels(sub(v[0], scale(v[0], T(0.5))), 0, 1)), T(0.1)));
    return {loss, {h.value(), [&] {
                       auto lo = out.value();
                       auto hi = out.value();
                       for (auto& e : lo.storage()) e += T(0.8);
                       for (auto& e : hi.storage()) e -= T(0.8);
                       auto both = lo;
                       both.storage().insert(both.storage().end(), hi.storage().begin(), hi.storage().end());
                       return BasicTensor<T>(Shape{both.numel()}, both.storage());
                   }()}};
}

template <class T>
std::vector<BasicTensor<T>> composite_inputs(std::uint64_t seed, std::size_t c) {
    Rng rng(seed);
    return {uniform_tensor<T>({c, 8, 8}, rng, -1, 1),      uniform_tensor<T>({c, c, 3, 3}, rng, -0.3, 0.3),
            uniform_tensor<T>({c}, rng, -0.1, 0.1),        uniform_tensor<T>({2, 2 * c, 3, 3}, rng, -0.2, 0.2),
            uniform_tensor<T>({2}, rng, -0.1, 0.1),        uniform_tensor<T>({2, 8, 8}, rng, -0.5, 0.5)};
}

}  // namespace

TEST(GradCheck, CompositeGraphFloat32) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed)
        for (std::size_t c : {1u, 2u, 4u}) {
            auto res = check::grad_check<float>(composite_inputs<float>(seed, c), composite<float>, 1e-3, 1e-2);
            EXPECT_LT(res.max_abs_err, 1e-3) << "seed " << seed << " c " << c;
            EXPECT_LT(res.max_rel_err, 1e-2) << "seed " << seed << " c " << c;
            EXPECT_LT(res.skipped_kinks, res.checked / 10 + 1);
        }
}

TEST(GradCheck, CompositeGraphFloat64) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed)
        for (std::size_t c : {1u, 2u, 4u}) {
            auto res =
                check::grad_check<double>(composite_inputs<double>(seed, c), composite<double>, 1e-3, 1e-2);
            EXPECT_LT(res.max_rel_err, 1e-6) << "seed " << seed << " c " << c;
        }
}

TEST(GradCheck, LinearAndLogisticLoss) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        std::vector<BasicTensor<double>> in{uniform_tensor<double>({3, 6}, rng, -1, 1),
                                            uniform_tensor<double>({2, 6}, rng, -1, 1),
                                            uniform_tensor<double>({2}, rng, -1, 1)};
        BasicTensor<double> tgt({3, 2}, {1, 0, 0, 1, 1, 1});
        auto res = check::grad_check<double>(
            in,
            [&](const std::vector<BasicVar<double>>& v) {
                return GraphEval<double>{bce_with_logits(linear(v[0], v[1], v[2]), tgt), {}};
            },
            1e-4, 1e-2);
        EXPECT_LT(res.max_rel_err, 1e-6);
    }
}

TEST(Adam, ZeroGradLeavesValue) {
    Parameter p(Tensor({3}, {1.f, -2.f, 3.f}));
    AdamState s;
    adam_step(p, s);
    EXPECT_EQ(p.value, Tensor({3}, {1.f, -2.f, 3.f}));
    EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepClosedForm) {
    Parameter p(Tensor::scalar(0.0f));
    p.grad[0] = 1.0f;
    AdamState s;
    s.lr = 0.1;
    adam_step(p, s);
    EXPECT_NEAR(p.value[0], -0.1, 1e-6);
}

TEST(Adam, MatchesScalarRecurrence) {
    const std::vector<double> grads{1.0, -0.5, 0.25, 2.0, -1.5, 0.1, 0.0, 0.7, -0.3, 1.2};
    auto ref = check::adam_scalar_trajectory(0.5, grads, 0.01);
    Parameter p(Tensor::scalar(0.5f));
    AdamState s;
    s.lr = 0.01;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        p.grad[0] = static_cast<float>(grads[i]);
        adam_step(p, s);
        EXPECT_NEAR(p.value[0], ref[i], 1e-6);
    }
}

TEST(Adam, ZeroLearningRateIsBitIdentical) {
    Rng rng(2);
    Parameter p(uniform_tensor<float>({4, 4}, rng, -1, 1));
    const auto before = p.value;
    AdamState s;
    s.lr = 0.0;
    for (int i = 0; i < 5; ++i) {
        p.grad = uniform_tensor<float>({4, 4}, rng, -1, 1);
        adam_step(p, s);
    }
    EXPECT_EQ(p.value, before);
}

TEST(Determinism, ConvIsBitIdenticalAcrossCalls) {
    Rng rng(4);
    auto x = uniform_tensor<float>({2, 4, 16, 16}, rng, -1, 1);
    auto w = uniform_tensor<float>({8, 4, 3, 3}, rng, -1, 1);
    auto b = uniform_tensor<float>({8}, rng, -1, 1);
    EXPECT_EQ(conv2d(cst(x), cst(w), cst(b)).value(), conv2d(cst(x), cst(w), cst(b)).value());
}

TEST(GradCheck, EveryPrimitiveFloat32) {
    const auto s = check::sweep_primitives<float>();
    EXPECT_EQ(s.failures, 0u) << (s.failed.empty() ? "" : s.failed.front()) << " worst abs " << s.worst_abs
                              << " rel " << s.worst_rel;
}

TEST(GradCheck, EveryPrimitiveFloat64) {
    const auto s = check::sweep_primitives<double>();
    EXPECT_EQ(s.failures, 0u) << (s.failed.empty() ? "" : s.failed.front()) << " worst rel " << s.worst_rel;
}
