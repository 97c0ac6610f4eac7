#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "vistok/gradcheck.hpp"
#include "vistok/io.hpp"
#include "vistok/optim.hpp"
#include "vistok/suites.hpp"

using namespace vistok;
using V = Var<double>;

namespace {

Tensor<double> rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor<double> t(std::move(s));
    for (auto& v : t.vec()) v = d(rng);
    return t;
}

// Weighted sum with fixed random weights turns any tensor into a scalar whose
// gradient exercises every output coordinate differently.
V probe(const V& x, std::uint64_t seed = 99) {
    Rng rng(seed);
    return ops::sum(ops::mul(x, V::constant(rand_t(x.shape(), rng))));
}

constexpr double kTol = 1e-4;

}  // namespace

TEST(Conv2d, CenterTapIdentity) {
    Tensor<float> w({1, 1, 3, 3}, 0.0f);
    w[4] = 1.0f;
    auto out = ops::conv2d(Var<float>::constant(Tensor<float>::ones({1, 1, 4, 4})), Var<float>::constant(w),
                           std::optional<Var<float>>(Var<float>::constant(Tensor<float>::zeros({1}))), 2, 1);
    ASSERT_EQ(out.shape(), (Shape{1, 1, 2, 2}));
    for (float v : out.value().data()) EXPECT_EQ(v, 1.0f);
}

TEST(Conv2d, HalvesSpatialDims) {
    Rng rng(1);
    auto out = ops::conv2d(Var<float>::constant(Tensor<float>::zeros({1, 2, 64, 64})),
                           Var<float>::constant(uniform_tensor<float>({4, 2, 3, 3}, 1.0f, rng)),
                           std::nullopt, 2, 1);
    EXPECT_EQ(out.shape(), (Shape{1, 4, 32, 32}));
}

TEST(Conv2d, ChannelMismatchThrows) {
    EXPECT_THROW(ops::conv2d(V::constant(Tensor<double>::zeros({1, 3, 8, 8})),
                             V::constant(Tensor<double>::zeros({2, 2, 3, 3})), std::nullopt, 1, 1),
                 ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
    Rng rng(2);
    const std::vector<Tensor<double>> in{rand_t({1, 2, 5, 5}, rng), rand_t({3, 2, 3, 3}, rng), rand_t({3}, rng)};
    for (std::size_t stride : {1u, 2u}) {
        const double err = grad_check(
            [stride](const std::vector<V>& v) {
                return probe(ops::conv2d(v[0], v[1], std::optional<V>(v[2]), stride, 1));
            },
            in);
        EXPECT_LT(err, kTol) << "stride " << stride;
    }
}

TEST(ConvTranspose2d, DoublesSpatialDims) {
    Rng rng(3);
    auto out = ops::conv_transpose2d(Var<float>::constant(Tensor<float>::ones({1, 1, 2, 2})),
                                     Var<float>::constant(uniform_tensor<float>({1, 1, 4, 4}, 1.0f, rng)),
                                     std::nullopt, 2, 1);
    EXPECT_EQ(out.shape(), (Shape{1, 1, 4, 4}));
}

TEST(ConvTranspose2d, ZeroWeightGivesBias) {
    auto out = ops::conv_transpose2d(V::constant(Tensor<double>::ones({1, 2, 3, 3})),
                                     V::constant(Tensor<double>::zeros({2, 2, 4, 4})),
                                     std::optional<V>(V::constant(Tensor<double>({2}, {0.5, -1.5}))), 2, 1);
    ASSERT_EQ(out.shape(), (Shape{1, 2, 6, 6}));
    for (std::size_t i = 0; i < 36; ++i) {
        EXPECT_EQ(out.value()[i], 0.5);
        EXPECT_EQ(out.value()[36 + i], -1.5);
    }
}

TEST(ConvTranspose2d, GradientMatchesFiniteDifferences) {
    Rng rng(4);
    const std::vector<Tensor<double>> in{rand_t({2, 3, 3, 2}, rng), rand_t({3, 2, 4, 4}, rng), rand_t({2}, rng)};
    const double err = grad_check(
        [](const std::vector<V>& v) {
            return probe(ops::conv_transpose2d(v[0], v[1], std::optional<V>(v[2]), 2, 1));
        },
        in);
    EXPECT_LT(err, kTol);
}

TEST(Softmax, UniformLogits) {
    auto p = ops::softmax(V::constant(Tensor<double>({4}, {0.3, 0.3, 0.3, 0.3})), 0);
    for (double v : p.value().data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, AxisOutOfRange) {
    EXPECT_THROW(ops::softmax(V::constant(Tensor<double>::zeros({2, 3})), 2), IndexError);
    EXPECT_THROW(ops::softmax(V::constant(Tensor<double>::zeros({2, 3})), -3), IndexError);
}

TEST(Softmax, RowsAreDistributions) {
    Rng rng(5);
    for (int axis : {0, 1, 2}) {
        auto x = V::constant(rand_t({3, 4, 5}, rng, -20, 20));
        auto p = ops::softmax(x, axis);
        std::size_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= x.dim(i);
        for (int i = axis + 1; i < 3; ++i) inner *= x.dim(i);
        const std::size_t len = x.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double s = 0;
                for (std::size_t j = 0; j < len; ++j) {
                    const double v = p.value()[o * len * inner + j * inner + in];
                    EXPECT_GE(v, 0.0);
                    s += v;
                }
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
    }
}

TEST(Attention, CausalFirstPositionAttendsToItself) {
    Rng rng(6);
    const auto q = V::constant(rand_t({1, 4, 8}, rng));
    const auto k = V::constant(rand_t({1, 4, 8}, rng));
    const auto v = V::constant(rand_t({1, 4, 8}, rng));
    const auto out = ops::attention(q, k, v, 2, true);
    // Weight 1.0 on position 0 means the output row equals the value row.
    for (std::size_t e = 0; e < 8; ++e) EXPECT_DOUBLE_EQ(out.value()[e], v.value()[e]);
}

TEST(Attention, CausalFutureDoesNotLeak) {
    Rng rng(7);
    auto q = rand_t({1, 5, 4}, rng), k = rand_t({1, 5, 4}, rng), v = rand_t({1, 5, 4}, rng);
    const auto base = ops::attention(V::constant(q), V::constant(k), V::constant(v), 1, true);
    for (std::size_t e = 0; e < 4; ++e) {
        k[4 * 4 + e] += 3.0;
        v[4 * 4 + e] -= 2.0;
    }
    const auto pert = ops::attention(V::constant(q), V::constant(k), V::constant(v), 1, true);
    for (std::size_t i = 0; i < 4 * 4; ++i) EXPECT_EQ(base.value()[i], pert.value()[i]);
}

TEST(Attention, CausalNeedsSquareScores) {
    EXPECT_THROW(ops::attention(V::constant(Tensor<double>::zeros({1, 2, 4})),
                                V::constant(Tensor<double>::zeros({1, 3, 4})),
                                V::constant(Tensor<double>::zeros({1, 3, 4})), 1, true),
                 ShapeError);
}

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, EveryPrimitiveOnThreeShapes) {
    const int variant = GetParam();
    for (const auto& c : suites::primitive_cases(variant)) {
        const auto report = grad_check_report(c.fn, c.inputs);
        EXPECT_LT(report.max_rel_error, kTol) << c.name << " shape variant " << variant << " input "
                                              << report.worst_input << "[" << report.worst_index
                                              << "] analytic " << report.analytic << " numeric "
                                              << report.numeric;
    }
}

INSTANTIATE_TEST_SUITE_P(ThreeShapes, PrimitiveGradient, ::testing::Values(0, 1, 2));

TEST(MaskedCrossEntropy, AllIgnoredIsZero) {
    const std::vector<int> t{1, 2};
    const Mask ig{1, 1};
    EXPECT_EQ(ops::masked_cross_entropy(V::constant(Tensor<double>::ones({2, 4})), t, ig).item(), 0.0);
}

TEST(MaskedCrossEntropy, UniformLogitsGiveLogK) {
    std::vector<int> t(5, 7);
    const Mask ig(5, 0);
    EXPECT_NEAR(ops::masked_cross_entropy(V::constant(Tensor<double>::zeros({5, 128})), t, ig).item(),
                std::log(128.0), 1e-12);
    EXPECT_NEAR(std::log(128.0), 4.852, 1e-3);
}

TEST(MaskedCrossEntropy, IgnoredRowsGetZeroGradient) {
    Rng rng(8);
    auto logits = V::leaf(rand_t({3, 5}, rng));
    const std::vector<int> t{1, 99, 4};  // out-of-range target is fine when ignored
    const Mask ig{0, 1, 0};
    ops::masked_cross_entropy(logits, t, ig).backward();
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(logits.grad()[5 + j], 0.0);
}

TEST(MaskedCrossEntropy, TargetOutOfVocabulary) {
    const std::vector<int> t{5};
    const Mask ig{0};
    EXPECT_THROW(ops::masked_cross_entropy(V::constant(Tensor<double>::zeros({1, 5})), t, ig), IndexError);
}

TEST(MaskedMse, Examples) {
    Rng rng(9);
    const auto target = rand_t({4, 4}, rng);
    const Mask all(16, 1);
    EXPECT_EQ(ops::masked_mse(V::constant(target), V::constant(target), all).item(), 0.0);
    auto plus = target;
    for (auto& v : plus.vec()) v += 1.0;
    EXPECT_NEAR(ops::masked_mse(V::constant(plus), V::constant(target), all).item(), 1.0, 1e-12);
    EXPECT_EQ(ops::masked_mse(V::constant(plus), V::constant(target), Mask(16, 0)).item(), 0.0);
    EXPECT_THROW(ops::masked_mse(V::constant(plus), V::constant(Tensor<double>::zeros({16})), all), ShapeError);
}

TEST(MaskedLosses, InvalidPositionsAreInert) {
    Rng rng(10);
    const auto pred = rand_t({8, 8}, rng), target = rand_t({8, 8}, rng);
    Mask valid(64, 1);
    for (std::size_t i = 0; i < 64; i += 2) valid[i] = 0;
    auto garbage_pred = pred, garbage_target = target;
    for (std::size_t i = 0; i < 64; i += 2) {
        garbage_pred[i] = 1e6;
        garbage_target[i] = -3e5;
    }
    auto a = V::leaf(pred), b = V::leaf(garbage_pred);
    const auto la = ops::masked_mse(a, V::constant(target), valid);
    const auto lb = ops::masked_mse(b, V::constant(garbage_target), valid);
    EXPECT_EQ(la.item(), lb.item());
    la.backward();
    lb.backward();
    EXPECT_EQ(a.grad(), b.grad());

    auto c = V::leaf(pred), d = V::leaf(garbage_pred);
    const auto lc = ops::masked_bce_with_logits(c, V::constant(target), valid);
    const auto ld = ops::masked_bce_with_logits(d, V::constant(garbage_target), valid);
    EXPECT_EQ(lc.item(), ld.item());
    lc.backward();
    ld.backward();
    EXPECT_EQ(c.grad(), d.grad());
}

TEST(Adam, ZeroGradientLeavesParameter) {
    TrainConfig cfg;
    auto p = make_parameters<double>({{"w", V::leaf(Tensor<double>({2}, {0.3, -0.7}))}});
    p[0].var.mutable_grad().fill(0.0);
    adam_step<double>(p, 0.1, cfg);
    EXPECT_EQ(p[0].var.value()[0], 0.3);
    EXPECT_EQ(p[0].var.value()[1], -0.7);
    EXPECT_EQ(p[0].step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    // Hand-computed scalar oracle: m=0.1, v=0.001; bias-corrected m/sqrt(v) = 1.
    TrainConfig cfg;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    const double m = 0.1 / (1 - 0.9), v = 0.001 / (1 - 0.999);
    const double expected = 1.0 - 0.1 * m / (std::sqrt(v) + cfg.eps);
    auto p = make_parameters<double>({{"w", V::leaf(Tensor<double>::scalar(1.0))}});
    p[0].var.mutable_grad()[0] = 1.0;
    adam_step<double>(p, 0.1, cfg);
    EXPECT_DOUBLE_EQ(p[0].var.value()[0], expected);
    EXPECT_NEAR(p[0].var.value()[0], 0.9, 1e-7);
}

TEST(Adam, IdenticalParametersStayIdentical) {
    TrainConfig cfg;
    cfg.weight_decay = 0.05;
    Rng rng(11);
    const auto init = rand_t({6}, rng);
    auto p = make_parameters<double>({{"a", V::leaf(init)}, {"b", V::leaf(init)}});
    for (int s = 0; s < 25; ++s) {
        const auto g = rand_t({6}, rng);
        p[0].var.mutable_grad() = g;
        p[1].var.mutable_grad() = g;
        adam_step<double>(p, 1e-2, cfg);
    }
    EXPECT_EQ(p[0].var.value(), p[1].var.value());
}

TEST(Adam, MissingGradientIsContractViolation) {
    TrainConfig cfg;
    auto p = make_parameters<double>({{"w", V::leaf(Tensor<double>::scalar(1.0))}});
    EXPECT_THROW(adam_step<double>(p, 0.1, cfg), ContractError);
}

TEST(Schedule, Shapes) {
    TrainConfig cfg;
    cfg.lr = 1.0;
    cfg.epochs = 10;
    cfg.schedule.kind = ScheduleKind::exponential;
    cfg.schedule.decay = 0.98;
    EXPECT_NEAR(lr_at_epoch(cfg, 2), 0.98 * 0.98, 1e-15);
    cfg.schedule.kind = ScheduleKind::cosine;
    EXPECT_NEAR(lr_at_epoch(cfg, 0), 1.0, 1e-15);
    EXPECT_NEAR(lr_at_epoch(cfg, 5), 0.5, 1e-15);
    cfg.schedule.kind = ScheduleKind::step;
    cfg.schedule.milestones = {3, 6};
    cfg.schedule.gamma = 0.1;
    EXPECT_NEAR(lr_at_epoch(cfg, 4), 0.1, 1e-15);
    EXPECT_NEAR(lr_at_epoch(cfg, 7), 0.01, 1e-15);
    cfg.beta1 = 1.0;
    EXPECT_THROW(cfg.validate(), ContractError);
}

TEST(GradCheck, SumHasUnitGradient) {
    Rng rng(12);
    EXPECT_LT(grad_check([](const std::vector<V>& v) { return ops::sum(v[0]); }, {rand_t({3, 4}, rng)}), 1e-10);
}

TEST(GradCheck, MaskedMseSelfOracle) {
    Rng rng(13);
    Mask valid(12, 1);
    valid[3] = valid[7] = 0;
    const double err = grad_check(
        [&](const std::vector<V>& v) { return ops::masked_mse(v[0], v[1], valid); },
        {rand_t({3, 4}, rng), rand_t({3, 4}, rng)});
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, NonScalarOutputRejected) {
    EXPECT_THROW(grad_check([](const std::vector<V>& v) { return v[0]; }, {Tensor<double>::zeros({2})}),
                 ContractError);
}

TEST(Determinism, ForwardBackwardBitIdentical) {
    auto run = [] {
        Rng rng(14);
        auto x = Var<float>::leaf(uniform_tensor<float>({2, 3, 8, 8}, 1.0f, rng));
        nn::Conv2d<float> conv(3, 8, 3, 2, 1, rng);
        nn::GroupNorm<float> gn(4, 8);
        nn::ConvTranspose2d<float> up(8, 2, 4, 2, 1, rng);
        auto y = up(ops::relu(gn(conv(x))));
        auto loss = ops::mean(ops::mul(y, y));
        loss.backward();
        return std::make_pair(loss.item(), x.grad());
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(TensorIo, RoundTripPreservesBits) {
    Rng rng(15);
    for (int trial = 0; trial < 20; ++trial) {
        Shape s;
        const int nd = static_cast<int>(rng() % 4);
        for (int i = 0; i < nd; ++i) s.push_back(1 + rng() % 5);
        const auto t = uniform_tensor<float>(s, 10.0f, rng);
        std::stringstream ss;
        io::write_tensor(ss, io::to_raw(t));
        const auto back = io::from_raw<float>(io::read_tensor(ss));
        EXPECT_EQ(back, t);
    }
}

TEST(TensorIo, HeaderLayout) {
    std::stringstream ss;
    io::write_tensor(ss, io::to_raw(Tensor<double>({2, 3}, 1.5)));
    const std::string b = ss.str();
    ASSERT_EQ(b.size(), 4u + 1 + 1 + 2 * 4 + 6 * 8);
    EXPECT_EQ(b.substr(0, 4), "AITT");
    EXPECT_EQ(b[4], 1);  // f64
    EXPECT_EQ(b[5], 2);  // ndim
    EXPECT_EQ(static_cast<unsigned char>(b[6]), 2);
    EXPECT_EQ(static_cast<unsigned char>(b[10]), 3);
}

TEST(Checkpoint, RecordsKeepOrderAndManifest) {
    io::Checkpoint c;
    c.manifest["kind"] = "test";
    c.put("b", Tensor<float>({2}, {1.0f, 2.0f}));
    c.put("a", io::raw_ints({3}, {4, 5, 6}));
    const auto back = io::Checkpoint::deserialize(c.serialize());
    EXPECT_EQ(back.manifest["kind"], "test");
    ASSERT_EQ(back.records().size(), 2u);
    EXPECT_EQ(back.records()[0].first, "b");
    EXPECT_EQ(io::ints_of(back.raw("a")), (std::vector<std::int32_t>{4, 5, 6}));
    EXPECT_THROW(back.raw("missing"), IoError);
    EXPECT_THROW(io::Checkpoint::deserialize("nope"), IoError);
}
