#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "vistok/bench.hpp"
#include "vistok/gradcheck.hpp"
#include "vistok/tokenizer.hpp"

using namespace vistok;

namespace {

TokenizerConfig tiny_config(TokenizerTask task = TokenizerTask::depth) {
    TokenizerConfig c = task == TokenizerTask::depth ? TokenizerConfig::depth_default()
                                                     : TokenizerConfig::mask_default();
    c.n_conv_layers = 2;
    c.channel_schedule = {4, 8};
    c.downsample_ratio = 4;
    c.n_resblocks = 1;
    c.codebook_size = 8;
    c.code_dim = 4;
    return c;
}

std::vector<DepthMap> scene_depths(std::size_t n, std::size_t size, std::uint64_t seed) {
    bench::SceneSpec spec;
    spec.image_size = size;
    std::vector<DepthMap> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(bench::gen_scene(spec, seed + i).depth);
    return out;
}

DepthMap constant_map(std::size_t h, std::size_t w, float v) {
    return DepthMap::all_valid(Tensor<float>({h, w}, v));
}

}  // namespace

TEST(TokenizerConfig, DefaultDepthGridAndSize) {
    const auto model = build_tokenizer<float>(TokenizerConfig::depth_default(), 1);
    const auto tokens = tokenize(model, constant_map(64, 64, 3.0f));
    EXPECT_EQ(tokens.h, 2u);
    EXPECT_EQ(tokens.w, 2u);
    const auto big = tokenize(model, constant_map(128, 96, 3.0f));
    EXPECT_EQ(big.h, 4u);
    EXPECT_EQ(big.w, 3u);
    EXPECT_GE(model.parameter_count(), 1'000'000u);
    EXPECT_LE(model.parameter_count(), 4'000'000u);
}

TEST(TokenizerConfig, MaskGridIsFourByFour) {
    const auto model = build_tokenizer<float>(TokenizerConfig::mask_default(), 2);
    const auto tokens = tokenize(model, constant_map(64, 64, 1.0f));
    EXPECT_EQ(tokens.n, 1u);
    EXPECT_EQ(tokens.h, 4u);
    EXPECT_EQ(tokens.w, 4u);
    for (int id : tokens.ids) {
        EXPECT_GE(id, 0);
        EXPECT_LT(id, 128);
    }
    const auto out = detokenize(model, tokens);
    EXPECT_EQ(out.shape(), (Shape{1, 1, 64, 64}));
}

TEST(TokenizerConfig, ScheduleLengthMismatchRejected) {
    auto c = TokenizerConfig::depth_default();
    c.channel_schedule = {16, 32, 64, 128};
    EXPECT_THROW(build_tokenizer<float>(c, 0), ContractError);
    c = TokenizerConfig::depth_default();
    c.downsample_ratio = 16;
    EXPECT_THROW(c.validate(), ContractError);
}

TEST(TokenizerConfig, JsonRoundTrip) {
    auto c = TokenizerConfig::mask_default();
    c.width_multiplier = 0.5;
    c.input_lo = -1;
    const nlohmann::json j = c;
    const auto back = j.get<TokenizerConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_EQ(back.channels(), c.channels());
}

TEST(Tokenize, IndivisibleInputRejected) {
    const auto model = build_tokenizer<float>(tiny_config(), 3);
    EXPECT_THROW(tokenize(model, constant_map(18, 16, 1.0f)), ShapeError);
}

TEST(Tokenize, DeterministicForSameWeights) {
    const auto a = build_tokenizer<float>(tiny_config(), 4);
    const auto b = build_tokenizer<float>(tiny_config(), 4);
    const auto maps = scene_depths(2, 32, 10);
    for (const auto& m : maps) {
        EXPECT_EQ(tokenize(a, m).ids, tokenize(b, m).ids);
        EXPECT_EQ(tokenize(a, m).ids, tokenize(a, m).ids);
    }
}

TEST(Detokenize, OneHotSoftMatchesHardExactly) {
    const auto model = build_tokenizer<float>(tiny_config(), 5);
    TokenGrid grid{2, 3, 4, {}};
    std::mt19937 rng(9);
    for (std::size_t i = 0; i < 24; ++i) grid.ids.push_back(static_cast<int>(rng() % 8));
    const auto hard = detokenize(model, grid);
    const auto probs = Var<float>::constant(one_hot<float>(grid.ids, 8));
    const auto soft = detokenize_soft(model, probs, 2, 3, 4).value();
    ASSERT_EQ(hard.shape(), soft.shape());
    EXPECT_EQ(hard.shape(), (Shape{2, 1, 12, 16}));
    for (std::size_t i = 0; i < hard.numel(); ++i) ASSERT_EQ(hard[i], soft[i]) << i;
}

TEST(Detokenize, BadGridsRejected) {
    const auto model = build_tokenizer<float>(tiny_config(), 6);
    EXPECT_THROW(detokenize(model, TokenGrid{1, 2, 2, {0, 1, 2}}), ShapeError);
    EXPECT_THROW(detokenize(model, TokenGrid{1, 1, 2, {0, 8}}), IndexError);
    EXPECT_THROW(detokenize(model, TokenGrid{1, 1, 1, {-1}}), IndexError);
    EXPECT_THROW(detokenize_soft(model, Var<float>::constant(Tensor<float>({4, 8})), 1, 2, 3), ShapeError);
}

TEST(Detokenize, AblationGridShapes) {
    for (int ratio : {8, 16, 32}) {
        for (std::size_t k : {64u, 128u, 256u}) {
            for (double width : {0.5, 1.0, 2.0}) {
                auto c = TokenizerConfig::mask_default();
                c.n_conv_layers = static_cast<int>(std::log2(ratio));
                c.channel_schedule.assign(c.n_conv_layers, 0);
                for (int l = 0; l < c.n_conv_layers; ++l) c.channel_schedule[l] = 8 << l;
                c.downsample_ratio = ratio;
                c.codebook_size = k;
                c.width_multiplier = width;
                const auto model = build_tokenizer<float>(c, 7);
                const auto tokens = tokenize(model, constant_map(64, 64, 1.0f));
                EXPECT_EQ(tokens.h, 64u / ratio);
                EXPECT_EQ(tokens.w, 64u / ratio);
                for (int id : tokens.ids) ASSERT_LT(id, static_cast<int>(k));
                EXPECT_EQ(detokenize(model, tokens).shape(), (Shape{1, 1, 64, 64}));
            }
        }
    }
}

TEST(Checkpoint, ModelRoundTripKeepsTokens) {
    auto model = build_tokenizer<float>(tiny_config(), 8);
    const auto maps = scene_depths(3, 32, 20);
    TrainConfig tc;
    tc.batch_size = 3;
    TokenizerTrainer<float> trainer(model, tc);
    trainer.run_epoch(maps);
    io::Checkpoint ckpt;
    model.save(ckpt);
    const auto loaded = TokenizerModel<float>::load(io::Checkpoint::deserialize(ckpt.serialize()));
    EXPECT_EQ(loaded.parameter_count(), model.parameter_count());
    for (const auto& m : maps) EXPECT_EQ(tokenize(loaded, m).ids, tokenize(model, m).ids);
    const auto grid = tokenize(model, maps[0]);
    EXPECT_EQ(detokenize(loaded, grid), detokenize(model, grid));
}

TEST(MaskAugment, PatchCounts) {
    const auto map = scene_depths(1, 64, 30)[0];
    std::mt19937_64 rng(1);
    for (auto [ratio, expected] : {std::pair{0.0, 0u}, {1.0, 16u}, {0.5, 8u}}) {
        const auto out = mask_augment(map, MaskAugSpec{ratio, 16, 0.0f}, rng);
        std::size_t masked_px = 0;
        for (auto v : out.patch_mask) masked_px += v;
        EXPECT_EQ(masked_px, expected * 256u);
        EXPECT_EQ(out.target, map.values);
        EXPECT_EQ(out.loss_mask, map.valid);
        for (std::size_t p = 0; p < map.valid.size(); ++p) {
            const float want = out.patch_mask[p] ? 0.0f : map.values[p];
            ASSERT_EQ(out.corrupted.values[p], want);
        }
        if (ratio == 0.0) EXPECT_EQ(out.corrupted.values, map.values);
    }
}

TEST(MaskAugment, PatchesAreWholeAndAligned) {
    const auto map = constant_map(64, 64, 4.0f);
    std::mt19937_64 rng(2);
    const auto out = mask_augment(map, MaskAugSpec{0.25, 16, -1.0f}, rng);
    for (std::size_t py = 0; py < 4; ++py) {
        for (std::size_t px = 0; px < 4; ++px) {
            const auto first = out.patch_mask[(py * 16) * 64 + px * 16];
            for (std::size_t y = py * 16; y < py * 16 + 16; ++y)
                for (std::size_t x = px * 16; x < px * 16 + 16; ++x) ASSERT_EQ(out.patch_mask[y * 64 + x], first);
        }
    }
}

TEST(MaskAugment, InvalidSpecsRejected) {
    const auto map = constant_map(64, 64, 1.0f);
    std::mt19937_64 rng(3);
    EXPECT_THROW(mask_augment(map, MaskAugSpec{1.5, 16, 0.0f}, rng), ContractError);
    EXPECT_THROW(mask_augment(map, MaskAugSpec{-0.1, 16, 0.0f}, rng), ContractError);
    EXPECT_THROW(mask_augment(map, MaskAugSpec{0.5, 24, 0.0f}, rng), ContractError);
}

TEST(Forward, InvalidPixelValuesDoNotChangeGradients) {
    auto model = build_tokenizer<double>(tiny_config(), 11);
    auto map = scene_depths(1, 16, 40)[0];
    for (std::size_t p = 0; p < map.valid.size(); p += 3) map.valid[p] = 0;
    auto other = map;
    for (std::size_t p = 0; p < map.valid.size(); ++p)
        if (!map.valid[p]) other.values[p] = 123.0f + static_cast<float>(p);

    auto grads = [&](const DepthMap& m) {
        zero_grads(model.parameters());
        auto target = prepare_input<double>(m, model.config);
        const auto input = Var<double>::constant(target);
        tokenizer_forward(model, input, target, m.valid).loss.backward();
        std::vector<Tensor<double>> out;
        for (const auto& p : model.parameters()) out.push_back(p.var.grad());
        return out;
    };
    const auto a = grads(map);
    const auto b = grads(other);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << i;
}

TEST(Forward, GradCheckThroughFrozenQuantization) {
    for (auto task : {TokenizerTask::depth, TokenizerTask::mask}) {
        const auto base = build_tokenizer<double>(tiny_config(task), 12);
        std::mt19937_64 rng(13);
        const auto x0 = uniform_tensor<double>({2, 1, 8, 8}, 1.0, rng);
        Tensor<double> target({2, 1, 8, 8});
        for (std::size_t i = 0; i < target.numel(); ++i)
            target[i] = task == TokenizerTask::depth ? 0.5 + 0.4 * std::sin(double(i)) : double(i % 3 == 0);
        Mask valid(target.numel(), 1);
        for (std::size_t i = 0; i < valid.size(); i += 5) valid[i] = 0;

        FrozenQuant<double> frozen;
        {
            NoGradGuard guard;
            frozen.z0 = ops::nchw_to_rows(base.encode(Var<double>::constant(x0))).value();
            frozen.zq = quantize_hard(frozen.z0, base.codebook).z_q;
        }
        // The frozen surrogate reproduces the straight-through forward at the base point.
        const auto st = tokenizer_forward(base, Var<double>::constant(x0), target, valid);
        const auto fr = tokenizer_forward(base, Var<double>::constant(x0), target, valid, &frozen);
        EXPECT_NEAR(st.loss.item(), fr.loss.item(), 1e-12);

        const ScalarFn fn = [&](const std::vector<Var<double>>& in) {
            auto m = base;
            m.down[0].weight = in[1];
            m.enc_blocks[0].norm1.gamma = in[2];
            m.from_code.weight = in[3];
            m.up.back().weight = in[4];
            return tokenizer_forward(m, in[0], target, valid, &frozen).loss;
        };
        const auto report = grad_check_report(
            fn, {x0, base.down[0].weight.value(), base.enc_blocks[0].norm1.gamma.value(),
                 base.from_code.weight.value(), base.up.back().weight.value()},
            1e-6);  // a 1e-5 step straddles a relu kink in this model
        EXPECT_LT(report.max_rel_error, 1e-4)
            << "input " << report.worst_input << " index " << report.worst_index << " analytic "
            << report.analytic << " numeric " << report.numeric;
    }
}

TEST(Forward, MismatchedTargetRejected) {
    const auto model = build_tokenizer<float>(tiny_config(), 14);
    const auto x = Var<float>::constant(Tensor<float>({1, 1, 8, 8}));
    EXPECT_THROW(tokenizer_forward(model, x, Tensor<float>({1, 1, 8, 4}), Mask(32, 1)), ShapeError);
    EXPECT_THROW(tokenizer_forward(model, x, Tensor<float>({1, 1, 8, 8}), Mask(10, 1)), ShapeError);
}

TEST(Training, LossDecreasesAndLogsJsonl) {
    auto model = build_tokenizer<float>(tiny_config(), 15);
    const auto maps = scene_depths(24, 32, 50);
    TrainConfig tc;
    tc.lr = 3e-3;
    tc.batch_size = 4;
    TokenizerTrainer<float> trainer(model, tc);
    std::ostringstream log;
    int calls = 0;
    const auto hist = train_tokenizer(trainer, maps, 6, &log, [&](const TokenizerEpochMetrics&) { ++calls; });
    ASSERT_EQ(hist.size(), 6u);
    EXPECT_EQ(calls, 6);
    EXPECT_LT(hist.back().loss, hist.front().loss);
    EXPECT_TRUE(trainer.codebook_initialized());
    std::istringstream lines(log.str());
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("epoch").get<int>(), ++n);
        EXPECT_TRUE(j.contains("loss") && j.contains("recon_metric") && j.contains("lr"));
    }
    EXPECT_EQ(n, 6);
}

TEST(Training, ResumeIsBitIdentical) {
    const auto maps = scene_depths(12, 32, 60);
    TrainConfig tc;
    tc.lr = 3e-3;
    tc.batch_size = 4;
    tc.seed = 77;
    tc.schedule.kind = ScheduleKind::exponential;
    std::optional<MaskAugSpec> aug = MaskAugSpec{0.5, 16, 0.0f};

    auto straight = build_tokenizer<float>(tiny_config(), 16);
    TokenizerTrainer<float> t1(straight, tc, aug);
    const auto full = train_tokenizer(t1, maps, 3);

    auto first = build_tokenizer<float>(tiny_config(), 16);
    TokenizerTrainer<float> t2(first, tc, aug);
    train_tokenizer(t2, maps, 2);
    io::Checkpoint ckpt;
    first.save(ckpt);
    t2.save(ckpt);
    const auto restored_ckpt = io::Checkpoint::deserialize(ckpt.serialize());

    auto resumed = TokenizerModel<float>::load(restored_ckpt);
    TokenizerTrainer<float> t3(resumed, tc, aug);
    t3.load(restored_ckpt);
    EXPECT_EQ(t3.epoch(), 2);
    const auto tail = train_tokenizer(t3, maps, 3);
    ASSERT_EQ(tail.size(), 1u);
    EXPECT_EQ(tail[0].loss, full[2].loss);

    const auto pa = straight.parameters();
    const auto pb = resumed.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].var.value(), pb[i].var.value()) << pa[i].name;
    EXPECT_EQ(straight.codebook.embeddings.value(), resumed.codebook.embeddings.value());
    EXPECT_EQ(straight.codebook.ema_cluster_size, resumed.codebook.ema_cluster_size);
}

TEST(Training, NonFiniteLossRaisesDivergence) {
    auto model = build_tokenizer<float>(tiny_config(), 17);
    model.up.back().weight.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
    TokenizerTrainer<float> trainer(model, TrainConfig{});
    EXPECT_THROW(trainer.run_epoch(scene_depths(2, 32, 70)), DivergenceError);
}

TEST(Training, FinerGridsReconstructBetter) {
    const auto train = scene_depths(96, 64, 100);
    const auto held = scene_depths(16, 64, 900);
    std::vector<double> rmse;
    for (int layers : {5, 4, 3}) {
        auto c = TokenizerConfig::depth_default();
        c.n_conv_layers = layers;
        c.channel_schedule = {8, 16, 32, 64, 128};
        c.channel_schedule.resize(layers);
        c.downsample_ratio = 1 << layers;
        c.code_dim = 16;
        auto model = build_tokenizer<float>(c, 18);
        TrainConfig tc;
        tc.lr = 3e-3;
        tc.batch_size = 4;
        TokenizerTrainer<float> trainer(model, tc);
        train_tokenizer(trainer, train, 6);
        rmse.push_back(reconstruction_rmse(reconstruct(model, held), held, c.value_scale));
    }
    EXPECT_GT(rmse[0], rmse[1]);
    EXPECT_GT(rmse[1], rmse[2]);
}

TEST(Interp, ConstantDepthWithinHalfBin) {
    const InterpCodec codec{16, InterpMode::bilinear, 128, 0.0, 10.0};
    const Tensor<float> map({64, 64}, 5.0f);
    const auto tokens = interp_tokenize(map, codec);
    EXPECT_EQ(tokens.h, 4u);
    EXPECT_EQ(tokens.w, 4u);
    const auto back = interp_detokenize(tokens, codec);
    ASSERT_EQ(back.shape(), (Shape{64, 64}));
    for (std::size_t i = 0; i < back.numel(); ++i) ASSERT_LE(std::abs(back[i] - 5.0f), 10.0 / 128 / 2 + 1e-6);
}

TEST(Interp, BlockAlignedSquareIsExact) {
    const InterpCodec codec{16, InterpMode::nearest, 2, 0.0, 1.0};
    Tensor<float> map({64, 64});
    for (std::size_t y = 16; y < 48; ++y)
        for (std::size_t x = 16; x < 48; ++x) map[y * 64 + x] = 1.0f;
    const auto back = interp_detokenize(interp_tokenize(map, codec), codec);
    for (std::size_t i = 0; i < map.numel(); ++i) ASSERT_EQ(back[i] >= 0.5f, map[i] >= 0.5f) << i;
}

TEST(Interp, CheckerboardLosesDetail) {
    const InterpCodec codec{16, InterpMode::nearest, 2, 0.0, 1.0};
    Tensor<float> map({64, 64});
    for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) map[y * 64 + x] = static_cast<float>((x + y) % 2);
    const auto back = interp_detokenize(interp_tokenize(map, codec), codec);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < map.numel(); ++i) {
        const bool a = back[i] >= 0.5f, b = map[i] >= 0.5f;
        inter += a && b;
        uni += a || b;
    }
    EXPECT_LE(static_cast<double>(inter) / static_cast<double>(uni), 0.5);
}

TEST(Interp, InvalidCodecsRejected) {
    const Tensor<float> map({64, 64}, 1.0f);
    EXPECT_THROW(interp_tokenize(map, InterpCodec{16, InterpMode::nearest, 1, 0.0, 1.0}), ContractError);
    EXPECT_THROW(interp_tokenize(map, InterpCodec{16, InterpMode::nearest, 2, 1.0, 1.0}), ContractError);
    EXPECT_THROW(interp_tokenize(Tensor<float>({60, 64}), InterpCodec{}), ShapeError);
}
