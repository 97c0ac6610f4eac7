#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vistok/bench.hpp"

using namespace vistok;
using namespace vistok::bench;

namespace {

InstanceAnnotation square_instance(double x0, double y0, double x1, double y1, int cls) {
    InstanceAnnotation a;
    a.box = {x0, y0, x1, y1};
    a.class_id = cls;
    a.mask64.assign(kMaskCrop * kMaskCrop, 1);
    return a;
}

}  // namespace

TEST(GenScene, DeterministicPerSeed) {
    SceneSpec spec;
    const auto a = gen_scene(spec, 42), b = gen_scene(spec, 42);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.depth.values, b.depth.values);
    ASSERT_EQ(a.instances.size(), b.instances.size());
    for (std::size_t i = 0; i < a.instances.size(); ++i) {
        EXPECT_EQ(a.instances[i].mask64, b.instances[i].mask64);
        EXPECT_EQ(a.instances[i].box, b.instances[i].box);
    }
    EXPECT_NE(gen_scene(spec, 43).depth.values, a.depth.values);
}

TEST(GenScene, NoObjectsGivesConstantBackground) {
    SceneSpec spec;
    spec.min_objects = spec.max_objects = 0;
    const auto s = gen_scene(spec, 1);
    EXPECT_TRUE(s.instances.empty());
    for (float d : s.depth.values.data()) EXPECT_EQ(d, static_cast<float>(spec.background_depth));
}

TEST(GenScene, InstanceMasksLieInForeground) {
    SceneSpec spec;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto s = gen_scene(spec, seed);
        for (const auto& inst : s.instances) {
            EXPECT_LE(inst.box[0], inst.box[2]);
            EXPECT_LE(inst.box[1], inst.box[3]);
            EXPECT_GE(inst.box[0], 0.0);
            EXPECT_LE(inst.box[3], 1.0);
            const auto full = paste_mask(inst.mask64, inst.box, spec.image_size, spec.image_size);
            for (std::size_t p = 0; p < full.size(); ++p) {
                if (full[p]) EXPECT_LT(s.depth.values[p], spec.background_depth);
            }
        }
    }
}

TEST(GenScene, IntensityDecreasesWithDepth) {
    SceneSpec spec;
    spec.min_objects = spec.max_objects = 0;
    const auto bg = gen_scene(spec, 0);
    const float bg_lum = bg.image[0];
    spec.min_objects = spec.max_objects = 3;
    const auto s = gen_scene(spec, 5);
    const std::size_t S = spec.image_size;
    for (std::size_t p = 0; p < S * S; ++p) {
        if (s.depth.values[p] < spec.background_depth) {
            float mx = 0;
            for (std::size_t c = 0; c < 3; ++c) mx = std::max(mx, s.image[c * S * S + p]);
            EXPECT_GT(mx, bg_lum);
        }
    }
}

TEST(CorruptDepth, ZeroFractionUnchanged) {
    const auto s = gen_scene(SceneSpec{}, 3);
    const auto c = corrupt_depth(s.depth, {0.0, 3}, 9);
    EXPECT_EQ(c.depth.values, s.depth.values);
    EXPECT_EQ(c.depth.valid, s.depth.valid);
}

TEST(CorruptDepth, AreaMatchesRequestAndValidPixelsKept) {
    const auto s = gen_scene(SceneSpec{}, 4);
    for (double f : {0.05, 0.1, 0.3, 0.6}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto c = corrupt_depth(s.depth, {f, 3}, seed);
            std::size_t invalid = 0;
            for (std::size_t p = 0; p < c.depth.valid.size(); ++p) {
                if (!c.depth.valid[p]) {
                    ++invalid;
                    EXPECT_EQ(c.depth.values[p], 0.0f);
                } else {
                    EXPECT_EQ(c.depth.values[p], s.depth.values[p]);
                }
            }
            const double frac = static_cast<double>(invalid) / c.depth.valid.size();
            EXPECT_NEAR(frac, f, 0.2 * f);
        }
    }
}

TEST(CorruptDepth, RejectsFullFraction) {
    const auto s = gen_scene(SceneSpec{}, 4);
    EXPECT_THROW(corrupt_depth(s.depth, {1.0, 3}, 0), ContractError);
}

TEST(DepthMetricsTest, PerfectPrediction) {
    const std::vector<float> g{1, 2, 3, 4};
    const Mask v(4, 1);
    const auto m = depth_metrics(g, g, v);
    EXPECT_EQ(m.rmse, 0.0);
    EXPECT_EQ(m.rel, 0.0);
    EXPECT_EQ(m.log10, 0.0);
    EXPECT_EQ(m.delta1, 1.0);
}

TEST(DepthMetricsTest, ScaledPredictionHitsStrictThreshold) {
    // 1.25 * g is exactly representable for these g, so the ratio equals the threshold.
    const std::vector<float> g{1, 2, 4, 8};
    std::vector<float> p;
    for (float x : g) p.push_back(1.25f * x);
    const auto m = depth_metrics(p, g, Mask(4, 1));
    EXPECT_EQ(m.delta1, 0.0);
    EXPECT_EQ(m.delta2, 1.0);
    EXPECT_NEAR(m.rel, 0.25, 1e-12);
}

TEST(DepthMetricsTest, MatchesScalarOracle) {
    Rng rng(11);
    std::uniform_real_distribution<float> u(0.3f, 10.0f);
    std::vector<float> p(500), g(500);
    Mask v(500);
    for (std::size_t i = 0; i < 500; ++i) {
        p[i] = u(rng);
        g[i] = u(rng);
        v[i] = rng() % 4 != 0;
    }
    const auto m = depth_metrics(p, g, v);
    // Independent oracle: accumulate each metric in its own pass.
    long double se = 0, rel = 0, lg = 0, n = 0, d[3] = {0, 0, 0};
    for (std::size_t i = 0; i < 500; ++i) {
        if (!v[i]) continue;
        n += 1;
        se += std::pow((long double)p[i] - g[i], 2);
        rel += std::fabs((long double)p[i] - g[i]) / g[i];
        lg += std::fabs(std::log10((long double)p[i]) - std::log10((long double)g[i]));
        const long double r = p[i] > g[i] ? (long double)p[i] / g[i] : (long double)g[i] / p[i];
        for (int k = 0; k < 3; ++k) d[k] += r < std::pow(1.25L, k + 1);
    }
    EXPECT_NEAR(m.rmse, std::sqrt(se / n), 1e-6);
    EXPECT_NEAR(m.rel, rel / n, 1e-6);
    EXPECT_NEAR(m.log10, lg / n, 1e-6);
    EXPECT_NEAR(m.delta1, d[0] / n, 1e-6);
    EXPECT_NEAR(m.delta2, d[1] / n, 1e-6);
    EXPECT_NEAR(m.delta3, d[2] / n, 1e-6);
    EXPECT_LE(m.delta1, m.delta2);
    EXPECT_LE(m.delta2, m.delta3);
}

TEST(DepthMetricsTest, ScaleInvarianceAndInvalidPixelsIgnored) {
    Rng rng(12);
    std::uniform_real_distribution<float> u(0.5f, 5.0f);
    std::vector<float> p(100), g(100);
    Mask v(100);
    for (std::size_t i = 0; i < 100; ++i) {
        p[i] = u(rng);
        g[i] = u(rng);
        v[i] = i % 3 != 0;
    }
    const auto a = depth_metrics(p, g, v);
    auto p2 = p, g2 = g;
    for (auto& x : p2) x *= 2;
    for (auto& x : g2) x *= 2;
    const auto b = depth_metrics(p2, g2, v);
    EXPECT_NEAR(b.rmse, 2 * a.rmse, 1e-5);
    EXPECT_NEAR(b.rel, a.rel, 1e-6);
    EXPECT_EQ(b.delta1, a.delta1);
    for (std::size_t i = 0; i < 100; i += 3) p[i] = 1000.0f;
    EXPECT_EQ(depth_metrics(p, g, v).rmse, a.rmse);
    EXPECT_THROW(depth_metrics(p, g, Mask(100, 0)), ContractError);
}

TEST(MaskMetricsTest, IdenticalLists) {
    std::vector<InstanceAnnotation> gt{square_instance(0, 0, 0.5, 0.5, 0), square_instance(0.5, 0.5, 1, 1, 1)};
    const auto m = mask_metrics(gt, gt, 64);
    EXPECT_EQ(m.mean_iou, 1.0);
    EXPECT_EQ(m.ap, 1.0);
}

TEST(MaskMetricsTest, DisjointMasks) {
    std::vector<InstanceAnnotation> gt{square_instance(0, 0, 0.25, 0.25, 0)};
    std::vector<InstanceAnnotation> pr{square_instance(0.5, 0.5, 1, 1, 0)};
    const auto m = mask_metrics(pr, gt, 64);
    EXPECT_EQ(m.mean_iou, 0.0);
    EXPECT_EQ(m.ap, 0.0);
}

TEST(MaskMetricsTest, DuplicatePredictionHandOracle) {
    // One gt, two perfect duplicates: at every threshold TP=1, FP=1, FN=0.
    // precision 1/2, recall 1 -> AP 0.5 at every threshold.
    std::vector<InstanceAnnotation> gt{square_instance(0.25, 0.25, 0.75, 0.75, 1)};
    std::vector<InstanceAnnotation> pr{gt[0], gt[0]};
    const auto m = mask_metrics(pr, gt, 64);
    EXPECT_EQ(m.mean_iou, 1.0);
    EXPECT_DOUBLE_EQ(m.ap, 0.5);
}

TEST(MaskMetricsTest, PartialOverlapThresholdSweep) {
    // 32x32 gt vs 32x24 prediction inside it: IoU = 0.75, so thresholds 0.5..0.75 match.
    std::vector<InstanceAnnotation> gt{square_instance(0, 0, 0.5, 0.5, 0)};
    std::vector<InstanceAnnotation> pr{square_instance(0, 0, 0.5, 0.375, 0)};
    const auto m = mask_metrics(pr, gt, 64);
    EXPECT_DOUBLE_EQ(m.mean_iou, 0.75);
    int hits = 0;
    for (double t : default_iou_thresholds()) hits += t <= 0.75 + 1e-12;
    EXPECT_DOUBLE_EQ(m.ap, hits / 10.0);
}

TEST(MaskMetricsTest, ClassMismatchNeverMatches) {
    std::vector<InstanceAnnotation> gt{square_instance(0, 0, 0.5, 0.5, 0)};
    std::vector<InstanceAnnotation> pr{square_instance(0, 0, 0.5, 0.5, 1)};
    EXPECT_EQ(mask_metrics(pr, gt, 64).mean_iou, 0.0);
}

TEST(MaskMetricsTest, EmptyConventions) {
    std::vector<InstanceAnnotation> none, one{square_instance(0, 0, 0.5, 0.5, 0)};
    EXPECT_EQ(mask_metrics(none, none, 64).ap, 1.0);
    EXPECT_EQ(mask_metrics(one, none, 64).ap, 0.0);
    EXPECT_EQ(mask_metrics(none, one, 64).ap, 0.0);
}

TEST(PasteMask, BlockAlignedSquare) {
    Mask crop(kMaskCrop * kMaskCrop, 1);
    const auto full = paste_mask(crop, {0.25, 0.5, 0.75, 1.0}, 64, 64);
    std::size_t on = 0;
    for (std::size_t i = 0; i < 64; ++i)
        for (std::size_t j = 0; j < 64; ++j) {
            const bool inside = i >= 32 && j >= 16 && j < 48;
            EXPECT_EQ(full[i * 64 + j], inside ? 1 : 0);
            on += full[i * 64 + j];
        }
    EXPECT_EQ(on, 32u * 32u);
}

TEST(GenScene, PastedCropsReproduceVisibleRegions) {
    SceneSpec spec;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto s = gen_scene(spec, seed);
        Mask covered(spec.image_size * spec.image_size, 0);
        for (const auto& inst : s.instances) {
            const auto full = paste_mask(inst.mask64, inst.box, spec.image_size, spec.image_size);
            for (std::size_t p = 0; p < full.size(); ++p) {
                EXPECT_FALSE(full[p] && covered[p]) << "instances overlap at " << p;
                covered[p] |= full[p];
            }
        }
    }
}

TEST(SceneIo, RoundTripThroughCheckpointBytes) {
    bench::SceneSpec spec;
    spec.image_size = 32;
    std::vector<bench::SyntheticScene> scenes{bench::gen_scene(spec, 1), bench::gen_scene(spec, 2)};
    spec.min_objects = spec.max_objects = 0;
    scenes.push_back(bench::gen_scene(spec, 3));
    io::Checkpoint ckpt;
    bench::put_scenes(ckpt, scenes);
    const auto back = bench::get_scenes(io::Checkpoint::deserialize(ckpt.serialize()));
    ASSERT_EQ(back.size(), scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        EXPECT_EQ(back[i].image, scenes[i].image);
        EXPECT_EQ(back[i].depth.values, scenes[i].depth.values);
        EXPECT_EQ(back[i].depth.valid, scenes[i].depth.valid);
        ASSERT_EQ(back[i].instances.size(), scenes[i].instances.size());
        for (std::size_t k = 0; k < scenes[i].instances.size(); ++k) {
            EXPECT_EQ(back[i].instances[k].box, scenes[i].instances[k].box);
            EXPECT_EQ(back[i].instances[k].class_id, scenes[i].instances[k].class_id);
            EXPECT_EQ(back[i].instances[k].mask64, scenes[i].instances[k].mask64);
        }
    }
    EXPECT_TRUE(back[2].instances.empty());
}

TEST(SceneIo, MissingSceneCountRejected) {
    EXPECT_THROW(bench::get_scenes(io::Checkpoint{}), IoError);
}
