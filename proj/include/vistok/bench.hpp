#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "vistok/io.hpp"
#include "vistok/nn.hpp"
#include "vistok/types.hpp"

namespace vistok::bench {

enum class Primitive { rectangle = 0, ellipse = 1 };

struct SceneSpec {
    std::size_t image_size = 64;
    int min_objects = 1;
    int max_objects = 4;
    double depth_min = 0.5;
    double depth_max = 10.0;
    double background_depth = 9.0;
    double shade = 0.7;          // intensity drop from nearest to background depth
    double min_extent = 0.2;     // object side as a fraction of image_size
    double max_extent = 0.6;
    double max_tilt = 0.02;      // depth slope in meters per pixel

    void validate() const;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);

struct SyntheticScene {
    Tensor<float> image;  // [3,H,W] in [0,1]
    DepthMap depth;
    std::vector<InstanceAnnotation> instances;
};

SyntheticScene gen_scene(const SceneSpec& spec, std::uint64_t seed);

// Instance crops collected from consecutive scenes of the given spec.
std::vector<Mask> gen_mask_crops(const SceneSpec& spec, std::size_t n, std::uint64_t seed);

// Records scene.<i>.{image,depth,valid,boxes,classes,masks}; manifest key "scene_count".
void put_scenes(io::Checkpoint& ckpt, const std::vector<SyntheticScene>& scenes);
std::vector<SyntheticScene> get_scenes(const io::Checkpoint& ckpt);

struct HoleSpec {
    double fraction = 0.1;   // of all pixels, in [0,1)
    int max_blobs = 3;
};

struct Corrupted {
    DepthMap depth;  // holes marked invalid with value 0
    Mask holes;      // 1 where this call removed a previously valid pixel
};

Corrupted corrupt_depth(const DepthMap& depth, const HoleSpec& spec, std::uint64_t seed);

struct DepthMetrics {
    double rmse = 0, rel = 0, log10 = 0, delta1 = 0, delta2 = 0, delta3 = 0;
};
void to_json(nlohmann::json& j, const DepthMetrics& m);

// Over valid pixels only. Predictions are clamped to >= 1e-6 for the ratio and log terms.
DepthMetrics depth_metrics(std::span<const float> pred, std::span<const float> gt,
                           std::span<const std::uint8_t> valid);

struct MaskMetrics {
    double mean_iou = 0;
    double ap = 0;
    std::vector<double> ap_per_threshold;
};
void to_json(nlohmann::json& j, const MaskMetrics& m);

std::vector<double> default_iou_thresholds();  // 0.5:0.05:0.95
double mask_iou(const Mask& a, const Mask& b);

// Masks are compared after pasting into an image_size x image_size frame. Noise records
// are ignored on both sides.
MaskMetrics mask_metrics(const std::vector<InstanceAnnotation>& pred,
                         const std::vector<InstanceAnnotation>& gt, std::size_t image_size,
                         const std::vector<double>& thresholds = default_iou_thresholds());

}  // namespace vistok::bench
