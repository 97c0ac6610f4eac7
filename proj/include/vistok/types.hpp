#pragma once

#include <array>
#include <cstddef>

#include "vistok/ops.hpp"

namespace vistok {

inline constexpr std::size_t kMaskCrop = 64;

// Per-pixel depth with a validity mask; invalid pixels carry the sentinel 0.
struct DepthMap {
    Tensor<float> values;  // [H,W]
    Mask valid;            // H*W, 1 = annotated

    std::size_t height() const { return values.dim(0); }
    std::size_t width() const { return values.dim(1); }
    static DepthMap all_valid(Tensor<float> v) {
        Mask m(v.numel(), 1);
        return {std::move(v), std::move(m)};
    }
    void validate() const;
};

struct InstanceAnnotation {
    std::array<double, 4> box{};  // x0, y0, x1, y1 normalized by image side
    int class_id = 0;
    Mask mask64;                  // kMaskCrop*kMaskCrop crop aligned to the box
    bool is_noise = false;
};

// Full-image binary mask from a box-aligned crop (nearest sampling).
Mask paste_mask(const Mask& crop, const std::array<double, 4>& box, std::size_t height,
                std::size_t width);

}  // namespace vistok
