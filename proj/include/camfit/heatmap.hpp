#pragma once
// Attention/gradient map rendering: min-max scaling to [0,1], a fixed color
// ramp, alpha overlay on the source image, and batch PNG export. Intensities
// carry relative strength only; absolute magnitudes are not preserved.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "camfit/tensor.hpp"

namespace camfit {

// Min-max scale a [H,W] map into [0,1]. A (near-)constant map renders at
// mid intensity: with no range there is no relative strength to show.
Tensor<float> normalize_heatmap(const Tensor<float>& map);

// Intensity in [0,1] -> RGB on a blue -> cyan -> yellow -> red ramp.
std::array<float, 3> heat_color(float v);

// Normalized map resized to the image's grid and alpha-blended over it.
// image: [3,h,w] in [0,1]; map: [H,W] raw (normalized internally).
Tensor<float> overlay_heatmap(const Tensor<float>& image, const Tensor<float>& map,
                              float alpha = 0.5f);

// One overlay PNG per image under out_dir, named <prefix>_NNNN.png in input
// order. Requires exactly one map per image. Returns the written paths.
std::vector<std::string> export_heatmaps(const std::vector<Tensor<float>>& images,
                                         const std::vector<Tensor<float>>& maps,
                                         const std::string& out_dir,
                                         const std::string& prefix = "heatmap");

}  // namespace camfit
