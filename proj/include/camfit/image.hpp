#pragma once

// Image plumbing: float CHW RGB tensors in [0,1] as the in-memory currency,
// with OpenCV confined to the .cpp. All geometry helpers are deterministic.

#include <string>

#include "camfit/tensor.hpp"

namespace camfit {

// Decode an image file to [3,H,W] RGB float in [0,1]. DataError on failure.
Tensor<float> load_image(const std::string& path);

// Encode [3,H,W] float in [0,1] (clamped) as an 8-bit PNG. IoError on failure.
void save_image_png(const std::string& path, const Tensor<float>& chw);

// Bilinear (upscale) / area (downscale) resize to [3,out_h,out_w].
Tensor<float> resize_image(const Tensor<float>& chw, int64_t out_h, int64_t out_w);

// Centered crop; size must not exceed either input dimension.
Tensor<float> center_crop(const Tensor<float>& chw, int64_t size);

// Horizontal mirror.
Tensor<float> hflip(const Tensor<float>& chw);

// Gaussian blur with the given sigma (kernel size derived from sigma).
Tensor<float> gaussian_blur(const Tensor<float>& chw, double sigma);

// Shift hue by `delta` in [-0.5, 0.5] turns of the hue circle.
Tensor<float> shift_hue(const Tensor<float>& chw, double delta);

// Luma grayscale replicated to 3 channels.
Tensor<float> to_grayscale(const Tensor<float>& chw);

}  // namespace camfit
