#pragma once

// The two-view augmentation pipeline: random resized crop, horizontal flip,
// color jitter, grayscale, Gaussian blur, then mean/std normalization. Each
// view consumes draws from the caller's RNG, so a fixed RNG state reproduces
// the exact view pair.

#include <utility>

#include "camfit/image.hpp"
#include "camfit/rng.hpp"

namespace camfit {

struct AugmentationPolicy {
    int64_t out_size = 64;
    int64_t test_resize = 72;  // shorter-side resize before the test center crop

    double rrc_scale_min = 0.2, rrc_scale_max = 1.0;
    double rrc_aspect_min = 3.0 / 4.0, rrc_aspect_max = 4.0 / 3.0;
    double hflip_p = 0.5;
    double jitter_p = 0.8;
    double jitter_brightness = 0.4, jitter_contrast = 0.4, jitter_saturation = 0.4;
    double jitter_hue = 0.1;
    double grayscale_p = 0.2;
    double blur_p = 0.5;
    double blur_sigma_min = 0.1, blur_sigma_max = 2.0;

    float norm_mean = 0.5f, norm_std = 0.25f;

    // identity: both views are the plain resized original (test plumbing).
    bool identity = false;

    static AugmentationPolicy desk() { return {}; }
    static AugmentationPolicy paper_scale() {
        AugmentationPolicy p;
        p.out_size = 224;
        p.test_resize = 256;
        return p;
    }

    void validate() const;
};

// One augmented training view (normalized, [3,S,S]).
Tensor<float> augment_view(const Tensor<float>& image, const AugmentationPolicy& policy, Rng& rng);

// Two independently augmented views of one image.
std::pair<Tensor<float>, Tensor<float>> make_views(const Tensor<float>& image,
                                                   const AugmentationPolicy& policy, Rng& rng);

// Deterministic test-time transform: resize shorter side, center crop,
// normalize.
Tensor<float> test_transform(const Tensor<float>& image, const AugmentationPolicy& policy);

// (x - mean) / std, in place on a copy.
Tensor<float> normalize_image(const Tensor<float>& image, float mean, float stddev);

}  // namespace camfit
