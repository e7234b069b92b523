#include "camfit/augment.hpp"

#include <algorithm>
#include <cmath>

#include "camfit/common.hpp"

namespace camfit {

namespace {

void clamp01(Tensor<float>& t) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = std::clamp(t[i], 0.0f, 1.0f);
}

// blend(a, b, f) = f*a + (1-f)*b elementwise, where b may be a constant.
void blend_toward(Tensor<float>& img, const Tensor<float>& target, float f) {
    for (int64_t i = 0; i < img.numel(); ++i)
        img[i] = f * img[i] + (1.0f - f) * target[i];
}

void blend_toward_const(Tensor<float>& img, float target, float f) {
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = f * img[i] + (1.0f - f) * target;
}

float mean_luma(const Tensor<float>& img) {
    const int64_t plane = img.dim(1) * img.dim(2);
    const float* r = img.data();
    const float* g = r + plane;
    const float* b = g + plane;
    double s = 0;
    for (int64_t i = 0; i < plane; ++i) s += 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    return float(s / double(plane));
}

// torchvision-style random resized crop: sample area and log-aspect, accept
// the first of 10 attempts that fits, else fall back to a center crop.
Tensor<float> random_resized_crop(const Tensor<float>& img, const AugmentationPolicy& p, Rng& rng) {
    const int64_t h = img.dim(1), w = img.dim(2);
    const double area = double(h) * double(w);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(p.rrc_scale_min, p.rrc_scale_max);
        const double log_lo = std::log(p.rrc_aspect_min), log_hi = std::log(p.rrc_aspect_max);
        const double aspect = std::exp(rng.uniform(log_lo, log_hi));
        const int64_t cw = int64_t(std::lround(std::sqrt(target * aspect)));
        const int64_t ch = int64_t(std::lround(std::sqrt(target / aspect)));
        if (cw < 1 || ch < 1 || cw > w || ch > h) continue;
        const int64_t x0 = rng.uniform_int(0, w - cw);
        const int64_t y0 = rng.uniform_int(0, h - ch);
        Tensor<float> crop({3, ch, cw});
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < ch; ++y)
                for (int64_t x = 0; x < cw; ++x)
                    crop[(c * ch + y) * cw + x] = img[(c * h + (y0 + y)) * w + (x0 + x)];
        return resize_image(crop, p.out_size, p.out_size);
    }
    return resize_image(center_crop(img, std::min(h, w)), p.out_size, p.out_size);
}

void color_jitter(Tensor<float>& img, const AugmentationPolicy& p, Rng& rng) {
    // Factor draws happen unconditionally and in a fixed order; the random
    // permutation only decides application order (torchvision semantics).
    const float fb = float(rng.uniform(1.0 - p.jitter_brightness, 1.0 + p.jitter_brightness));
    const float fc = float(rng.uniform(1.0 - p.jitter_contrast, 1.0 + p.jitter_contrast));
    const float fs = float(rng.uniform(1.0 - p.jitter_saturation, 1.0 + p.jitter_saturation));
    const float fh = float(rng.uniform(-p.jitter_hue, p.jitter_hue));
    for (int64_t op : rng.permutation(4)) {
        switch (op) {
            case 0:  // brightness: blend toward black
                blend_toward_const(img, 0.0f, fb);
                break;
            case 1:  // contrast: blend toward the mean gray level
                blend_toward_const(img, mean_luma(img), fc);
                break;
            case 2:  // saturation: blend toward per-pixel grayscale
                blend_toward(img, to_grayscale(img), fs);
                break;
            case 3:
                img = shift_hue(img, fh);
                break;
        }
        clamp01(img);
    }
}

}  // namespace

void AugmentationPolicy::validate() const {
    CAMFIT_CHECK(out_size >= 8, ConfigError, "augment: out_size too small");
    CAMFIT_CHECK(test_resize >= out_size, ConfigError,
                 "augment: test_resize must be >= out_size");
    CAMFIT_CHECK(rrc_scale_min > 0 && rrc_scale_min <= rrc_scale_max && rrc_scale_max <= 1.0,
                 ConfigError, "augment: bad crop scale range");
    CAMFIT_CHECK(rrc_aspect_min > 0 && rrc_aspect_min <= rrc_aspect_max, ConfigError,
                 "augment: bad aspect range");
    for (double prob : {hflip_p, jitter_p, grayscale_p, blur_p})
        CAMFIT_CHECK(prob >= 0 && prob <= 1, ConfigError, "augment: probability out of [0,1]");
    CAMFIT_CHECK(blur_sigma_min > 0 && blur_sigma_min <= blur_sigma_max, ConfigError,
                 "augment: bad blur sigma range");
    CAMFIT_CHECK(norm_std > 0, ConfigError, "augment: norm_std must be positive");
}

Tensor<float> normalize_image(const Tensor<float>& image, float mean, float stddev) {
    Tensor<float> out = image.clone();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = (out[i] - mean) / stddev;
    return out;
}

Tensor<float> augment_view(const Tensor<float>& image, const AugmentationPolicy& policy,
                           Rng& rng) {
    policy.validate();
    CAMFIT_CHECK(image.ndim() == 3 && image.dim(0) == 3, ArgumentError,
                 "augment_view: [3,H,W] image expected");
    if (policy.identity)
        return normalize_image(resize_image(image, policy.out_size, policy.out_size),
                               policy.norm_mean, policy.norm_std);

    Tensor<float> v = random_resized_crop(image, policy, rng);
    if (rng.bernoulli(policy.hflip_p)) v = hflip(v);
    if (rng.bernoulli(policy.jitter_p)) color_jitter(v, policy, rng);
    if (rng.bernoulli(policy.grayscale_p)) v = to_grayscale(v);
    if (rng.bernoulli(policy.blur_p))
        v = gaussian_blur(v, rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max));
    clamp01(v);
    return normalize_image(v, policy.norm_mean, policy.norm_std);
}

std::pair<Tensor<float>, Tensor<float>> make_views(const Tensor<float>& image,
                                                   const AugmentationPolicy& policy, Rng& rng) {
    Tensor<float> a = augment_view(image, policy, rng);
    Tensor<float> b = augment_view(image, policy, rng);
    return {std::move(a), std::move(b)};
}

Tensor<float> test_transform(const Tensor<float>& image, const AugmentationPolicy& policy) {
    policy.validate();
    CAMFIT_CHECK(image.ndim() == 3 && image.dim(0) == 3, ArgumentError,
                 "test_transform: [3,H,W] image expected");
    const int64_t h = image.dim(1), w = image.dim(2);
    // Resize so the shorter side equals test_resize, then center-crop.
    int64_t nh, nw;
    if (h <= w) {
        nh = policy.test_resize;
        nw = std::max<int64_t>(policy.out_size,
                               int64_t(std::lround(double(w) * double(nh) / double(h))));
    } else {
        nw = policy.test_resize;
        nh = std::max<int64_t>(policy.out_size,
                               int64_t(std::lround(double(h) * double(nw) / double(w))));
    }
    Tensor<float> r = resize_image(image, nh, nw);
    return normalize_image(center_crop(r, policy.out_size), policy.norm_mean, policy.norm_std);
}

}  // namespace camfit
