#include "camfit/heatmap.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>

#include "camfit/common.hpp"
#include "camfit/image.hpp"

namespace camfit {

Tensor<float> normalize_heatmap(const Tensor<float>& map) {
    CAMFIT_CHECK(map.ndim() == 2, ArgumentError,
                 "normalize_heatmap: [H,W] expected, got " + shape_str(map.shape()));
    float lo = map[0], hi = map[0];
    for (int64_t i = 1; i < map.numel(); ++i) {
        lo = std::min(lo, map[i]);
        hi = std::max(hi, map[i]);
    }
    Tensor<float> out(map.shape());
    if (hi - lo < 1e-12f) {
        out.fill(0.5f);
        return out;
    }
    const float inv = 1.0f / (hi - lo);
    for (int64_t i = 0; i < map.numel(); ++i) out[i] = (map[i] - lo) * inv;
    return out;
}

std::array<float, 3> heat_color(float v) {
    v = std::clamp(v, 0.0f, 1.0f);
    // Piecewise-linear ramp through blue, cyan, yellow, red. The hot endpoint
    // is snapped so v == 1 yields pure red despite 1/3-in-float roundoff.
    if (v >= 1.0f) return {1.0f, 0.0f, 0.0f};
    if (v < 1.0f / 3.0f) {
        const float t = v * 3.0f;
        return {0.0f, t, 1.0f};
    }
    if (v < 2.0f / 3.0f) {
        const float t = (v - 1.0f / 3.0f) * 3.0f;
        return {t, 1.0f, 1.0f - t};
    }
    const float t = (v - 2.0f / 3.0f) * 3.0f;
    return {1.0f, 1.0f - t, 0.0f};
}

Tensor<float> overlay_heatmap(const Tensor<float>& image, const Tensor<float>& map,
                              float alpha) {
    CAMFIT_CHECK(image.ndim() == 3 && image.dim(0) == 3, ArgumentError,
                 "overlay_heatmap: [3,h,w] image expected, got " +
                     shape_str(image.shape()));
    CAMFIT_CHECK(alpha >= 0.0f && alpha <= 1.0f, ArgumentError,
                 "overlay_heatmap: alpha must be in [0,1]");
    const int64_t h = image.dim(1), w = image.dim(2);
    Tensor<float> norm = normalize_heatmap(map);
    // The resampler wants three channels; replicate the map across them.
    Tensor<float> chan({3, norm.dim(0), norm.dim(1)});
    for (int64_t c = 0; c < 3; ++c)
        std::copy(norm.data(), norm.data() + norm.numel(), chan.data() + c * norm.numel());
    Tensor<float> up = resize_image(chan, h, w);

    Tensor<float> out({3, h, w});
    const int64_t plane = h * w;
    for (int64_t i = 0; i < plane; ++i) {
        const std::array<float, 3> c = heat_color(up[i]);
        for (int64_t ch = 0; ch < 3; ++ch) {
            const float base = std::clamp(image[ch * plane + i], 0.0f, 1.0f);
            out[ch * plane + i] = (1.0f - alpha) * base + alpha * c[size_t(ch)];
        }
    }
    return out;
}

std::vector<std::string> export_heatmaps(const std::vector<Tensor<float>>& images,
                                         const std::vector<Tensor<float>>& maps,
                                         const std::string& out_dir,
                                         const std::string& prefix) {
    CAMFIT_CHECK(images.size() == maps.size(), ArgumentError,
                 "export_heatmaps: " + std::to_string(images.size()) + " images vs " +
                     std::to_string(maps.size()) + " maps");
    CAMFIT_CHECK(!images.empty(), ArgumentError, "export_heatmaps: nothing to export");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    CAMFIT_CHECK(!ec && fs::is_directory(out_dir), IoError,
                 "export_heatmaps: cannot create " + out_dir);

    std::vector<std::string> written;
    written.reserve(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "%s_%04zu.png", prefix.c_str(), i);
        const std::string path = (fs::path(out_dir) / name).string();
        save_image_png(path, overlay_heatmap(images[i], maps[i]));
        written.push_back(path);
    }
    return written;
}

}  // namespace camfit
