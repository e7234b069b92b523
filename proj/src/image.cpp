#include "camfit/image.hpp"

// OpenCV 4.5 headers mix enum types in arithmetic, which C++20 deprecates.
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wdeprecated-enum-enum-conversion"
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#pragma GCC diagnostic pop

#include "camfit/common.hpp"

namespace camfit {

namespace {

cv::Mat to_mat(const Tensor<float>& chw) {
    CAMFIT_CHECK(chw.ndim() == 3 && chw.dim(0) == 3, ArgumentError,
                 "image tensor must be [3,H,W], got " + shape_str(chw.shape()));
    const int h = int(chw.dim(1)), w = int(chw.dim(2));
    cv::Mat m(h, w, CV_32FC3);
    const int64_t plane = int64_t(h) * w;
    const float* r = chw.data();
    const float* g = r + plane;
    const float* b = g + plane;
    for (int y = 0; y < h; ++y) {
        cv::Vec3f* row = m.ptr<cv::Vec3f>(y);
        for (int x = 0; x < w; ++x) {
            const int64_t i = int64_t(y) * w + x;
            row[x] = {b[i], g[i], r[i]};  // OpenCV is BGR
        }
    }
    return m;
}

Tensor<float> from_mat(const cv::Mat& m) {
    CAMFIT_CHECK(m.type() == CV_32FC3, NumericError, "expected CV_32FC3 mat");
    Tensor<float> chw({3, m.rows, m.cols});
    const int64_t plane = int64_t(m.rows) * m.cols;
    float* r = chw.data();
    float* g = r + plane;
    float* b = g + plane;
    for (int y = 0; y < m.rows; ++y) {
        const cv::Vec3f* row = m.ptr<cv::Vec3f>(y);
        for (int x = 0; x < m.cols; ++x) {
            const int64_t i = int64_t(y) * m.cols + x;
            b[i] = row[x][0];
            g[i] = row[x][1];
            r[i] = row[x][2];
        }
    }
    return chw;
}

}  // namespace

Tensor<float> load_image(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
    CAMFIT_CHECK(!img.empty(), DataError, "cannot decode image: " + path);
    cv::Mat f;
    img.convertTo(f, CV_32FC3, 1.0 / 255.0);
    return from_mat(f);
}

void save_image_png(const std::string& path, const Tensor<float>& chw) {
    cv::Mat f = to_mat(chw);
    cv::Mat clamped;
    cv::min(cv::max(f, 0.0f), 1.0f, clamped);
    cv::Mat u8;
    clamped.convertTo(u8, CV_8UC3, 255.0);
    bool ok = false;
    try {
        ok = cv::imwrite(path, u8);
    } catch (const cv::Exception&) {
        ok = false;
    }
    CAMFIT_CHECK(ok, IoError, "cannot write image: " + path);
}

Tensor<float> resize_image(const Tensor<float>& chw, int64_t out_h, int64_t out_w) {
    CAMFIT_CHECK(out_h >= 1 && out_w >= 1, ArgumentError, "resize: bad output size");
    if (out_h == chw.dim(1) && out_w == chw.dim(2)) return chw.clone();
    cv::Mat src = to_mat(chw);
    cv::Mat dst;
    const bool shrink = out_h <= chw.dim(1) && out_w <= chw.dim(2);
    cv::resize(src, dst, cv::Size(int(out_w), int(out_h)), 0, 0,
               shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
    return from_mat(dst);
}

Tensor<float> center_crop(const Tensor<float>& chw, int64_t size) {
    const int64_t h = chw.dim(1), w = chw.dim(2);
    CAMFIT_CHECK(size >= 1 && size <= h && size <= w, ArgumentError,
                 "center_crop: size " + std::to_string(size) + " exceeds image " +
                     shape_str(chw.shape()));
    const int64_t y0 = (h - size) / 2, x0 = (w - size) / 2;
    Tensor<float> out({3, size, size});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x)
                out[(c * size + y) * size + x] = chw[(c * h + (y0 + y)) * w + (x0 + x)];
    return out;
}

Tensor<float> hflip(const Tensor<float>& chw) {
    const int64_t h = chw.dim(1), w = chw.dim(2);
    Tensor<float> out({3, h, w});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                out[(c * h + y) * w + x] = chw[(c * h + y) * w + (w - 1 - x)];
    return out;
}

Tensor<float> gaussian_blur(const Tensor<float>& chw, double sigma) {
    CAMFIT_CHECK(sigma > 0, ArgumentError, "gaussian_blur: sigma must be positive");
    cv::Mat src = to_mat(chw);
    cv::Mat dst;
    // Odd kernel wide enough to cover ~4 sigma, as OpenCV would derive itself.
    int k = int(std::ceil(sigma * 4)) | 1;
    cv::GaussianBlur(src, dst, cv::Size(k, k), sigma, sigma, cv::BORDER_REFLECT_101);
    return from_mat(dst);
}

Tensor<float> shift_hue(const Tensor<float>& chw, double delta) {
    cv::Mat src = to_mat(chw);
    cv::Mat clamped;
    cv::min(cv::max(src, 0.0f), 1.0f, clamped);
    cv::Mat hsv;
    cv::cvtColor(clamped, hsv, cv::COLOR_BGR2HSV);  // H in [0, 360)
    const float shift = float(delta * 360.0);
    for (int y = 0; y < hsv.rows; ++y) {
        cv::Vec3f* row = hsv.ptr<cv::Vec3f>(y);
        for (int x = 0; x < hsv.cols; ++x) {
            float h = row[x][0] + shift;
            h = std::fmod(h, 360.0f);
            if (h < 0) h += 360.0f;
            row[x][0] = h;
        }
    }
    cv::Mat back;
    cv::cvtColor(hsv, back, cv::COLOR_HSV2BGR);
    return from_mat(back);
}

Tensor<float> to_grayscale(const Tensor<float>& chw) {
    const int64_t plane = chw.dim(1) * chw.dim(2);
    Tensor<float> out(chw.shape());
    const float* r = chw.data();
    const float* g = r + plane;
    const float* b = g + plane;
    for (int64_t i = 0; i < plane; ++i) {
        const float y = 0.299f * r[i] + 0.587f * g[i] + 0.114f * b[i];
        out[i] = y;
        out[plane + i] = y;
        out[2 * plane + i] = y;
    }
    return out;
}

}  // namespace camfit
