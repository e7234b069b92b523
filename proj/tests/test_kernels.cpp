// Kernel correctness against naive references, plus the determinism contract:
// the OpenMP paths must produce bitwise-identical output to the serial paths.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "camfit/kernels.hpp"
#include "camfit/rng.hpp"
#include "camfit/tensor.hpp"

using namespace camfit;
namespace K = camfit::kernels;

namespace {

std::vector<double> random_vec(int64_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(size_t(n), 0.0);
    for (auto& x : v) x = rng.normal();
    return v;
}

// Plain three-loop reference GEMM.
void gemm_ref(const double* a, const double* b, double* c, int64_t M, int64_t Kd, int64_t N) {
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) {
            double s = 0;
            for (int64_t k = 0; k < Kd; ++k) s += a[i * Kd + k] * b[k * N + j];
            c[i * N + j] = s;
        }
}

// Direct convolution reference (no im2col).
void conv_ref(const double* x, const double* w, double* y, int64_t C, int64_t H, int64_t W,
              int64_t OC, int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t OH,
              int64_t OW) {
    for (int64_t oc = 0; oc < OC; ++oc)
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
                double s = 0;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < kh; ++i)
                        for (int64_t j = 0; j < kw; ++j) {
                            const int64_t h = oh * stride - pad + i;
                            const int64_t ww = ow * stride - pad + j;
                            if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                            s += x[(c * H + h) * W + ww] * w[((oc * C + c) * kh + i) * kw + j];
                        }
                y[(oc * OH + oh) * OW + ow] = s;
            }
}

template <typename F>
bool bitwise_equal_serial_parallel(int64_t out_n, F&& run) {
    std::vector<double> a(size_t(out_n), 0.0), b(size_t(out_n), 0.0);
    K::set_parallel(false);
    run(a.data());
    K::set_parallel(true);
    run(b.data());
    K::set_parallel(true);
    return std::memcmp(a.data(), b.data(), size_t(out_n) * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("gemm matches naive reference") {
    const int64_t M = 17, Kd = 23, N = 31;
    auto a = random_vec(M * Kd, 1), b = random_vec(Kd * N, 2);
    std::vector<double> c(size_t(M * N)), ref(size_t(M * N));
    K::gemm(a.data(), b.data(), c.data(), M, Kd, N);
    gemm_ref(a.data(), b.data(), ref.data(), M, Kd, N);
    for (size_t i = 0; i < ref.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("gemm accumulate adds on top") {
    const int64_t M = 3, Kd = 4, N = 5;
    auto a = random_vec(M * Kd, 3), b = random_vec(Kd * N, 4);
    std::vector<double> c(size_t(M * N), 1.0), ref(size_t(M * N));
    gemm_ref(a.data(), b.data(), ref.data(), M, Kd, N);
    K::gemm(a.data(), b.data(), c.data(), M, Kd, N, /*accumulate=*/true);
    for (size_t i = 0; i < ref.size(); ++i) CHECK(c[i] == doctest::Approx(1.0 + ref[i]));
}

TEST_CASE("transpose round-trips") {
    const int64_t M = 7, N = 11;
    auto a = random_vec(M * N, 5);
    std::vector<double> t(size_t(M * N)), back(size_t(M * N));
    K::transpose(a.data(), t.data(), M, N);
    K::transpose(t.data(), back.data(), N, M);
    CHECK(std::memcmp(a.data(), back.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("im2col + gemm equals direct convolution") {
    const int64_t C = 3, H = 9, W = 8, OC = 5, kh = 3, kw = 3, stride = 2, pad = 1;
    const int64_t OH = K::conv_out_dim(H, kh, stride, pad);
    const int64_t OW = K::conv_out_dim(W, kw, stride, pad);
    auto x = random_vec(C * H * W, 6), w = random_vec(OC * C * kh * kw, 7);
    std::vector<double> col(size_t(C * kh * kw * OH * OW));
    std::vector<double> y(size_t(OC * OH * OW)), ref(size_t(OC * OH * OW));
    K::im2col(x.data(), col.data(), C, H, W, kh, kw, stride, pad, OH, OW);
    K::gemm(w.data(), col.data(), y.data(), OC, C * kh * kw, OH * OW);
    conv_ref(x.data(), w.data(), ref.data(), C, H, W, OC, kh, kw, stride, pad, OH, OW);
    for (size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("col2im is the adjoint of im2col") {
    // <im2col(x), g> == <x, col2im(g)> for random g: the two linear maps are
    // transposes of each other, which is exactly what conv backward needs.
    const int64_t C = 2, H = 6, W = 5, kh = 3, kw = 2, stride = 2, pad = 1;
    const int64_t OH = K::conv_out_dim(H, kh, stride, pad);
    const int64_t OW = K::conv_out_dim(W, kw, stride, pad);
    const int64_t colsz = C * kh * kw * OH * OW;
    auto x = random_vec(C * H * W, 8), g = random_vec(colsz, 9);
    std::vector<double> col(size_t(colsz), 0.0), xadj(size_t(C * H * W), 0.0);
    K::im2col(x.data(), col.data(), C, H, W, kh, kw, stride, pad, OH, OW);
    K::col2im(g.data(), xadj.data(), C, H, W, kh, kw, stride, pad, OH, OW);
    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < colsz; ++i) lhs += col[size_t(i)] * g[size_t(i)];
    for (int64_t i = 0; i < C * H * W; ++i) rhs += x[size_t(i)] * xadj[size_t(i)];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("batch norm statistics and normalization") {
    const int64_t N = 4, C = 3, HW = 6;
    auto x = random_vec(N * C * HW, 10);
    std::vector<double> mean(size_t(C), 0.0), var(size_t(C), 0.0);
    K::bn_channel_stats(x.data(), N, C, HW, mean.data(), var.data());
    for (int64_t c = 0; c < C; ++c) {
        double m = 0;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < HW; ++i) m += x[size_t((n * C + c) * HW + i)];
        m /= double(N * HW);
        CHECK(mean[size_t(c)] == doctest::Approx(m));
    }
    std::vector<double> gamma(size_t(C), 1.0), beta(size_t(C), 0.0);
    std::vector<double> y(x.size()), xhat(x.size());
    K::bn_normalize(x.data(), y.data(), xhat.data(), N, C, HW, mean.data(), var.data(),
                    gamma.data(), beta.data(), 1e-5);
    // Normalized output has ~zero mean and ~unit variance per channel.
    for (int64_t c = 0; c < C; ++c) {
        double m = 0, v = 0;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < HW; ++i) {
                const double h = y[size_t((n * C + c) * HW + i)];
                m += h;
                v += h * h;
            }
        m /= double(N * HW);
        v = v / double(N * HW) - m * m;
        CHECK(m == doctest::Approx(0.0).epsilon(1e-10));
        CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("maxpool forward picks maxima and backward routes to argmax") {
    const int64_t N = 1, C = 1, H = 4, W = 4, k = 2, stride = 2, pad = 0;
    const int64_t OH = 2, OW = 2;
    std::vector<double> x = {1, 2, 5, 4,    //
                             3, 0, 1, 1,    //
                             7, 2, 0, 0,    //
                             1, 8, 0, 9};
    std::vector<double> y(4);
    std::vector<int64_t> arg(4);
    K::maxpool_forward(x.data(), y.data(), arg.data(), N, C, H, W, k, stride, pad, OH, OW);
    CHECK(y == std::vector<double>{3, 5, 8, 9});
    std::vector<double> dx(16, 0.0), dy = {1, 1, 1, 1};
    K::maxpool_backward(dy.data(), dx.data(), arg.data(), N, C, H * W, OH * OW);
    CHECK(dx[4] == 1.0);   // value 3
    CHECK(dx[2] == 1.0);   // value 5
    CHECK(dx[13] == 1.0);  // value 8
    CHECK(dx[15] == 1.0);  // value 9
}

TEST_CASE("softmax rows sums to one and respects temperature") {
    const int64_t R = 3, S = 7;
    auto x = random_vec(R * S, 11);
    std::vector<double> y(x.size());
    K::softmax_rows(x.data(), y.data(), R, S, 0.4);
    for (int64_t r = 0; r < R; ++r) {
        double sum = 0;
        for (int64_t i = 0; i < S; ++i) sum += y[size_t(r * S + i)];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    // Lower temperature sharpens: max prob grows.
    std::vector<double> y2(x.size());
    K::softmax_rows(x.data(), y2.data(), R, S, 0.1);
    for (int64_t r = 0; r < R; ++r) {
        double m1 = 0, m2 = 0;
        for (int64_t i = 0; i < S; ++i) {
            m1 = std::max(m1, y[size_t(r * S + i)]);
            m2 = std::max(m2, y2[size_t(r * S + i)]);
        }
        CHECK(m2 >= m1);
    }
}

TEST_CASE("parallel kernels are bitwise identical to serial") {
    // GEMM
    {
        const int64_t M = 33, Kd = 29, N = 41;
        auto a = random_vec(M * Kd, 20), b = random_vec(Kd * N, 21);
        CHECK(bitwise_equal_serial_parallel(
            M * N, [&](double* out) { K::gemm(a.data(), b.data(), out, M, Kd, N); }));
    }
    // Batch norm stats + normalize
    {
        const int64_t N = 8, C = 16, HW = 25;
        auto x = random_vec(N * C * HW, 22);
        std::vector<double> gamma(size_t(C), 1.3), beta(size_t(C), -0.2);
        CHECK(bitwise_equal_serial_parallel(N * C * HW, [&](double* out) {
            std::vector<double> mean(size_t(C), 0.0), var(size_t(C), 0.0), xhat(x.size(), 0.0);
            K::bn_channel_stats(x.data(), N, C, HW, mean.data(), var.data());
            K::bn_normalize(x.data(), out, xhat.data(), N, C, HW, mean.data(), var.data(),
                            gamma.data(), beta.data(), 1e-5);
        }));
    }
    // Softmax
    {
        const int64_t R = 13, S = 49;
        auto x = random_vec(R * S, 23);
        CHECK(bitwise_equal_serial_parallel(
            R * S, [&](double* out) { K::softmax_rows(x.data(), out, R, S, 0.4); }));
    }
    // GAP backward (accumulating kernel): zero the buffer inside the run.
    {
        const int64_t N = 6, C = 9, HW = 16;
        auto dy = random_vec(N * C, 24);
        CHECK(bitwise_equal_serial_parallel(N * C * HW, [&](double* out) {
            std::fill(out, out + N * C * HW, 0.0);
            K::gap_backward(dy.data(), out, N, C, HW);
        }));
    }
}

TEST_CASE("parallel flag round trip") {
    CHECK(K::parallel_flag());
    K::set_parallel(false);
    CHECK_FALSE(K::parallel_flag());
    K::set_parallel(true);
}
