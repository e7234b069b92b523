// Kernel benchmark: every kernel has one body driven either serially or by
// OpenMP over disjoint outputs, so the two paths must agree bitwise at any
// thread count. This tool times both paths on training-step-shaped work,
// verifies the equality it relies on, and prints a comparison table.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "camfit/kernels.hpp"
#include "camfit/rng.hpp"

using namespace camfit;

namespace {

double time_best_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up caches and page in buffers
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
}

std::vector<float> random_buf(int64_t n, uint64_t seed) {
    std::vector<float> v(static_cast<size_t>(n));
    Rng rng(seed);
    for (float& x : v) x = float(rng.uniform(-1.0, 1.0));
    return v;
}

struct BenchRow {
    std::string name;
    std::string work;
    double serial_ms = 0;
    double parallel_ms = 0;
    bool equal = false;
};

// Runs `fn` once per mode into `out`, checks bitwise agreement, then times.
BenchRow bench(const std::string& name, const std::string& work, int reps,
               std::vector<float>& out, const std::function<void()>& fn) {
    BenchRow row{name, work, 0, 0, false};

    kernels::set_parallel(false);
    fn();
    std::vector<float> serial_out = out;
    kernels::set_parallel(true);
    fn();
    row.equal = std::memcmp(serial_out.data(), out.data(),
                            out.size() * sizeof(float)) == 0;

    kernels::set_parallel(false);
    row.serial_ms = time_best_ms(fn, reps);
    kernels::set_parallel(true);
    row.parallel_ms = time_best_ms(fn, reps);
    return row;
}

}  // namespace

int main() {
    std::printf("threads available: %d\n\n", kernels::max_threads());
    std::vector<BenchRow> rows;
    const int reps = 5;

    {
        // Projector-sized GEMM.
        const int64_t M = 256, K = 256, N = 256;
        std::vector<float> a = random_buf(M * K, 1), b = random_buf(K * N, 2);
        std::vector<float> c(static_cast<size_t>(M * N));
        rows.push_back(bench("gemm f32", "256x256x256", reps, c, [&] {
            kernels::gemm(a.data(), b.data(), c.data(), M, K, N, false);
        }));
    }
    {
        // Convolution-shaped GEMM: batch 32 of 8x8 cells, 3x3 kernel over 32
        // channels into 64 (the im2col product inside the backbone).
        const int64_t M = 32 * 8 * 8, K = 32 * 9, N = 64;
        std::vector<float> a = random_buf(M * K, 3), b = random_buf(K * N, 4);
        std::vector<float> c(static_cast<size_t>(M * N));
        rows.push_back(bench("gemm f32 conv-shaped", "2048x288x64", reps, c, [&] {
            kernels::gemm(a.data(), b.data(), c.data(), M, K, N, false);
        }));
    }
    {
        const int64_t N = 32, C = 64, H = 16, W = 16, kh = 3, kw = 3;
        const int64_t OH = kernels::conv_out_dim(H, kh, 1, 1);
        const int64_t OW = kernels::conv_out_dim(W, kw, 1, 1);
        std::vector<float> x = random_buf(N * C * H * W, 5);
        std::vector<float> col(static_cast<size_t>(N * OH * OW * C * kh * kw));
        // Batched the way conv2d drives it: parallel over samples.
        rows.push_back(bench("im2col f32", "[32,64,16,16] k3", reps, col, [&] {
            kernels::parallel_for(N, [&](int64_t n) {
                kernels::im2col(x.data() + n * C * H * W,
                                col.data() + n * OH * OW * C * kh * kw, C, H, W, kh, kw, 1, 1,
                                OH, OW);
            });
        }));
    }
    {
        const int64_t N = 32, C = 64, HW = 256;
        std::vector<float> x = random_buf(N * C * HW, 6);
        std::vector<float> y(static_cast<size_t>(N * C * HW));
        std::vector<float> xhat(static_cast<size_t>(N * C * HW));
        std::vector<float> mean(C), var(C);
        std::vector<float> gamma(C, 1.0f), beta(C, 0.0f);
        rows.push_back(bench("batchnorm f32", "[32,64,256]", reps, y, [&] {
            kernels::bn_channel_stats(x.data(), N, C, HW, mean.data(), var.data());
            kernels::bn_normalize(x.data(), y.data(), xhat.data(), N, C, HW, mean.data(),
                                  var.data(), gamma.data(), beta.data(), 1e-5f);
        }));
    }
    {
        const int64_t N = 32, C = 64, H = 32, W = 32, k = 2, stride = 2;
        const int64_t OH = kernels::conv_out_dim(H, k, stride, 0);
        const int64_t OW = kernels::conv_out_dim(W, k, stride, 0);
        std::vector<float> x = random_buf(N * C * H * W, 7);
        std::vector<float> y(static_cast<size_t>(N * C * OH * OW));
        std::vector<int64_t> argmax(static_cast<size_t>(N * C * OH * OW));
        rows.push_back(bench("maxpool f32", "[32,64,32,32] 2x2", reps, y, [&] {
            kernels::maxpool_forward(x.data(), y.data(), argmax.data(), N, C, H, W, k, stride,
                                     0, OH, OW);
        }));
    }
    {
        const int64_t M = 1024, N = 1024;
        std::vector<float> a = random_buf(M * N, 8);
        std::vector<float> b(static_cast<size_t>(M * N));
        rows.push_back(bench("transpose f32", "1024x1024", reps, b, [&] {
            kernels::transpose(a.data(), b.data(), M, N);
        }));
    }

    std::printf("%-22s %-18s %11s %11s %9s  %s\n", "kernel", "work", "serial ms",
                "parallel ms", "speedup", "bitwise");
    bool all_equal = true;
    for (const BenchRow& r : rows) {
        std::printf("%-22s %-18s %11.3f %11.3f %8.2fx  %s\n", r.name.c_str(), r.work.c_str(),
                    r.serial_ms, r.parallel_ms, r.serial_ms / r.parallel_ms,
                    r.equal ? "equal" : "DIFFERS");
        all_equal &= r.equal;
    }
    if (!all_equal) {
        std::fprintf(stderr, "\nserial and parallel outputs differ; kernels are broken\n");
        return 1;
    }
    return 0;
}
