#pragma once

// Dense compute kernels, written once per operation as a per-output-element
// body and driven either serially or with OpenMP. Parallelism is only ever
// over disjoint output elements and every accumulation runs in a fixed serial
// order inside its element, so the parallel results are bitwise identical to
// the serial ones at any thread count. Tests assert that equality; the
// benchmark tool compares throughput.
//
// Layout conventions: row-major throughout; images NCHW; GEMM operands are
// plain row-major matrices. The i-k-j loop order keeps the inner loop free of
// reductions so it vectorizes without -ffast-math.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "camfit/common.hpp"

namespace camfit::kernels {

// ---------------------------------------------------------------------------
// Parallel dispatch
// ---------------------------------------------------------------------------

// Global switch so tests and the benchmark can force the serial path.
inline bool& parallel_flag() {
    static bool enabled = true;
    return enabled;
}
inline void set_parallel(bool on) { parallel_flag() = on; }

inline bool in_parallel_region() {
#ifdef _OPENMP
    return omp_in_parallel() != 0;
#else
    return false;
#endif
}

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// Run body(i) for i in [0, n). The body must write only to state owned by
// index i. Calls from inside an existing parallel region fall back to the
// serial loop, so nested kernels never oversubscribe.
template <typename F>
inline void parallel_for(int64_t n, F&& body) {
#ifdef _OPENMP
    if (parallel_flag() && !in_parallel_region() && n > 1) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) body(i);
        return;
    }
#endif
    for (int64_t i = 0; i < n; ++i) body(i);
}

// ---------------------------------------------------------------------------
// GEMM and friends
// ---------------------------------------------------------------------------

// One output row of C[M,N] (+)= A[M,K] * B[K,N].
template <typename T>
inline void gemm_row(const T* a_row, const T* b, T* c_row, int64_t K, int64_t N, bool accumulate) {
    if (!accumulate) std::fill(c_row, c_row + N, T(0));
    for (int64_t k = 0; k < K; ++k) {
        const T ak = a_row[k];
        const T* bk = b + k * N;
        for (int64_t j = 0; j < N; ++j) c_row[j] += ak * bk[j];
    }
}

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
inline void gemm(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N,
                 bool accumulate = false) {
    parallel_for(M, [&](int64_t i) { gemm_row(a + i * K, b, c + i * N, K, N, accumulate); });
}

// B[N,M] = A[M,N]^T
template <typename T>
inline void transpose(const T* a, T* b, int64_t M, int64_t N) {
    parallel_for(N, [&](int64_t j) {
        for (int64_t i = 0; i < M; ++i) b[j * M + i] = a[i * N + j];
    });
}

// y[i] (+)= alpha * x[i]
template <typename T>
inline void axpy(int64_t n, T alpha, const T* x, T* y) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// ---------------------------------------------------------------------------
// im2col / col2im (single sample)
// ---------------------------------------------------------------------------

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// x: [C,H,W] -> col: [C*kh*kw, OH*OW]; zero padding.
template <typename T>
inline void im2col(const T* x, T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                   int64_t stride, int64_t pad, int64_t OH, int64_t OW) {
    const int64_t S = OH * OW;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t i = 0; i < kh; ++i) {
            for (int64_t j = 0; j < kw; ++j) {
                T* dst = col + ((c * kh + i) * kw + j) * S;
                for (int64_t oh = 0; oh < OH; ++oh) {
                    const int64_t h = oh * stride - pad + i;
                    if (h < 0 || h >= H) {
                        std::fill(dst + oh * OW, dst + (oh + 1) * OW, T(0));
                        continue;
                    }
                    const T* src = x + (c * H + h) * W;
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        const int64_t w = ow * stride - pad + j;
                        dst[oh * OW + ow] = (w < 0 || w >= W) ? T(0) : src[w];
                    }
                }
            }
        }
    }
}

// col: [C*kh*kw, OH*OW] scattered back (accumulated) into dx: [C,H,W].
// Serial: output elements overlap across patches, so this is a reduction.
template <typename T>
inline void col2im(const T* col, T* dx, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                   int64_t stride, int64_t pad, int64_t OH, int64_t OW) {
    const int64_t S = OH * OW;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t i = 0; i < kh; ++i) {
            for (int64_t j = 0; j < kw; ++j) {
                const T* src = col + ((c * kh + i) * kw + j) * S;
                for (int64_t oh = 0; oh < OH; ++oh) {
                    const int64_t h = oh * stride - pad + i;
                    if (h < 0 || h >= H) continue;
                    T* dst = dx + (c * H + h) * W;
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        const int64_t w = ow * stride - pad + j;
                        if (w >= 0 && w < W) dst[w] += src[oh * OW + ow];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise / activation
// ---------------------------------------------------------------------------

template <typename T>
inline void relu_forward(int64_t n, const T* x, T* y) {
    parallel_for(n, [&](int64_t i) { y[i] = x[i] > T(0) ? x[i] : T(0); });
}

template <typename T>
inline void relu_backward(int64_t n, const T* x, const T* dy, T* dx) {
    parallel_for(n, [&](int64_t i) { dx[i] += x[i] > T(0) ? dy[i] : T(0); });
}

// y: [N,C,H,W] += bias[C]
template <typename T>
inline void add_bias_nchw(T* y, const T* bias, int64_t N, int64_t C, int64_t HW) {
    parallel_for(N * C, [&](int64_t nc) {
        const T b = bias[nc % C];
        T* row = y + nc * HW;
        for (int64_t i = 0; i < HW; ++i) row[i] += b;
    });
}

// y: [N,D] += bias[D]
template <typename T>
inline void add_bias_rows(T* y, const T* bias, int64_t N, int64_t D) {
    parallel_for(N, [&](int64_t i) {
        T* row = y + i * D;
        for (int64_t j = 0; j < D; ++j) row[j] += bias[j];
    });
}

// ---------------------------------------------------------------------------
// Batch norm (NCHW over N*H*W per channel; 1-d inputs use HW = 1)
// ---------------------------------------------------------------------------

template <typename T>
inline void bn_channel_stats(const T* x, int64_t N, int64_t C, int64_t HW, T* mean, T* var) {
    parallel_for(C, [&](int64_t c) {
        // Fixed serial accumulation order: samples outer, spatial inner.
        T sum = 0, sumsq = 0;
        for (int64_t n = 0; n < N; ++n) {
            const T* row = x + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
                sum += row[i];
                sumsq += row[i] * row[i];
            }
        }
        const T m = sum / T(N * HW);
        mean[c] = m;
        var[c] = sumsq / T(N * HW) - m * m;  // biased, matching normalization
    });
}

// y = gamma * (x - mean) / sqrt(var + eps) + beta; also emits xhat for backward.
template <typename T>
inline void bn_normalize(const T* x, T* y, T* xhat, int64_t N, int64_t C, int64_t HW,
                         const T* mean, const T* var, const T* gamma, const T* beta, T eps) {
    parallel_for(N * C, [&](int64_t nc) {
        const int64_t c = nc % C;
        const T inv = T(1) / std::sqrt(var[c] + eps);
        const T m = mean[c], g = gamma[c], b = beta[c];
        const T* xr = x + nc * HW;
        T* yr = y + nc * HW;
        T* hr = xhat + nc * HW;
        for (int64_t i = 0; i < HW; ++i) {
            const T h = (xr[i] - m) * inv;
            hr[i] = h;
            yr[i] = g * h + b;
        }
    });
}

// Training-mode backward through the batch statistics.
// dx += gamma*inv/M * (M*dy - sum(dy) - xhat * sum(dy*xhat)); dgamma/dbeta accumulated.
template <typename T>
inline void bn_backward(const T* xhat, const T* dy, T* dx, T* dgamma, T* dbeta, int64_t N,
                        int64_t C, int64_t HW, const T* var, const T* gamma, T eps) {
    const int64_t M = N * HW;
    parallel_for(C, [&](int64_t c) {
        T sum_dy = 0, sum_dyh = 0;
        for (int64_t n = 0; n < N; ++n) {
            const T* dyr = dy + (n * C + c) * HW;
            const T* hr = xhat + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
                sum_dy += dyr[i];
                sum_dyh += dyr[i] * hr[i];
            }
        }
        dgamma[c] += sum_dyh;
        dbeta[c] += sum_dy;
        const T inv = T(1) / std::sqrt(var[c] + eps);
        const T scale = gamma[c] * inv / T(M);
        for (int64_t n = 0; n < N; ++n) {
            const T* dyr = dy + (n * C + c) * HW;
            const T* hr = xhat + (n * C + c) * HW;
            T* dxr = dx + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i)
                dxr[i] += scale * (T(M) * dyr[i] - sum_dy - hr[i] * sum_dyh);
        }
    });
}

// Inference-mode backward (running stats are constants).
template <typename T>
inline void bn_backward_eval(const T* dy, T* dx, T* dgamma, T* dbeta, const T* xhat, int64_t N,
                             int64_t C, int64_t HW, const T* var, const T* gamma, T eps) {
    parallel_for(C, [&](int64_t c) {
        const T scale = gamma[c] / std::sqrt(var[c] + eps);
        T sum_dy = 0, sum_dyh = 0;
        for (int64_t n = 0; n < N; ++n) {
            const T* dyr = dy + (n * C + c) * HW;
            const T* hr = xhat + (n * C + c) * HW;
            T* dxr = dx + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
                sum_dy += dyr[i];
                sum_dyh += dyr[i] * hr[i];
                dxr[i] += scale * dyr[i];
            }
        }
        dgamma[c] += sum_dyh;
        dbeta[c] += sum_dy;
    });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// Max pool with argmax capture; pad regions count as -inf.
template <typename T>
inline void maxpool_forward(const T* x, T* y, int64_t* argmax, int64_t N, int64_t C, int64_t H,
                            int64_t W, int64_t k, int64_t stride, int64_t pad, int64_t OH,
                            int64_t OW) {
    parallel_for(N * C, [&](int64_t nc) {
        const T* xp = x + nc * H * W;
        T* yp = y + nc * OH * OW;
        int64_t* ap = argmax + nc * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh) {
            for (int64_t ow = 0; ow < OW; ++ow) {
                T best = -std::numeric_limits<T>::infinity();
                int64_t best_idx = -1;
                for (int64_t i = 0; i < k; ++i) {
                    const int64_t h = oh * stride - pad + i;
                    if (h < 0 || h >= H) continue;
                    for (int64_t j = 0; j < k; ++j) {
                        const int64_t w = ow * stride - pad + j;
                        if (w < 0 || w >= W) continue;
                        const T v = xp[h * W + w];
                        if (v > best) {  // strict: first max wins ties
                            best = v;
                            best_idx = h * W + w;
                        }
                    }
                }
                yp[oh * OW + ow] = best;
                ap[oh * OW + ow] = best_idx;
            }
        }
    });
}

template <typename T>
inline void maxpool_backward(const T* dy, T* dx, const int64_t* argmax, int64_t N, int64_t C,
                             int64_t HW, int64_t OHW) {
    parallel_for(N * C, [&](int64_t nc) {
        const T* dyp = dy + nc * OHW;
        T* dxp = dx + nc * HW;
        const int64_t* ap = argmax + nc * OHW;
        for (int64_t i = 0; i < OHW; ++i)
            if (ap[i] >= 0) dxp[ap[i]] += dyp[i];
    });
}

// Global average pool: [N,C,H,W] -> [N,C].
template <typename T>
inline void gap_forward(const T* x, T* y, int64_t N, int64_t C, int64_t HW) {
    parallel_for(N * C, [&](int64_t nc) {
        const T* xp = x + nc * HW;
        T sum = 0;
        for (int64_t i = 0; i < HW; ++i) sum += xp[i];
        y[nc] = sum / T(HW);
    });
}

template <typename T>
inline void gap_backward(const T* dy, T* dx, int64_t N, int64_t C, int64_t HW) {
    parallel_for(N * C, [&](int64_t nc) {
        const T g = dy[nc] / T(HW);
        T* dxp = dx + nc * HW;
        for (int64_t i = 0; i < HW; ++i) dxp[i] += g;
    });
}

// ---------------------------------------------------------------------------
// Row softmax
// ---------------------------------------------------------------------------

// y[r,:] = softmax(x[r,:] / tau), max-subtracted for stability.
template <typename T>
inline void softmax_rows(const T* x, T* y, int64_t R, int64_t S, T tau) {
    parallel_for(R, [&](int64_t r) {
        const T* xr = x + r * S;
        T* yr = y + r * S;
        T mx = xr[0];
        for (int64_t i = 1; i < S; ++i) mx = std::max(mx, xr[i]);
        T sum = 0;
        for (int64_t i = 0; i < S; ++i) {
            yr[i] = std::exp((xr[i] - mx) / tau);
            sum += yr[i];
        }
        const T inv = T(1) / sum;
        for (int64_t i = 0; i < S; ++i) yr[i] *= inv;
    });
}

}  // namespace camfit::kernels
