// AVX2 + FMA variants. This unit is compiled with -mavx2 -mfma and must only
// be entered after a CPUID check.

#include "kernel_table.hpp"

#if defined(__x86_64__) && defined(PLAQNET_HAVE_AVX2)

#include <immintrin.h>

#include "gemm_driver.hpp"

namespace plaqnet::kernels::detail {
namespace {

constexpr std::size_t kMr = 6;
constexpr std::size_t kNr = 16;

void micro_avx2(std::size_t kc, const float* a, const float* b, float* c, std::size_t ldc, float alpha, float beta,
                std::size_t mv, std::size_t nv) {
    __m256 acc[kMr][2];
#pragma GCC unroll 6
    for (std::size_t i = 0; i < kMr; ++i) acc[i][0] = acc[i][1] = _mm256_setzero_ps();
    for (std::size_t p = 0; p < kc; ++p) {
        const __m256 b0 = _mm256_loadu_ps(b);
        const __m256 b1 = _mm256_loadu_ps(b + 8);
#pragma GCC unroll 6
        for (std::size_t i = 0; i < kMr; ++i) {
            const __m256 av = _mm256_broadcast_ss(a + i);
            acc[i][0] = _mm256_fmadd_ps(av, b0, acc[i][0]);
            acc[i][1] = _mm256_fmadd_ps(av, b1, acc[i][1]);
        }
        a += kMr;
        b += kNr;
    }
    if (mv == kMr && nv == kNr) {
        const __m256 va = _mm256_set1_ps(alpha);
        const __m256 vb = _mm256_set1_ps(beta);
#pragma GCC unroll 6
        for (std::size_t i = 0; i < kMr; ++i) {
            float* row = c + i * ldc;
            __m256 r0 = _mm256_mul_ps(va, acc[i][0]);
            __m256 r1 = _mm256_mul_ps(va, acc[i][1]);
            if (beta != 0.0f) {
                r0 = _mm256_fmadd_ps(vb, _mm256_loadu_ps(row), r0);
                r1 = _mm256_fmadd_ps(vb, _mm256_loadu_ps(row + 8), r1);
            }
            _mm256_storeu_ps(row, r0);
            _mm256_storeu_ps(row + 8, r1);
        }
        return;
    }
    float tile[kMr][kNr];
    for (std::size_t i = 0; i < kMr; ++i) {
        _mm256_storeu_ps(tile[i], acc[i][0]);
        _mm256_storeu_ps(tile[i] + 8, acc[i][1]);
    }
    store_tile<float, kMr, kNr>(tile, c, ldc, alpha, beta, mv, nv);
}

void gemm_avx2(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
               std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
    gemm_blocked<float, kMr, kNr, 256, 120, 1024>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc, micro_avx2);
}

double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

void relu_forward_avx2(float* x, std::size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm256_storeu_ps(x + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
    for (; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward_avx2(const float* out, float* grad, std::size_t n) {
    const __m256 zero = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 keep = _mm256_cmp_ps(_mm256_loadu_ps(out + i), zero, _CMP_GT_OQ);
        _mm256_storeu_ps(grad + i, _mm256_and_ps(keep, _mm256_loadu_ps(grad + i)));
    }
    for (; i < n; ++i) grad[i] = out[i] > 0.0f ? grad[i] : 0.0f;
}

void scale_shift_avx2(float* x, std::size_t n, float scale, float shift) {
    const __m256 s = _mm256_set1_ps(scale);
    const __m256 t = _mm256_set1_ps(shift);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm256_storeu_ps(x + i, _mm256_fmadd_ps(_mm256_loadu_ps(x + i), s, t));
    for (; i < n; ++i) x[i] = __builtin_fmaf(x[i], scale, shift);
}

double sum_avx2(const float* x, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_add_pd(acc0, _mm256_cvtps_pd(_mm_loadu_ps(x + i)));
        acc1 = _mm256_add_pd(acc1, _mm256_cvtps_pd(_mm_loadu_ps(x + i + 4)));
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += static_cast<double>(x[i]);
    return s;
}

double sum_sq_dev_avx2(const float* x, std::size_t n, double mean) {
    const __m256d m = _mm256_set1_pd(mean);
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256d d0 = _mm256_sub_pd(_mm256_cvtps_pd(_mm_loadu_ps(x + i)), m);
        const __m256d d1 = _mm256_sub_pd(_mm256_cvtps_pd(_mm_loadu_ps(x + i + 4)), m);
        acc0 = _mm256_fmadd_pd(d0, d0, acc0);
        acc1 = _mm256_fmadd_pd(d1, d1, acc1);
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) {
        const double d = static_cast<double>(x[i]) - mean;
        s += d * d;
    }
    return s;
}

GradMoments grad_moments_avx2(const float* dy, const float* x, std::size_t n, double mean) {
    const __m256d m = _mm256_set1_pd(mean);
    __m256d s_dy = _mm256_setzero_pd();
    __m256d s_xc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d g = _mm256_cvtps_pd(_mm_loadu_ps(dy + i));
        const __m256d xc = _mm256_sub_pd(_mm256_cvtps_pd(_mm_loadu_ps(x + i)), m);
        s_dy = _mm256_add_pd(s_dy, g);
        s_xc = _mm256_fmadd_pd(g, xc, s_xc);
    }
    GradMoments out{hsum(s_dy), hsum(s_xc)};
    for (; i < n; ++i) {
        const double g = static_cast<double>(dy[i]);
        out.sum_dy += g;
        out.sum_dy_xc += g * (static_cast<double>(x[i]) - mean);
    }
    return out;
}

void axpy_avx2(float alpha, const float* x, float* y, std::size_t n) {
    const __m256 a = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(a, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    }
    for (; i < n; ++i) y[i] = __builtin_fmaf(alpha, x[i], y[i]);
}

}  // namespace

const KernelTable* avx2_table() {
    static const KernelTable table{
        Isa::Avx2,        gemm_avx2,       relu_forward_avx2,       relu_backward_avx2, scale_shift_avx2,
        sum_avx2,         sum_sq_dev_avx2, grad_moments_avx2,       axpy_avx2,
    };
    return &table;
}

}  // namespace plaqnet::kernels::detail

#else

namespace plaqnet::kernels::detail {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace plaqnet::kernels::detail

#endif
