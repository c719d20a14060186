// AVX-512F variants. Compiled with -mavx512f -mavx2 -mfma; entered only after a
// CPUID check.

#include "kernel_table.hpp"

#if defined(__x86_64__) && defined(PLAQNET_HAVE_AVX512)

#include <immintrin.h>

#include "gemm_driver.hpp"

namespace plaqnet::kernels::detail {
namespace {

constexpr std::size_t kMr = 8;
constexpr std::size_t kNr = 32;

void micro_avx512(std::size_t kc, const float* a, const float* b, float* c, std::size_t ldc, float alpha,
                  float beta, std::size_t mv, std::size_t nv) {
    __m512 acc[kMr][2];
#pragma GCC unroll 8
    for (std::size_t i = 0; i < kMr; ++i) acc[i][0] = acc[i][1] = _mm512_setzero_ps();
    for (std::size_t p = 0; p < kc; ++p) {
        const __m512 b0 = _mm512_loadu_ps(b);
        const __m512 b1 = _mm512_loadu_ps(b + 16);
#pragma GCC unroll 8
        for (std::size_t i = 0; i < kMr; ++i) {
            const __m512 av = _mm512_set1_ps(a[i]);
            acc[i][0] = _mm512_fmadd_ps(av, b0, acc[i][0]);
            acc[i][1] = _mm512_fmadd_ps(av, b1, acc[i][1]);
        }
        a += kMr;
        b += kNr;
    }
    if (mv == kMr && nv == kNr) {
        const __m512 va = _mm512_set1_ps(alpha);
        const __m512 vb = _mm512_set1_ps(beta);
#pragma GCC unroll 8
        for (std::size_t i = 0; i < kMr; ++i) {
            float* row = c + i * ldc;
            __m512 r0 = _mm512_mul_ps(va, acc[i][0]);
            __m512 r1 = _mm512_mul_ps(va, acc[i][1]);
            if (beta != 0.0f) {
                r0 = _mm512_fmadd_ps(vb, _mm512_loadu_ps(row), r0);
                r1 = _mm512_fmadd_ps(vb, _mm512_loadu_ps(row + 16), r1);
            }
            _mm512_storeu_ps(row, r0);
            _mm512_storeu_ps(row + 16, r1);
        }
        return;
    }
    float tile[kMr][kNr];
    for (std::size_t i = 0; i < kMr; ++i) {
        _mm512_storeu_ps(tile[i], acc[i][0]);
        _mm512_storeu_ps(tile[i] + 16, acc[i][1]);
    }
    store_tile<float, kMr, kNr>(tile, c, ldc, alpha, beta, mv, nv);
}

void gemm_avx512(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
                 std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
    gemm_blocked<float, kMr, kNr, 256, 128, 1024>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc,
                                                   micro_avx512);
}

void relu_forward_avx512(float* x, std::size_t n) {
    const __m512 zero = _mm512_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) _mm512_storeu_ps(x + i, _mm512_max_ps(_mm512_loadu_ps(x + i), zero));
    for (; i < n; ++i) x[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward_avx512(const float* out, float* grad, std::size_t n) {
    const __m512 zero = _mm512_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        const __mmask16 keep = _mm512_cmp_ps_mask(_mm512_loadu_ps(out + i), zero, _CMP_GT_OQ);
        _mm512_storeu_ps(grad + i, _mm512_maskz_mov_ps(keep, _mm512_loadu_ps(grad + i)));
    }
    for (; i < n; ++i) grad[i] = out[i] > 0.0f ? grad[i] : 0.0f;
}

void scale_shift_avx512(float* x, std::size_t n, float scale, float shift) {
    const __m512 s = _mm512_set1_ps(scale);
    const __m512 t = _mm512_set1_ps(shift);
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) _mm512_storeu_ps(x + i, _mm512_fmadd_ps(_mm512_loadu_ps(x + i), s, t));
    for (; i < n; ++i) x[i] = __builtin_fmaf(x[i], scale, shift);
}

double sum_avx512(const float* x, std::size_t n) {
    __m512d acc0 = _mm512_setzero_pd();
    __m512d acc1 = _mm512_setzero_pd();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm512_add_pd(acc0, _mm512_cvtps_pd(_mm256_loadu_ps(x + i)));
        acc1 = _mm512_add_pd(acc1, _mm512_cvtps_pd(_mm256_loadu_ps(x + i + 8)));
    }
    double s = _mm512_reduce_add_pd(_mm512_add_pd(acc0, acc1));
    for (; i < n; ++i) s += static_cast<double>(x[i]);
    return s;
}

double sum_sq_dev_avx512(const float* x, std::size_t n, double mean) {
    const __m512d m = _mm512_set1_pd(mean);
    __m512d acc0 = _mm512_setzero_pd();
    __m512d acc1 = _mm512_setzero_pd();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        const __m512d d0 = _mm512_sub_pd(_mm512_cvtps_pd(_mm256_loadu_ps(x + i)), m);
        const __m512d d1 = _mm512_sub_pd(_mm512_cvtps_pd(_mm256_loadu_ps(x + i + 8)), m);
        acc0 = _mm512_fmadd_pd(d0, d0, acc0);
        acc1 = _mm512_fmadd_pd(d1, d1, acc1);
    }
    double s = _mm512_reduce_add_pd(_mm512_add_pd(acc0, acc1));
    for (; i < n; ++i) {
        const double d = static_cast<double>(x[i]) - mean;
        s += d * d;
    }
    return s;
}

GradMoments grad_moments_avx512(const float* dy, const float* x, std::size_t n, double mean) {
    const __m512d m = _mm512_set1_pd(mean);
    __m512d s_dy = _mm512_setzero_pd();
    __m512d s_xc = _mm512_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m512d g = _mm512_cvtps_pd(_mm256_loadu_ps(dy + i));
        const __m512d xc = _mm512_sub_pd(_mm512_cvtps_pd(_mm256_loadu_ps(x + i)), m);
        s_dy = _mm512_add_pd(s_dy, g);
        s_xc = _mm512_fmadd_pd(g, xc, s_xc);
    }
    GradMoments out{_mm512_reduce_add_pd(s_dy), _mm512_reduce_add_pd(s_xc)};
    for (; i < n; ++i) {
        const double g = static_cast<double>(dy[i]);
        out.sum_dy += g;
        out.sum_dy_xc += g * (static_cast<double>(x[i]) - mean);
    }
    return out;
}

void axpy_avx512(float alpha, const float* x, float* y, std::size_t n) {
    const __m512 a = _mm512_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        _mm512_storeu_ps(y + i, _mm512_fmadd_ps(a, _mm512_loadu_ps(x + i), _mm512_loadu_ps(y + i)));
    }
    for (; i < n; ++i) y[i] = __builtin_fmaf(alpha, x[i], y[i]);
}

}  // namespace

const KernelTable* avx512_table() {
    static const KernelTable table{
        Isa::Avx512,        gemm_avx512,       relu_forward_avx512,     relu_backward_avx512, scale_shift_avx512,
        sum_avx512,         sum_sq_dev_avx512, grad_moments_avx512,     axpy_avx512,
    };
    return &table;
}

}  // namespace plaqnet::kernels::detail

#else

namespace plaqnet::kernels::detail {
const KernelTable* avx512_table() { return nullptr; }
}  // namespace plaqnet::kernels::detail

#endif
