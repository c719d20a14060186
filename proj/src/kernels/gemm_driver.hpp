#pragma once

// Blocked GEMM driver shared by the per-ISA translation units. Everything lives
// in an anonymous namespace so each variant gets its own copy compiled with
// that unit's target flags.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "plaqnet/kernels/kernels.hpp"

namespace plaqnet::kernels::detail {
namespace {

template <typename T>
inline void scale_output(std::size_t m, std::size_t n, T beta, T* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        T* row = c + i * ldc;
        if (beta == T{0}) {
            std::fill(row, row + n, T{0});
        } else {
            for (std::size_t j = 0; j < n; ++j) row[j] *= beta;
        }
    }
}

/// Writes alpha * tile + beta * C for the valid mv x nv corner of a tile.
template <typename T, std::size_t MR, std::size_t NR>
inline void store_tile(const T (&tile)[MR][NR], T* c, std::size_t ldc, T alpha, T beta, std::size_t mv,
                       std::size_t nv) {
    for (std::size_t i = 0; i < mv; ++i) {
        T* row = c + i * ldc;
        for (std::size_t j = 0; j < nv; ++j) {
            row[j] = beta == T{0} ? alpha * tile[i][j] : alpha * tile[i][j] + beta * row[j];
        }
    }
}

template <typename T, std::size_t MR>
inline void pack_a(Trans trans, const T* a, std::size_t lda, std::size_t row0, std::size_t mc, std::size_t col0,
                   std::size_t kc, T* out) {
    for (std::size_t ir = 0; ir < mc; ir += MR) {
        const std::size_t rows = std::min(MR, mc - ir);
        if (trans == Trans::No) {
            // Walk each source row contiguously; panel writes stride by MR.
            for (std::size_t i = 0; i < MR; ++i) {
                if (i < rows) {
                    const T* src = a + (row0 + ir + i) * lda + col0;
                    for (std::size_t p = 0; p < kc; ++p) out[p * MR + i] = src[p];
                } else {
                    for (std::size_t p = 0; p < kc; ++p) out[p * MR + i] = T{0};
                }
            }
        } else {
            for (std::size_t p = 0; p < kc; ++p) {
                const T* src = a + (col0 + p) * lda + row0 + ir;
                std::size_t i = 0;
                for (; i < rows; ++i) out[p * MR + i] = src[i];
                for (; i < MR; ++i) out[p * MR + i] = T{0};
            }
        }
        out += MR * kc;
    }
}

template <typename T, std::size_t NR>
inline void pack_b(Trans trans, const T* b, std::size_t ldb, std::size_t row0, std::size_t kc, std::size_t col0,
                   std::size_t nc, T* out) {
    for (std::size_t jr = 0; jr < nc; jr += NR) {
        const std::size_t cols = std::min(NR, nc - jr);
        if (trans == Trans::No) {
            for (std::size_t p = 0; p < kc; ++p) {
                const T* src = b + (row0 + p) * ldb + col0 + jr;
                std::size_t j = 0;
                for (; j < cols; ++j) out[p * NR + j] = src[j];
                for (; j < NR; ++j) out[p * NR + j] = T{0};
            }
        } else {
            for (std::size_t j = 0; j < NR; ++j) {
                if (j < cols) {
                    const T* src = b + (col0 + jr + j) * ldb + row0;
                    for (std::size_t p = 0; p < kc; ++p) out[p * NR + j] = src[p];
                } else {
                    for (std::size_t p = 0; p < kc; ++p) out[p * NR + j] = T{0};
                }
            }
        }
        out += NR * kc;
    }
}

template <typename T, std::size_t MR, std::size_t NR, std::size_t KC, std::size_t MC, std::size_t NC,
          typename MicroKernel>
void gemm_blocked(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n,
                  std::size_t k, T alpha, const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
                  std::size_t ldc, MicroKernel kernel) {
    static_assert(MC % MR == 0 && NC % NR == 0);
    if (m == 0 || n == 0) return;
    if (k == 0 || alpha == T{0}) {
        scale_output(m, n, beta, c, ldc);
        return;
    }
    thread_local std::vector<T> packed_a;
    thread_local std::vector<T> packed_b;
    packed_a.resize(MC * KC);
    packed_b.resize(KC * NC);

    for (std::size_t jc = 0; jc < n; jc += NC) {
        const std::size_t nc = std::min(NC, n - jc);
        for (std::size_t pc = 0; pc < k; pc += KC) {
            const std::size_t kc = std::min(KC, k - pc);
            pack_b<T, NR>(trans_b, b, ldb, pc, kc, jc, nc, packed_b.data());
            const T beta_block = pc == 0 ? beta : T{1};
            for (std::size_t ic = 0; ic < m; ic += MC) {
                const std::size_t mc = std::min(MC, m - ic);
                pack_a<T, MR>(trans_a, a, lda, ic, mc, pc, kc, packed_a.data());
                for (std::size_t jr = 0; jr < nc; jr += NR) {
                    const T* bp = packed_b.data() + jr * kc;
                    for (std::size_t ir = 0; ir < mc; ir += MR) {
                        kernel(kc, packed_a.data() + ir * kc, bp, c + (ic + ir) * ldc + jc + jr, ldc, alpha,
                               beta_block, std::min(MR, mc - ir), std::min(NR, nc - jr));
                    }
                }
            }
        }
    }
}

}  // namespace
}  // namespace plaqnet::kernels::detail
