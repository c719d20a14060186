#pragma once

// Inner-loop kernels behind the layer primitives. Every kernel has a scalar
// reference implementation; x86 builds additionally carry AVX2+FMA and
// AVX-512 variants, one translation unit each, picked at runtime from CPUID.
// The PLAQNET_ISA environment variable (scalar|avx2|avx512) caps the choice.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace plaqnet::kernels {

enum class Isa { Scalar, Avx2, Avx512 };

enum class Trans { No, Yes };

std::string_view isa_name(Isa isa) noexcept;

/// True when the variant was compiled in and the CPU can run it.
bool isa_supported(Isa isa) noexcept;

std::vector<Isa> supported_isas();

/// Widest supported variant, capped by PLAQNET_ISA when set.
Isa best_isa();

Isa active_isa() noexcept;

/// Selects the variant used by subsequent float kernel calls. Throws Usage
/// when the variant cannot run on this machine.
void set_active_isa(Isa isa);

class ScopedIsa {
public:
    explicit ScopedIsa(Isa isa) : previous_(active_isa()) { set_active_isa(isa); }
    ~ScopedIsa() { set_active_isa(previous_); }
    ScopedIsa(const ScopedIsa&) = delete;
    ScopedIsa& operator=(const ScopedIsa&) = delete;

private:
    Isa previous_;
};

/// C = alpha * op(A) * op(B) + beta * C over row-major storage, where op(A) is
/// m x k and op(B) is k x n. C is not read when beta == 0.
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
          std::size_t ldc);

/// Double precision always runs the scalar blocked path.
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
          std::size_t ldc);

/// Plain triple loop; the oracle the blocked variants are tested against.
template <typename T>
void gemm_reference(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
                    const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc{0};
            for (std::size_t p = 0; p < k; ++p) {
                const T av = trans_a == Trans::No ? a[i * lda + p] : a[p * lda + i];
                const T bv = trans_b == Trans::No ? b[p * ldb + j] : b[j * ldb + p];
                acc += av * bv;
            }
            T& out = c[i * ldc + j];
            out = beta == T{0} ? alpha * acc : alpha * acc + beta * out;
        }
    }
}

// Elementwise and reduction kernels. Reductions accumulate in double.

void relu_forward(std::span<float> x);
void relu_forward(std::span<double> x);

/// grad[i] = out[i] > 0 ? grad[i] : 0
void relu_backward(std::span<const float> out, std::span<float> grad);
void relu_backward(std::span<const double> out, std::span<double> grad);

/// x[i] = fma(x[i], scale, shift)
void scale_shift(std::span<float> x, float scale, float shift);
void scale_shift(std::span<double> x, double scale, double shift);

double sum(std::span<const float> x);
double sum(std::span<const double> x);

/// Sum of (x[i] - mean)^2.
double sum_sq_dev(std::span<const float> x, double mean);
double sum_sq_dev(std::span<const double> x, double mean);

struct GradMoments {
    double sum_dy = 0.0;
    double sum_dy_xc = 0.0;  // sum of dy * (x - mean)
};

GradMoments grad_moments(std::span<const float> dy, std::span<const float> x, double mean);
GradMoments grad_moments(std::span<const double> dy, std::span<const double> x, double mean);

/// y[i] += alpha * x[i]
void axpy(float alpha, std::span<const float> x, std::span<float> y);
void axpy(double alpha, std::span<const double> x, std::span<double> y);

}  // namespace plaqnet::kernels
