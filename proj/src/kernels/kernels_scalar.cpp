// Portable reference variants. Built with the baseline target flags only.

#include <cmath>

#include "gemm_driver.hpp"
#include "kernel_table.hpp"

namespace plaqnet::kernels::detail {
namespace {

template <typename T, std::size_t MR, std::size_t NR>
void micro_scalar(std::size_t kc, const T* a, const T* b, T* c, std::size_t ldc, T alpha, T beta, std::size_t mv,
                  std::size_t nv) {
    T acc[MR][NR] = {};
    for (std::size_t p = 0; p < kc; ++p) {
        for (std::size_t i = 0; i < MR; ++i) {
            const T av = a[i];
            for (std::size_t j = 0; j < NR; ++j) acc[i][j] += av * b[j];
        }
        a += MR;
        b += NR;
    }
    store_tile<T, MR, NR>(acc, c, ldc, alpha, beta, mv, nv);
}

template <typename T>
void gemm_impl(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a, std::size_t lda,
               const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
    gemm_blocked<T, 4, 8, 256, 128, 1024>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc,
                                           micro_scalar<T, 4, 8>);
}

template <typename T>
void relu_forward_impl(T* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > T{0} ? x[i] : T{0};
}

template <typename T>
void relu_backward_impl(const T* out, T* grad, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) grad[i] = out[i] > T{0} ? grad[i] : T{0};
}

template <typename T>
void scale_shift_impl(T* x, std::size_t n, T scale, T shift) {
    for (std::size_t i = 0; i < n; ++i) x[i] = std::fma(x[i], scale, shift);
}

template <typename T>
double sum_impl(const T* x, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(x[i]);
    return s;
}

template <typename T>
double sum_sq_dev_impl(const T* x, std::size_t n, double mean) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(x[i]) - mean;
        s += d * d;
    }
    return s;
}

template <typename T>
GradMoments grad_moments_impl(const T* dy, const T* x, std::size_t n, double mean) {
    GradMoments g;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(dy[i]);
        g.sum_dy += d;
        g.sum_dy_xc += d * (static_cast<double>(x[i]) - mean);
    }
    return g;
}

template <typename T>
void axpy_impl(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable table{
        Isa::Scalar,           gemm_impl<float>,       relu_forward_impl<float>,
        relu_backward_impl<float>, scale_shift_impl<float>, sum_impl<float>,
        sum_sq_dev_impl<float>, grad_moments_impl<float>, axpy_impl<float>,
    };
    return table;
}

void gemm_scalar(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
                 std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
    gemm_impl<double>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace plaqnet::kernels::detail

namespace plaqnet::kernels {

void relu_forward(std::span<double> x) { detail::relu_forward_impl(x.data(), x.size()); }
void relu_backward(std::span<const double> out, std::span<double> grad) {
    detail::relu_backward_impl(out.data(), grad.data(), grad.size());
}
void scale_shift(std::span<double> x, double scale, double shift) {
    detail::scale_shift_impl(x.data(), x.size(), scale, shift);
}
double sum(std::span<const double> x) { return detail::sum_impl(x.data(), x.size()); }
double sum_sq_dev(std::span<const double> x, double mean) { return detail::sum_sq_dev_impl(x.data(), x.size(), mean); }
GradMoments grad_moments(std::span<const double> dy, std::span<const double> x, double mean) {
    return detail::grad_moments_impl(dy.data(), x.data(), dy.size(), mean);
}
void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    detail::axpy_impl(alpha, x.data(), y.data(), y.size());
}

}  // namespace plaqnet::kernels
