#pragma once

#include <cstddef>

#include "plaqnet/kernels/kernels.hpp"

namespace plaqnet::kernels::detail {

/// Float entry points of one instruction-set variant.
struct KernelTable {
    Isa isa;
    void (*gemm)(Trans, Trans, std::size_t, std::size_t, std::size_t, float, const float*, std::size_t,
                 const float*, std::size_t, float, float*, std::size_t);
    void (*relu_forward)(float*, std::size_t);
    void (*relu_backward)(const float*, float*, std::size_t);
    void (*scale_shift)(float*, std::size_t, float, float);
    double (*sum)(const float*, std::size_t);
    double (*sum_sq_dev)(const float*, std::size_t, double);
    GradMoments (*grad_moments)(const float*, const float*, std::size_t, double);
    void (*axpy)(float, const float*, float*, std::size_t);
};

const KernelTable& scalar_table();

/// nullptr when the variant was not compiled for this target.
const KernelTable* avx2_table();
const KernelTable* avx512_table();

// Double-precision scalar kernels (no SIMD variants).
void gemm_scalar(Trans, Trans, std::size_t, std::size_t, std::size_t, double, const double*, std::size_t,
                 const double*, std::size_t, double, double*, std::size_t);

}  // namespace plaqnet::kernels::detail
