#include <atomic>
#include <cstdlib>
#include <string>

#include "kernel_table.hpp"
#include "plaqnet/error.hpp"

namespace plaqnet::kernels {
namespace {

const detail::KernelTable* table_for(Isa isa) {
    switch (isa) {
        case Isa::Scalar:
            return &detail::scalar_table();
        case Isa::Avx2:
            return detail::avx2_table();
        case Isa::Avx512:
            return detail::avx512_table();
    }
    return nullptr;
}

bool cpu_has(Isa isa) {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
    switch (isa) {
        case Isa::Scalar:
            return true;
        case Isa::Avx2:
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
        case Isa::Avx512:
            return __builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx2") &&
                   __builtin_cpu_supports("fma");
    }
    return false;
#else
    return isa == Isa::Scalar;
#endif
}

std::atomic<const detail::KernelTable*>& active_slot() {
    static std::atomic<const detail::KernelTable*> slot{table_for(best_isa())};
    return slot;
}

const detail::KernelTable& active() { return *active_slot().load(std::memory_order_relaxed); }

}  // namespace

std::string_view isa_name(Isa isa) noexcept {
    switch (isa) {
        case Isa::Scalar:
            return "scalar";
        case Isa::Avx2:
            return "avx2";
        case Isa::Avx512:
            return "avx512";
    }
    return "unknown";
}

bool isa_supported(Isa isa) noexcept { return table_for(isa) != nullptr && cpu_has(isa); }

std::vector<Isa> supported_isas() {
    std::vector<Isa> out;
    for (Isa isa : {Isa::Scalar, Isa::Avx2, Isa::Avx512}) {
        if (isa_supported(isa)) out.push_back(isa);
    }
    return out;
}

Isa best_isa() {
    Isa cap = Isa::Avx512;
    if (const char* env = std::getenv("PLAQNET_ISA")) {
        const std::string v(env);
        if (v == "scalar") cap = Isa::Scalar;
        else if (v == "avx2") cap = Isa::Avx2;
    }
    for (Isa isa : {Isa::Avx512, Isa::Avx2}) {
        if (static_cast<int>(isa) <= static_cast<int>(cap) && isa_supported(isa)) return isa;
    }
    return Isa::Scalar;
}

Isa active_isa() noexcept { return active().isa; }

void set_active_isa(Isa isa) {
    if (!isa_supported(isa)) {
        fail(ErrorKind::Usage, "kernel variant " + std::string(isa_name(isa)) + " is not available on this machine");
    }
    active_slot().store(table_for(isa), std::memory_order_relaxed);
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float beta, float* c, std::size_t ldc) {
    active().gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          std::size_t lda, const double* b, std::size_t ldb, double beta, double* c, std::size_t ldc) {
    detail::gemm_scalar(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void relu_forward(std::span<float> x) { active().relu_forward(x.data(), x.size()); }

void relu_backward(std::span<const float> out, std::span<float> grad) {
    active().relu_backward(out.data(), grad.data(), grad.size());
}

void scale_shift(std::span<float> x, float scale, float shift) {
    active().scale_shift(x.data(), x.size(), scale, shift);
}

double sum(std::span<const float> x) { return active().sum(x.data(), x.size()); }

double sum_sq_dev(std::span<const float> x, double mean) { return active().sum_sq_dev(x.data(), x.size(), mean); }

GradMoments grad_moments(std::span<const float> dy, std::span<const float> x, double mean) {
    return active().grad_moments(dy.data(), x.data(), dy.size(), mean);
}

void axpy(float alpha, std::span<const float> x, std::span<float> y) {
    active().axpy(alpha, x.data(), y.data(), y.size());
}

}  // namespace plaqnet::kernels
