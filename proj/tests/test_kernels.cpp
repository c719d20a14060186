#include <doctest.h>

#include <cmath>
#include <vector>

#include "plaqnet/error.hpp"
#include "plaqnet/kernels/kernels.hpp"
#include "plaqnet/rng.hpp"

using namespace plaqnet;
using kernels::Isa;
using kernels::Trans;

namespace {

std::vector<float> random_floats(std::size_t n, Rng& rng) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
}

// Reference result in double from float inputs.
std::vector<double> reference_gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
                                   const std::vector<float>& a, std::size_t lda, const std::vector<float>& b,
                                   std::size_t ldb, float beta, const std::vector<float>& c0) {
    std::vector<double> ad(a.begin(), a.end()), bd(b.begin(), b.end()), cd(c0.begin(), c0.end());
    kernels::gemm_reference<double>(ta, tb, m, n, k, alpha, ad.data(), lda, bd.data(), ldb, beta, cd.data(), n);
    return cd;
}

}  // namespace

TEST_CASE("scalar variant is always available") {
    const auto isas = kernels::supported_isas();
    REQUIRE(!isas.empty());
    CHECK(isas.front() == Isa::Scalar);
    CHECK(kernels::isa_supported(kernels::active_isa()));
}

TEST_CASE("gemm variants agree with the triple-loop reference") {
    Rng rng(11);
    const std::size_t sizes[][3] = {{1, 1, 1},   {3, 5, 7},    {8, 32, 16},  {13, 50, 29},
                                    {32, 2601, 9}, {64, 97, 300}, {129, 17, 513}, {5, 1030, 3}};
    for (Isa isa : kernels::supported_isas()) {
        kernels::ScopedIsa scope(isa);
        for (const auto& s : sizes) {
            const std::size_t m = s[0], n = s[1], k = s[2];
            for (Trans ta : {Trans::No, Trans::Yes}) {
                for (Trans tb : {Trans::No, Trans::Yes}) {
                    for (float beta : {0.0f, 1.0f, -0.5f}) {
                        const std::size_t lda = ta == Trans::No ? k : m;
                        const std::size_t ldb = tb == Trans::No ? n : k;
                        auto a = random_floats(m * k, rng);
                        auto b = random_floats(k * n, rng);
                        auto c = random_floats(m * n, rng);
                        const auto expect = reference_gemm(ta, tb, m, n, k, 0.75f, a, lda, b, ldb, beta, c);
                        kernels::gemm(ta, tb, m, n, k, 0.75f, a.data(), lda, b.data(), ldb, beta, c.data(), n);
                        double worst = 0.0;
                        for (std::size_t i = 0; i < c.size(); ++i) {
                            worst = std::max(worst, std::abs(c[i] - expect[i]) / (1.0 + std::abs(expect[i])));
                        }
                        INFO(kernels::isa_name(isa), " m=", m, " n=", n, " k=", k);
                        CHECK(worst < 5e-6 * std::sqrt(static_cast<double>(k)) + 1e-6);
                    }
                }
            }
        }
    }
}

TEST_CASE("gemm ignores C contents when beta is zero") {
    const std::vector<float> a = {1, 2, 3, 4};
    const std::vector<float> b = {1, 0, 0, 1};
    for (Isa isa : kernels::supported_isas()) {
        kernels::ScopedIsa scope(isa);
        std::vector<float> c(4, std::nanf(""));
        kernels::gemm(Trans::No, Trans::No, 2, 2, 2, 1.0f, a.data(), 2, b.data(), 2, 0.0f, c.data(), 2);
        CHECK(c == a);
    }
}

TEST_CASE("double gemm matches the reference closely") {
    Rng rng(5);
    const std::size_t m = 37, n = 91, k = 45;
    std::vector<double> a(m * k), b(k * n), c(m * n, 0.0), ref(m * n, 0.0);
    for (auto& x : a) x = rng.uniform(-1, 1);
    for (auto& x : b) x = rng.uniform(-1, 1);
    kernels::gemm(Trans::No, Trans::Yes, m, n, k, 1.0, a.data(), k, b.data(), k, 0.0, c.data(), n);
    kernels::gemm_reference<double>(Trans::No, Trans::Yes, m, n, k, 1.0, a.data(), k, b.data(), k, 0.0, ref.data(), n);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-13));
}

TEST_CASE("elementwise variants agree with scalar") {
    Rng rng(3);
    for (std::size_t n : {1u, 7u, 16u, 33u, 1000u, 2601u}) {
        const auto x = random_floats(n, rng);
        const auto dy = random_floats(n, rng);
        std::vector<float> relu_ref = x, grad_ref = dy, affine_ref = x;
        double sum_ref = 0, ssd_ref = 0;
        kernels::GradMoments gm_ref;
        {
            kernels::ScopedIsa scope(Isa::Scalar);
            kernels::relu_forward(std::span<float>(relu_ref));
            kernels::relu_backward(std::span<const float>(relu_ref), std::span<float>(grad_ref));
            kernels::scale_shift(std::span<float>(affine_ref), 1.7f, -0.3f);
            sum_ref = kernels::sum(std::span<const float>(x));
            ssd_ref = kernels::sum_sq_dev(std::span<const float>(x), 0.1);
            gm_ref = kernels::grad_moments(std::span<const float>(dy), std::span<const float>(x), 0.1);
        }
        for (Isa isa : kernels::supported_isas()) {
            kernels::ScopedIsa scope(isa);
            INFO(kernels::isa_name(isa), " n=", n);
            std::vector<float> relu = x, grad = dy, affine = x;
            kernels::relu_forward(std::span<float>(relu));
            kernels::relu_backward(std::span<const float>(relu), std::span<float>(grad));
            kernels::scale_shift(std::span<float>(affine), 1.7f, -0.3f);
            CHECK(relu == relu_ref);
            CHECK(grad == grad_ref);
            CHECK(affine == affine_ref);
            CHECK(kernels::sum(std::span<const float>(x)) == doctest::Approx(sum_ref).epsilon(1e-12));
            CHECK(kernels::sum_sq_dev(std::span<const float>(x), 0.1) == doctest::Approx(ssd_ref).epsilon(1e-12));
            const auto gm = kernels::grad_moments(std::span<const float>(dy), std::span<const float>(x), 0.1);
            CHECK(gm.sum_dy == doctest::Approx(gm_ref.sum_dy).epsilon(1e-12));
            CHECK(gm.sum_dy_xc == doctest::Approx(gm_ref.sum_dy_xc).epsilon(1e-12));
            std::vector<float> y = dy, y_ref = dy;
            kernels::axpy(0.5f, std::span<const float>(x), std::span<float>(y));
            for (std::size_t i = 0; i < n; ++i) y_ref[i] = std::fma(0.5f, x[i], y_ref[i]);
            for (std::size_t i = 0; i < n; ++i) CHECK(y[i] == doctest::Approx(y_ref[i]).epsilon(1e-6));
        }
    }
}

TEST_CASE("selecting an unsupported variant is a usage error") {
    for (Isa isa : {Isa::Avx2, Isa::Avx512}) {
        if (kernels::isa_supported(isa)) continue;
        try {
            kernels::set_active_isa(isa);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Usage);
        }
    }
}
