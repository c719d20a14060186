#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "plaqnet/rng.hpp"
#include "plaqnet/tensor.hpp"

namespace testing {

using plaqnet::Rng;
using plaqnet::Shape;
using plaqnet::Tensor;

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is near zero from being judged on finite-difference roundoff.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central difference of f with respect to the scalar x.
inline double central_difference(double& x, const std::function<double()>& f, double eps = 1e-5) {
    const double saved = x;
    x = saved + eps;
    const double up = f();
    x = saved - eps;
    const double down = f();
    x = saved;
    return (up - down) / (2.0 * eps);
}

/// Sum of r[i] * y[i]: a scalar probe whose gradient with respect to y is r.
inline double probe(const Tensor<double>& y, const Tensor<double>& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
}

/// Largest relative error between analytic gradient `grad` and central
/// differences of f over every element of `x`.
inline double max_fd_error(Tensor<double>& x, std::span<const double> grad, const std::function<double()>& f) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double numeric = central_difference(x[i], f);
        worst = std::max(worst, rel_error(grad[i], numeric));
    }
    return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("plaqnet_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing
