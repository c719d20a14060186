#include <doctest.h>

#include <cmath>

#include "plaqnet/error.hpp"
#include "plaqnet/layers.hpp"
#include "plaqnet/parallel.hpp"
#include "support.hpp"

using namespace plaqnet;
using testing::max_fd_error;
using testing::probe;
using testing::random_tensor;

namespace {

constexpr int kCases = 20;

// Direct summation with explicit bounds checks, independent of im2col/gemm.
Tensor<double> conv_oracle(const Tensor<double>& in, const ConvParams<double>& p) {
    const std::size_t n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
    const std::size_t f = p.weight.dim(0), k = p.weight.dim(2);
    const long pad = static_cast<long>(k / 2);
    Tensor<double> out({n, f, h, w});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < f; ++o)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    double acc = p.bias[o];
                    for (std::size_t ci = 0; ci < c; ++ci)
                        for (std::size_t dy = 0; dy < k; ++dy)
                            for (std::size_t dx = 0; dx < k; ++dx) {
                                const long sy = static_cast<long>(y + dy) - pad;
                                const long sx = static_cast<long>(x + dx) - pad;
                                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                                acc += in.at(b, ci, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) *
                                       p.weight.at(o, ci, dy, dx);
                            }
                    out.at(b, o, y, x) = acc;
                }
    return out;
}

Shape random_nchw(Rng& rng) {
    return {1 + rng.below(2), 1 + rng.below(4), 2 + rng.below(7), 2 + rng.below(7)};
}

template <typename F>
void expect_error(ErrorKind kind, F&& f) {
    try {
        f();
        FAIL("expected ", to_string(kind));
    } catch (const Error& e) {
        CHECK(e.kind() == kind);
    }
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel") {
    Rng rng(1);
    auto x = random_tensor({2, 1, 6, 5}, rng);
    ConvParams<double> p{Tensor<double>({1, 1, 1, 1}, 1.0), Tensor<double>({1})};
    const auto y = conv2d_forward(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv2d: all-ones kernel on a constant image") {
    Tensor<double> x({1, 1, 5, 5}, 2.0);
    ConvParams<double> p{Tensor<double>({1, 1, 3, 3}, 1.0), Tensor<double>({1})};
    const auto y = conv2d_forward(x, p);
    CHECK(y.at(0, 0, 2, 2) == 18.0);
    CHECK(y.at(0, 0, 1, 3) == 18.0);
    CHECK(y.at(0, 0, 0, 0) == 8.0);
    CHECK(y.at(0, 0, 4, 4) == 8.0);
    CHECK(y.at(0, 0, 0, 2) == 12.0);
}

TEST_CASE("conv2d matches direct summation") {
    Rng rng(2);
    {
        auto x = random_tensor({1, 1, 5, 5}, rng);
        ConvParams<double> p{random_tensor({1, 1, 3, 3}, rng), random_tensor({1}, rng)};
        const auto y = conv2d_forward(x, p);
        const auto ref = conv_oracle(x, p);
        for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - ref[i]) <= 1e-12);
    }
    for (int t = 0; t < kCases; ++t) {
        const Shape s = random_nchw(rng);
        const std::size_t f = 1 + rng.below(5);
        const std::size_t k = rng.below(2) ? 3 : 1;
        auto x = random_tensor(s, rng);
        ConvParams<double> p{random_tensor({f, s[1], k, k}, rng), random_tensor({f}, rng)};
        const auto y = conv2d_forward(x, p);
        const auto ref = conv_oracle(x, p);
        double worst = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));
        CHECK(worst <= 1e-12);
    }
}

TEST_CASE("conv2d shape errors") {
    Rng rng(3);
    auto x = random_tensor({1, 2, 4, 4}, rng);
    ConvParams<double> p{random_tensor({3, 1, 3, 3}, rng), random_tensor({3}, rng)};
    expect_error(ErrorKind::Shape, [&] { conv2d_forward(x, p); });
    ConvParams<double> even{random_tensor({3, 2, 2, 2}, rng), random_tensor({3}, rng)};
    expect_error(ErrorKind::Shape, [&] { conv2d_forward(x, even); });
    ConvParams<double> ok{random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)};
    expect_error(ErrorKind::Usage, [&] { conv2d_backward(Tensor<double>({1, 3, 4, 4}), Tensor<double>(), ok); });
}

TEST_CASE("conv2d backward: zero upstream and bias linearity") {
    Rng rng(4);
    auto x = random_tensor({2, 3, 5, 6}, rng);
    ConvParams<double> p{random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)};
    auto g = conv2d_backward(Tensor<double>({2, 4, 5, 6}), x, p);
    for (double v : g.input_grad.values()) CHECK(v == 0.0);
    for (double v : g.weight_grad.values()) CHECK(v == 0.0);
    for (double v : g.bias_grad.values()) CHECK(v == 0.0);

    auto up = random_tensor({2, 4, 5, 6}, rng);
    p.weight.drop_grad();
    p.bias.drop_grad();
    g = conv2d_backward(up, x, p);
    for (std::size_t f = 0; f < 4; ++f) {
        double s = 0.0;
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 30; ++i) s += up[(n * 4 + f) * 30 + i];
        CHECK(g.bias_grad[f] == doctest::Approx(s).epsilon(1e-12));
        CHECK(p.bias.grad()[f] == g.bias_grad[f]);
    }
}

TEST_CASE("conv2d backward matches finite differences") {
    Rng rng(5);
    double worst = 0.0;
    for (int t = 0; t < kCases; ++t) {
        const Shape s = random_nchw(rng);
        const std::size_t f = 1 + rng.below(4);
        const std::size_t k = t % 4 == 3 ? 1 : 3;
        auto x = random_tensor(s, rng);
        ConvParams<double> p{random_tensor({f, s[1], k, k}, rng), random_tensor({f}, rng)};
        const auto r = random_tensor({s[0], f, s[2], s[3]}, rng);
        auto g = conv2d_backward(r, x, p);
        auto loss = [&] { return probe(conv2d_forward(x, p), r); };
        worst = std::max(worst, max_fd_error(x, g.input_grad.values(), loss));
        worst = std::max(worst, max_fd_error(p.weight, g.weight_grad.values(), loss));
        worst = std::max(worst, max_fd_error(p.bias, g.bias_grad.values(), loss));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("conv2d output does not depend on worker count") {
    Rng rng(6);
    auto x = random_tensor<float>({17, 3, 9, 9}, rng);
    ConvParams<float> p{random_tensor<float>({8, 3, 3, 3}, rng), random_tensor<float>({8}, rng)};
    const auto up = random_tensor<float>({17, 8, 9, 9}, rng);
    set_worker_count(1);
    const auto y1 = conv2d_forward(x, p);
    const auto g1 = conv2d_backward(up, x, p);
    set_worker_count(4);
    const auto y4 = conv2d_forward(x, p);
    const auto g4 = conv2d_backward(up, x, p);
    set_worker_count(1);
    CHECK(std::equal(y1.values().begin(), y1.values().end(), y4.values().begin()));
    CHECK(std::equal(g1.weight_grad.values().begin(), g1.weight_grad.values().end(), g4.weight_grad.values().begin()));
    CHECK(std::equal(g1.input_grad.values().begin(), g1.input_grad.values().end(), g4.input_grad.values().begin()));
}

TEST_CASE("batchnorm: constant input normalises to zero") {
    Tensor<double> x({2, 3, 4, 4}, 7.5);
    auto p = BatchNormParams<double>::identity(3);
    const auto y = batchnorm_forward(x, p, Mode::Train, BatchNormConfig{});
    for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("batchnorm: train-mode output moments") {
    Rng rng(7);
    for (int t = 0; t < kCases; ++t) {
        const Shape s = random_nchw(rng);
        auto x = random_tensor(s, rng, -3.0, 5.0);
        auto p = BatchNormParams<double>::identity(s[1]);
        const auto y = batchnorm_forward(x, p, Mode::Train, BatchNormConfig{});
        const std::size_t plane = s[2] * s[3];
        for (std::size_t c = 0; c < s[1]; ++c) {
            double mean = 0, sq = 0;
            for (std::size_t n = 0; n < s[0]; ++n)
                for (std::size_t i = 0; i < plane; ++i) mean += y[(n * s[1] + c) * plane + i];
            const double m = static_cast<double>(s[0] * plane);
            mean /= m;
            for (std::size_t n = 0; n < s[0]; ++n)
                for (std::size_t i = 0; i < plane; ++i) sq += std::pow(y[(n * s[1] + c) * plane + i] - mean, 2);
            CHECK(std::abs(mean) <= 1e-6);
            // Epsilon shrinks the variance slightly below 1 for tiny inputs.
            CHECK(std::abs(sq / m - 1.0) <= 1e-4);
        }
    }
}

TEST_CASE("batchnorm: affine parameters and running statistics") {
    Rng rng(8);
    auto x = random_tensor({3, 2, 4, 5}, rng);
    auto unit = BatchNormParams<double>::identity(2);
    const auto normalized = batchnorm_forward(x, unit, Mode::Train, BatchNormConfig{});
    auto p = BatchNormParams<double>::identity(2);
    p.gamma.fill(2.0);
    p.beta.fill(3.0);
    const auto y = batchnorm_forward(x, p, Mode::Train, BatchNormConfig{});
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(2.0 * normalized[i] + 3.0).epsilon(1e-12));

    // running = 0.99 * running + 0.01 * batch, starting from (0, 1).
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0, var = 0;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t i = 0; i < 20; ++i) mean += x[(n * 2 + c) * 20 + i];
        mean /= 60;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t i = 0; i < 20; ++i) var += std::pow(x[(n * 2 + c) * 20 + i] - mean, 2);
        var /= 60;
        CHECK(p.running_mean[c] == doctest::Approx(0.01 * mean).epsilon(1e-12));
        CHECK(p.running_var[c] == doctest::Approx(0.99 + 0.01 * var).epsilon(1e-12));
    }

    p.running_mean.fill(0.5);
    p.running_var.fill(4.0);
    const auto inf = batchnorm_forward(x, p, Mode::Inference, BatchNormConfig{});
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(inf[i] == doctest::Approx(2.0 * (x[i] - 0.5) / std::sqrt(4.0 + 1e-5) + 3.0).epsilon(1e-12));
    }
    CHECK(p.running_mean[0] == 0.5);
}

TEST_CASE("batchnorm: single value per channel is degenerate") {
    Tensor<double> x({1, 2, 1, 1}, 1.0);
    auto p = BatchNormParams<double>::identity(2);
    expect_error(ErrorKind::DegenerateBatch, [&] { batchnorm_forward(x, p, Mode::Train, BatchNormConfig{}); });
    CHECK_NOTHROW(batchnorm_forward(x, p, Mode::Inference, BatchNormConfig{}));
}

TEST_CASE("batchnorm backward matches finite differences") {
    Rng rng(9);
    double worst = 0.0;
    for (int t = 0; t < kCases; ++t) {
        const Shape s = random_nchw(rng);
        auto x = random_tensor(s, rng, -2.0, 2.0);
        auto p = BatchNormParams<double>::identity(s[1]);
        p.gamma = random_tensor({s[1]}, rng, 0.5, 1.5);
        p.beta = random_tensor({s[1]}, rng);
        const auto r = random_tensor(s, rng);
        BatchNormCache cache;
        batchnorm_forward(x, p, Mode::Train, BatchNormConfig{}, &cache);
        const auto dx = batchnorm_backward(r, x, p, cache);
        const std::vector<double> dgamma(p.gamma.grad().begin(), p.gamma.grad().end());
        const std::vector<double> dbeta(p.beta.grad().begin(), p.beta.grad().end());
        auto loss = [&] { return probe(batchnorm_forward(x, p, Mode::Train, BatchNormConfig{}), r); };
        worst = std::max(worst, max_fd_error(x, dx.values(), loss));
        worst = std::max(worst, max_fd_error(p.gamma, dgamma, loss));
        worst = std::max(worst, max_fd_error(p.beta, dbeta, loss));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("relu forward and backward") {
    Tensor<double> x({2}, std::vector<double>{-1.0, 2.0});
    const auto y = relu_forward(x);
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 2.0);

    Rng rng(10);
    double worst = 0.0;
    for (int t = 0; t < kCases; ++t) {
        const Shape s = random_nchw(rng);
        auto in = random_tensor(s, rng);
        for (auto& v : in.values()) {
            if (std::abs(v) < 1e-3) v = 0.5;  // keep clear of the kink
        }
        const auto r = random_tensor(s, rng);
        const auto dx = relu_backward(r, relu_forward(in));
        worst = std::max(worst, max_fd_error(in, dx.values(), [&] { return probe(relu_forward(in), r); }));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("maxpool2x2") {
    Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    const auto y = maxpool2x2_forward(x);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 4.0);

    Rng rng(11);
    CHECK(maxpool2x2_forward(random_tensor({1, 2, 51, 51}, rng)).shape() == Shape{1, 2, 25, 25});
    CHECK(maxpool2x2_forward(random_tensor({1, 2, 25, 25}, rng)).shape() == Shape{1, 2, 12, 12});
    expect_error(ErrorKind::Shape, [&] { maxpool2x2_forward(random_tensor({1, 1, 1, 4}, rng)); });

    double worst = 0.0;
    for (int t = 0; t < kCases; ++t) {
        const Shape s = random_nchw(rng);
        // Distinct, well-separated values so a perturbation never changes the argmax.
        Tensor<double> in(s);
        std::vector<std::size_t> order(in.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        for (std::size_t i = 0; i < order.size(); ++i) in[order[i]] = 0.01 * static_cast<double>(i);
        MaxPoolCache cache;
        const auto y = maxpool2x2_forward(in, &cache);
        const auto r = random_tensor(y.shape(), rng);
        const auto dx = maxpool2x2_backward(r, cache);
        worst = std::max(worst, max_fd_error(in, dx.values(), [&] { return probe(maxpool2x2_forward(in), r); }));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("global average pooling") {
    Rng rng(12);
    double worst = 0.0;
    for (int t = 0; t < kCases; ++t) {
        const Shape s = random_nchw(rng);
        auto x = random_tensor(s, rng);
        const auto y = global_avg_pool_forward(x);
        REQUIRE(y.shape() == Shape{s[0], s[1]});
        const std::size_t plane = s[2] * s[3];
        for (std::size_t i = 0; i < y.size(); ++i) {
            double m = 0;
            for (std::size_t j = 0; j < plane; ++j) m += x[i * plane + j];
            CHECK(y[i] == doctest::Approx(m / static_cast<double>(plane)).epsilon(1e-12));
        }
        const auto r = random_tensor(y.shape(), rng);
        const auto dx = global_avg_pool_backward(r, s);
        worst = std::max(worst, max_fd_error(x, dx.values(), [&] { return probe(global_avg_pool_forward(x), r); }));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("dense layer") {
    Rng rng(13);
    double worst = 0.0;
    for (int t = 0; t < kCases; ++t) {
        const std::size_t n = 1 + rng.below(4), in = 1 + rng.below(9), out = 1 + rng.below(6);
        auto x = random_tensor({n, in}, rng);
        DenseParams<double> p{random_tensor({out, in}, rng), random_tensor({out}, rng)};
        const auto y = dense_forward(x, p);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out; ++j) {
                double acc = p.bias[j];
                for (std::size_t k = 0; k < in; ++k) acc += p.weight[j * in + k] * x[i * in + k];
                CHECK(y[i * out + j] == doctest::Approx(acc).epsilon(1e-12));
            }
        const auto r = random_tensor({n, out}, rng);
        auto g = dense_backward(r, x, p);
        auto loss = [&] { return probe(dense_forward(x, p), r); };
        worst = std::max(worst, max_fd_error(x, g.input_grad.values(), loss));
        worst = std::max(worst, max_fd_error(p.weight, g.weight_grad.values(), loss));
        worst = std::max(worst, max_fd_error(p.bias, g.bias_grad.values(), loss));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("dropout") {
    Rng rng(14);
    auto x = random_tensor({4, 8}, rng, 0.5, 1.5);
    CHECK(dropout_forward(x, 0.5, Mode::Inference, rng).values().size() == x.size());
    const auto inf = dropout_forward(x, 0.5, Mode::Inference, rng);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(inf[i] == x[i]);

    expect_error(ErrorKind::Usage, [&] { dropout_forward(x, 1.0, Mode::Train, rng); });
    expect_error(ErrorKind::Usage, [&] { dropout_forward(x, -0.1, Mode::Train, rng); });

    // Averaged over many trials the train-mode output matches inference.
    Tensor<double> mean(x.shape());
    const int trials = 20000;
    Rng trial_rng(15);
    for (int t = 0; t < trials; ++t) {
        const auto y = dropout_forward(x, 0.5, Mode::Train, trial_rng);
        for (std::size_t i = 0; i < x.size(); ++i) mean[i] += y[i] / trials;
    }
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(mean[i] - x[i]) <= 0.02 * x[i]);

    double worst = 0.0;
    for (int t = 0; t < kCases; ++t) {
        auto in = random_tensor({3, 7}, rng);
        DropoutCache cache;
        const std::uint64_t seed = rng.next_u64();
        Rng a(seed);
        dropout_forward(in, 0.3, Mode::Train, a, &cache);
        const auto r = random_tensor({3, 7}, rng);
        const auto dx = dropout_backward(r, cache);
        worst = std::max(worst, max_fd_error(in, dx.values(), [&] {
                             Rng b(seed);
                             return probe(dropout_forward(in, 0.3, Mode::Train, b), r);
                         }));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("softmax") {
    Tensor<double> flat({1, 5}, 3.0);
    const auto uniform = softmax(flat);
    for (double v : uniform.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

    Rng rng(16);
    double worst = 0.0;
    for (int t = 0; t < kCases; ++t) {
        auto z = random_tensor({1 + rng.below(4), 5}, rng, -8.0, 8.0);
        const auto p = softmax(z);
        auto shifted = z;
        const double c = rng.uniform(-50, 50);
        for (auto& v : shifted.values()) v += c;
        const auto q = softmax(shifted);
        for (std::size_t i = 0; i < p.size(); ++i) {
            CHECK(std::abs(p[i] - q[i]) <= 1e-12);
            CHECK(p[i] > 0.0);
            CHECK(p[i] < 1.0);
        }
        for (std::size_t i = 0; i < z.dim(0); ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 5; ++j) s += p[i * 5 + j];
            CHECK(std::abs(s - 1.0) <= 1e-9);
        }
        const auto r = random_tensor(z.shape(), rng);
        const auto dz = softmax_backward(r, p);
        worst = std::max(worst, max_fd_error(z, dz.values(), [&] { return probe(softmax(z), r); }));
    }
    CHECK(worst < 1e-6);

    Tensor<double> bad({1, 5}, 0.0);
    bad[2] = std::nan("");
    expect_error(ErrorKind::Numeric, [&] { softmax(bad); });
    bad[2] = INFINITY;
    expect_error(ErrorKind::Numeric, [&] { softmax(bad); });
}

TEST_CASE("layer outputs are bit-identical across repeated calls") {
    Rng rng(17);
    auto x = random_tensor({2, 3, 7, 7}, rng);
    ConvParams<double> p{random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)};
    auto bn1 = BatchNormParams<double>::identity(4);
    auto bn2 = BatchNormParams<double>::identity(4);
    const auto a = batchnorm_forward(conv2d_forward(x, p), bn1, Mode::Train, BatchNormConfig{});
    const auto b = batchnorm_forward(conv2d_forward(x, p), bn2, Mode::Train, BatchNormConfig{});
    CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
    Rng d1(99), d2(99);
    const auto da = dropout_forward(a, 0.5, Mode::Train, d1);
    const auto db = dropout_forward(b, 0.5, Mode::Train, d2);
    CHECK(std::equal(da.values().begin(), da.values().end(), db.values().begin()));
}
