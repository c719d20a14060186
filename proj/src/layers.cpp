#include "plaqnet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "plaqnet/kernels/kernels.hpp"
#include "plaqnet/parallel.hpp"

namespace plaqnet {
namespace {

using kernels::Trans;

// Weight-gradient partial sums are formed over fixed groups of samples and
// then added in group order, which keeps results independent of threading.
constexpr std::size_t kGradGroup = 8;

struct Nchw {
    std::size_t n, c, h, w;
    std::size_t plane() const { return h * w; }
};

template <typename T>
Nchw nchw(const Tensor<T>& t, const char* what) {
    require_rank(t, 4, what);
    return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

/// Unfolds one sample [C, H, W] into rows indexed by (c, dy, dx) and columns
/// by output pixel, with zero padding of k / 2.
template <typename T>
void im2col(const T* in, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, T* col) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto H = static_cast<std::ptrdiff_t>(h);
    const auto W = static_cast<std::ptrdiff_t>(w);
    for (std::size_t c = 0; c < channels; ++c) {
        const T* plane = in + c * h * w;
        for (std::size_t dy = 0; dy < k; ++dy) {
            for (std::size_t dx = 0; dx < k; ++dx) {
                T* row = col + ((c * k + dy) * k + dx) * h * w;
                const std::ptrdiff_t shift_x = static_cast<std::ptrdiff_t>(dx) - pad;
                const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -shift_x);
                const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(W, W - shift_x);
                for (std::ptrdiff_t y = 0; y < H; ++y) {
                    T* dst = row + y * W;
                    const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(dy) - pad;
                    if (sy < 0 || sy >= H || x_lo >= x_hi) {
                        std::fill(dst, dst + W, T{0});
                        continue;
                    }
                    const T* src = plane + sy * W + shift_x;
                    std::fill(dst, dst + x_lo, T{0});
                    std::copy(src + x_lo, src + x_hi, dst + x_lo);
                    std::fill(dst + x_hi, dst + W, T{0});
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters column gradients back onto [C, H, W].
template <typename T>
void col2im(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, T* out) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto H = static_cast<std::ptrdiff_t>(h);
    const auto W = static_cast<std::ptrdiff_t>(w);
    std::fill(out, out + channels * h * w, T{0});
    for (std::size_t c = 0; c < channels; ++c) {
        T* plane = out + c * h * w;
        for (std::size_t dy = 0; dy < k; ++dy) {
            for (std::size_t dx = 0; dx < k; ++dx) {
                const T* row = col + ((c * k + dy) * k + dx) * h * w;
                const std::ptrdiff_t shift_x = static_cast<std::ptrdiff_t>(dx) - pad;
                const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -shift_x);
                const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(W, W - shift_x);
                for (std::ptrdiff_t y = 0; y < H; ++y) {
                    const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(dy) - pad;
                    if (sy < 0 || sy >= H) continue;
                    const T* src = row + y * W;
                    T* dst = plane + sy * W + shift_x;
                    for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) dst[x] += src[x];
                }
            }
        }
    }
}

template <typename T>
void check_conv_params(const ConvParams<T>& params, std::size_t in_channels) {
    require_rank(params.weight, 4, "conv2d weight");
    if (params.weight.dim(2) != params.weight.dim(3) || params.weight.dim(2) % 2 == 0) {
        fail(ErrorKind::Shape, "conv2d kernel must be square with odd side, got " + shape_string(params.weight.shape()));
    }
    if (params.weight.dim(1) != in_channels) {
        fail(ErrorKind::Shape, "conv2d expects " + std::to_string(params.weight.dim(1)) + " input channels, got " +
                                   std::to_string(in_channels));
    }
    if (params.bias.size() != params.weight.dim(0)) {
        fail(ErrorKind::Shape, "conv2d bias has " + std::to_string(params.bias.size()) + " entries for " +
                                   std::to_string(params.weight.dim(0)) + " filters");
    }
}

template <typename T>
std::vector<T>& scratch(std::size_t size) {
    thread_local std::vector<T> buffer;
    if (buffer.size() < size) buffer.resize(size);
    return buffer;
}

}  // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvParams<T>& params) {
    const Nchw s = nchw(input, "conv2d input");
    check_conv_params(params, s.c);
    const std::size_t filters = params.out_channels();
    const std::size_t k = params.kernel();
    const std::size_t depth = s.c * k * k;
    const std::size_t plane = s.plane();
    Tensor<T> out({s.n, filters, s.h, s.w});
    parallel_for(s.n, [&](std::size_t n) {
        const T* in_n = input.data() + n * s.c * plane;
        const T* col = in_n;
        if (k != 1) {
            auto& buf = scratch<T>(depth * plane);
            im2col(in_n, s.c, s.h, s.w, k, buf.data());
            col = buf.data();
        }
        T* out_n = out.data() + n * filters * plane;
        kernels::gemm(Trans::No, Trans::No, filters, plane, depth, T{1}, params.weight.data(), depth, col, plane, T{0},
                      out_n, plane);
        for (std::size_t f = 0; f < filters; ++f) {
            const T b = params.bias[f];
            T* row = out_n + f * plane;
            for (std::size_t i = 0; i < plane; ++i) row[i] += b;
        }
    });
    return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& upstream_grad, const Tensor<T>& saved_input, ConvParams<T>& params,
                             bool need_input_grad) {
    if (saved_input.empty()) fail(ErrorKind::Usage, "conv2d_backward called without a saved forward input");
    const Nchw s = nchw(saved_input, "conv2d saved input");
    check_conv_params(params, s.c);
    const std::size_t filters = params.out_channels();
    const std::size_t k = params.kernel();
    const std::size_t depth = s.c * k * k;
    const std::size_t plane = s.plane();
    if (upstream_grad.shape() != Shape{s.n, filters, s.h, s.w}) {
        fail(ErrorKind::Shape, "conv2d upstream gradient " + shape_string(upstream_grad.shape()) + " does not match output " +
                                   shape_string({s.n, filters, s.h, s.w}));
    }

    ConvGrads<T> grads;
    grads.bias_grad = Tensor<T>({filters});
    for (std::size_t f = 0; f < filters; ++f) {
        double acc = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            acc += kernels::sum(std::span<const T>(upstream_grad.data() + (n * filters + f) * plane, plane));
        }
        grads.bias_grad[f] = static_cast<T>(acc);
    }

    if (need_input_grad) {
        grads.input_grad = Tensor<T>(saved_input.shape());
        parallel_for(s.n, [&](std::size_t n) {
            const T* dout = upstream_grad.data() + n * filters * plane;
            T* din = grads.input_grad.data() + n * s.c * plane;
            if (k == 1) {
                kernels::gemm(Trans::Yes, Trans::No, depth, plane, filters, T{1}, params.weight.data(), depth, dout,
                              plane, T{0}, din, plane);
                return;
            }
            auto& dcol = scratch<T>(depth * plane);
            kernels::gemm(Trans::Yes, Trans::No, depth, plane, filters, T{1}, params.weight.data(), depth, dout, plane,
                          T{0}, dcol.data(), plane);
            col2im(dcol.data(), s.c, s.h, s.w, k, din);
        });
    }

    const std::size_t groups = (s.n + kGradGroup - 1) / kGradGroup;
    std::vector<std::vector<T>> partial(groups, std::vector<T>(filters * depth));
    parallel_for(groups, [&](std::size_t g) {
        const std::size_t begin = g * kGradGroup;
        const std::size_t end = std::min(s.n, begin + kGradGroup);
        for (std::size_t n = begin; n < end; ++n) {
            const T* in_n = saved_input.data() + n * s.c * plane;
            const T* col = in_n;
            if (k != 1) {
                auto& buf = scratch<T>(depth * plane);
                im2col(in_n, s.c, s.h, s.w, k, buf.data());
                col = buf.data();
            }
            kernels::gemm(Trans::No, Trans::Yes, filters, depth, plane, T{1},
                          upstream_grad.data() + n * filters * plane, plane, col, plane, n == begin ? T{0} : T{1},
                          partial[g].data(), depth);
        }
    });
    grads.weight_grad = Tensor<T>(params.weight.shape());
    auto wg = grads.weight_grad.values();
    for (const auto& p : partial) {
        for (std::size_t i = 0; i < wg.size(); ++i) wg[i] += p[i];
    }

    auto w_slot = params.weight.ensure_grad();
    for (std::size_t i = 0; i < wg.size(); ++i) w_slot[i] += wg[i];
    auto b_slot = params.bias.ensure_grad();
    for (std::size_t f = 0; f < filters; ++f) b_slot[f] += grads.bias_grad[f];
    return grads;
}

namespace {

struct ChannelLayout {
    std::size_t n, c, plane;
};

template <typename T>
ChannelLayout channel_layout(const Tensor<T>& t) {
    if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2) * t.dim(3)};
    if (t.rank() == 2) return {t.dim(0), t.dim(1), 1};
    fail(ErrorKind::Shape, "batchnorm expects [N,C,H,W] or [N,C], got " + shape_string(t.shape()));
}

template <typename T>
void check_bn_params(const BatchNormParams<T>& p, std::size_t channels) {
    if (p.gamma.size() != channels || p.beta.size() != channels || p.running_mean.size() != channels ||
        p.running_var.size() != channels) {
        fail(ErrorKind::Shape, "batchnorm parameters do not match " + std::to_string(channels) + " channels");
    }
}

}  // namespace

template <typename T>
void batchnorm_forward_into(const Tensor<T>& input, Tensor<T>& output, BatchNormParams<T>& params, Mode mode,
                            const BatchNormConfig& config, BatchNormCache* cache) {
    const ChannelLayout l = channel_layout(input);
    check_bn_params(params, l.c);
    const std::size_t count = l.n * l.plane;
    if (mode == Mode::Train && count < 2) {
        fail(ErrorKind::DegenerateBatch, "train-mode batchnorm needs at least 2 values per channel, got " +
                                             std::to_string(count));
    }
    if (output.shape() != input.shape()) output = Tensor<T>(input.shape());
    if (cache && mode == Mode::Train) {
        cache->mean.assign(l.c, 0.0);
        cache->inv_std.assign(l.c, 0.0);
        cache->count = count;
    }
    parallel_for(l.c, [&](std::size_t c) {
        double center = 0.0;
        double scale = 0.0;
        if (mode == Mode::Train) {
            double total = 0.0;
            for (std::size_t n = 0; n < l.n; ++n) {
                total += kernels::sum(std::span<const T>(input.data() + (n * l.c + c) * l.plane, l.plane));
            }
            const double mean = total / static_cast<double>(count);
            double ssd = 0.0;
            for (std::size_t n = 0; n < l.n; ++n) {
                ssd += kernels::sum_sq_dev(std::span<const T>(input.data() + (n * l.c + c) * l.plane, l.plane), mean);
            }
            const double var = ssd / static_cast<double>(count);
            const double inv_std = 1.0 / std::sqrt(var + config.epsilon);
            if (cache) {
                cache->mean[c] = mean;
                cache->inv_std[c] = inv_std;
            }
            const double m = config.momentum;
            params.running_mean[c] = static_cast<T>(m * params.running_mean[c] + (1.0 - m) * mean);
            params.running_var[c] = static_cast<T>(m * params.running_var[c] + (1.0 - m) * var);
            center = mean;
            scale = static_cast<double>(params.gamma[c]) * inv_std;
        } else {
            center = static_cast<double>(params.running_mean[c]);
            scale = static_cast<double>(params.gamma[c]) /
                    std::sqrt(static_cast<double>(params.running_var[c]) + config.epsilon);
        }
        const double shift = static_cast<double>(params.beta[c]);
        for (std::size_t n = 0; n < l.n; ++n) {
            const std::size_t offset = (n * l.c + c) * l.plane;
            if (output.data() != input.data()) {
                std::copy(input.data() + offset, input.data() + offset + l.plane, output.data() + offset);
            }
            // Centre first so that constant channels map exactly onto beta.
            const std::span<T> row(output.data() + offset, l.plane);
            kernels::scale_shift(row, T{1}, static_cast<T>(-center));
            kernels::scale_shift(row, static_cast<T>(scale), static_cast<T>(shift));
        }
    });
}

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, BatchNormParams<T>& params, Mode mode,
                            const BatchNormConfig& config, BatchNormCache* cache) {
    Tensor<T> out(input.shape());
    batchnorm_forward_into(input, out, params, mode, config, cache);
    return out;
}

template <typename T>
Tensor<T> batchnorm_backward(const Tensor<T>& upstream_grad, const Tensor<T>& saved_input,
                             BatchNormParams<T>& params, const BatchNormCache& cache) {
    if (saved_input.empty() || cache.mean.empty()) {
        fail(ErrorKind::Usage, "batchnorm_backward called without a train-mode forward context");
    }
    const ChannelLayout l = channel_layout(saved_input);
    check_bn_params(params, l.c);
    if (upstream_grad.shape() != saved_input.shape()) {
        fail(ErrorKind::Shape, "batchnorm upstream gradient shape mismatch");
    }
    Tensor<T> dx(saved_input.shape());
    auto dgamma = params.gamma.ensure_grad();
    auto dbeta = params.beta.ensure_grad();
    const double m = static_cast<double>(cache.count);
    parallel_for(l.c, [&](std::size_t c) {
        const double mean = cache.mean[c];
        const double inv = cache.inv_std[c];
        kernels::GradMoments g;
        for (std::size_t n = 0; n < l.n; ++n) {
            const std::size_t offset = (n * l.c + c) * l.plane;
            const auto part = kernels::grad_moments(std::span<const T>(upstream_grad.data() + offset, l.plane),
                                                    std::span<const T>(saved_input.data() + offset, l.plane), mean);
            g.sum_dy += part.sum_dy;
            g.sum_dy_xc += part.sum_dy_xc;
        }
        dgamma[c] += static_cast<T>(g.sum_dy_xc * inv);
        dbeta[c] += static_cast<T>(g.sum_dy);
        // dx = k * (dy - mean(dy) - xhat * mean(dy * xhat)), expanded as a*dy + b*x + c.
        const double k = static_cast<double>(params.gamma[c]) * inv;
        const double mean_dy = g.sum_dy / m;
        const double mean_dy_xc = g.sum_dy_xc / m;
        const auto a = static_cast<T>(k);
        const auto b = static_cast<T>(-k * inv * inv * mean_dy_xc);
        const auto off = static_cast<T>(k * (-mean_dy + mean * inv * inv * mean_dy_xc));
        for (std::size_t n = 0; n < l.n; ++n) {
            const std::size_t offset = (n * l.c + c) * l.plane;
            const T* dy = upstream_grad.data() + offset;
            const T* x = saved_input.data() + offset;
            T* out = dx.data() + offset;
            for (std::size_t i = 0; i < l.plane; ++i) out[i] = a * dy[i] + b * x[i] + off;
        }
    });
    return dx;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
    Tensor<T> out = input;
    out.drop_grad();
    kernels::relu_forward(out.values());
    return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& upstream_grad, const Tensor<T>& saved_output) {
    if (upstream_grad.shape() != saved_output.shape()) fail(ErrorKind::Shape, "relu gradient shape mismatch");
    Tensor<T> dx = upstream_grad;
    dx.drop_grad();
    kernels::relu_backward(saved_output.values(), dx.values());
    return dx;
}

template <typename T>
Tensor<T> maxpool2x2_forward(const Tensor<T>& input, MaxPoolCache* cache) {
    const Nchw s = nchw(input, "maxpool2x2 input");
    if (s.h < 2 || s.w < 2) {
        fail(ErrorKind::Shape, "maxpool2x2 needs spatial dims >= 2, got " + shape_string(input.shape()));
    }
    const std::size_t oh = s.h / 2;
    const std::size_t ow = s.w / 2;
    Tensor<T> out({s.n, s.c, oh, ow});
    if (cache) {
        cache->input_shape = input.shape();
        cache->argmax.assign(out.size(), 0);
    }
    parallel_for(s.n, [&](std::size_t n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t in_base = (n * s.c + c) * s.plane();
            const std::size_t out_base = (n * s.c + c) * oh * ow;
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    std::size_t best = in_base + (2 * oy) * s.w + 2 * ox;
                    for (std::size_t idx : {best + 1, best + s.w, best + s.w + 1}) {
                        if (input[idx] > input[best]) best = idx;
                    }
                    out[out_base + oy * ow + ox] = input[best];
                    if (cache) cache->argmax[out_base + oy * ow + ox] = static_cast<std::uint32_t>(best);
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& upstream_grad, const MaxPoolCache& cache) {
    if (cache.argmax.size() != upstream_grad.size()) {
        fail(ErrorKind::Usage, "maxpool2x2_backward called without a matching forward context");
    }
    Tensor<T> dx(cache.input_shape);
    for (std::size_t i = 0; i < upstream_grad.size(); ++i) dx[cache.argmax[i]] += upstream_grad[i];
    return dx;
}

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& input) {
    const Nchw s = nchw(input, "global_avg_pool input");
    Tensor<T> out({s.n, s.c});
    for (std::size_t i = 0; i < s.n * s.c; ++i) {
        out[i] = static_cast<T>(kernels::sum(std::span<const T>(input.data() + i * s.plane(), s.plane())) /
                                static_cast<double>(s.plane()));
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& upstream_grad, const Shape& input_shape) {
    if (input_shape.size() != 4 || upstream_grad.shape() != Shape{input_shape[0], input_shape[1]}) {
        fail(ErrorKind::Shape, "global_avg_pool gradient shape mismatch");
    }
    const std::size_t plane = input_shape[2] * input_shape[3];
    Tensor<T> dx(input_shape);
    const T inv = T{1} / static_cast<T>(plane);
    for (std::size_t i = 0; i < upstream_grad.size(); ++i) {
        std::fill(dx.data() + i * plane, dx.data() + (i + 1) * plane, upstream_grad[i] * inv);
    }
    return dx;
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const DenseParams<T>& params) {
    require_rank(input, 2, "dense input");
    require_rank(params.weight, 2, "dense weight");
    const std::size_t n = input.dim(0);
    const std::size_t in = input.dim(1);
    const std::size_t out_dim = params.weight.dim(0);
    if (params.weight.dim(1) != in || params.bias.size() != out_dim) {
        fail(ErrorKind::Shape, "dense layer " + shape_string(params.weight.shape()) + " cannot take input " +
                                   shape_string(input.shape()));
    }
    Tensor<T> out({n, out_dim});
    kernels::gemm(Trans::No, Trans::Yes, n, out_dim, in, T{1}, input.data(), in, params.weight.data(), in, T{0},
                  out.data(), out_dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += params.bias[j];
    }
    return out;
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& upstream_grad, const Tensor<T>& saved_input, DenseParams<T>& params) {
    if (saved_input.empty()) fail(ErrorKind::Usage, "dense_backward called without a saved forward input");
    const std::size_t n = saved_input.dim(0);
    const std::size_t in = saved_input.dim(1);
    const std::size_t out_dim = params.weight.dim(0);
    if (upstream_grad.shape() != Shape{n, out_dim}) fail(ErrorKind::Shape, "dense upstream gradient shape mismatch");
    DenseGrads<T> g{Tensor<T>({n, in}), Tensor<T>(params.weight.shape()), Tensor<T>({out_dim})};
    kernels::gemm(Trans::No, Trans::No, n, in, out_dim, T{1}, upstream_grad.data(), out_dim, params.weight.data(), in,
                  T{0}, g.input_grad.data(), in);
    kernels::gemm(Trans::Yes, Trans::No, out_dim, in, n, T{1}, upstream_grad.data(), out_dim, saved_input.data(), in,
                  T{0}, g.weight_grad.data(), in);
    for (std::size_t j = 0; j < out_dim; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += upstream_grad[i * out_dim + j];
        g.bias_grad[j] = static_cast<T>(acc);
    }
    auto w_slot = params.weight.ensure_grad();
    for (std::size_t i = 0; i < w_slot.size(); ++i) w_slot[i] += g.weight_grad[i];
    auto b_slot = params.bias.ensure_grad();
    for (std::size_t j = 0; j < out_dim; ++j) b_slot[j] += g.bias_grad[j];
    return g;
}

template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& input, double ratio, Mode mode, Rng& rng, DropoutCache* cache) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        fail(ErrorKind::Usage, "dropout ratio must lie in [0, 1), got " + std::to_string(ratio));
    }
    Tensor<T> out = input;
    out.drop_grad();
    if (mode == Mode::Inference) {
        if (cache) {
            cache->keep.clear();
            cache->scale = 1.0;
        }
        return out;
    }
    const double scale = 1.0 / (1.0 - ratio);
    std::vector<std::uint8_t> keep(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        keep[i] = rng.uniform() >= ratio ? 1 : 0;
        out[i] = keep[i] ? static_cast<T>(out[i] * scale) : T{0};
    }
    if (cache) {
        cache->keep = std::move(keep);
        cache->scale = scale;
    }
    return out;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& upstream_grad, const DropoutCache& cache) {
    Tensor<T> dx = upstream_grad;
    dx.drop_grad();
    if (cache.keep.empty()) return dx;
    if (cache.keep.size() != dx.size()) fail(ErrorKind::Usage, "dropout_backward context does not match gradient");
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = cache.keep[i] ? static_cast<T>(dx[i] * cache.scale) : T{0};
    return dx;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    require_rank(logits, 2, "softmax input");
    const std::size_t n = logits.dim(0);
    const std::size_t k = logits.dim(1);
    Tensor<T> probs({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        const T* z = logits.data() + i * k;
        T* p = probs.data() + i * k;
        T top = z[0];
        for (std::size_t j = 0; j < k; ++j) {
            if (!std::isfinite(z[j])) {
                fail(ErrorKind::Numeric, "non-finite logit in row " + std::to_string(i));
            }
            top = std::max(top, z[j]);
        }
        T total{0};
        for (std::size_t j = 0; j < k; ++j) {
            p[j] = std::exp(z[j] - top);
            total += p[j];
        }
        for (std::size_t j = 0; j < k; ++j) p[j] /= total;
    }
    return probs;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& upstream_grad, const Tensor<T>& probs) {
    if (upstream_grad.shape() != probs.shape()) fail(ErrorKind::Shape, "softmax gradient shape mismatch");
    const std::size_t n = probs.dim(0);
    const std::size_t k = probs.dim(1);
    Tensor<T> dz({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        T dot{0};
        for (std::size_t j = 0; j < k; ++j) dot += upstream_grad[i * k + j] * probs[i * k + j];
        for (std::size_t j = 0; j < k; ++j) dz[i * k + j] = probs[i * k + j] * (upstream_grad[i * k + j] - dot);
    }
    return dz;
}

#define PLAQNET_INSTANTIATE_LAYERS(T)                                                                               \
    template Tensor<T> conv2d_forward(const Tensor<T>&, const ConvParams<T>&);                                      \
    template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, ConvParams<T>&, bool);                \
    template Tensor<T> batchnorm_forward(const Tensor<T>&, BatchNormParams<T>&, Mode, const BatchNormConfig&,       \
                                         BatchNormCache*);                                                          \
    template void batchnorm_forward_into(const Tensor<T>&, Tensor<T>&, BatchNormParams<T>&, Mode,                   \
                                         const BatchNormConfig&, BatchNormCache*);                                  \
    template Tensor<T> batchnorm_backward(const Tensor<T>&, const Tensor<T>&, BatchNormParams<T>&,                  \
                                          const BatchNormCache&);                                                   \
    template Tensor<T> relu_forward(const Tensor<T>&);                                                              \
    template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                           \
    template Tensor<T> maxpool2x2_forward(const Tensor<T>&, MaxPoolCache*);                                         \
    template Tensor<T> maxpool2x2_backward(const Tensor<T>&, const MaxPoolCache&);                                  \
    template Tensor<T> global_avg_pool_forward(const Tensor<T>&);                                                   \
    template Tensor<T> global_avg_pool_backward(const Tensor<T>&, const Shape&);                                    \
    template Tensor<T> dense_forward(const Tensor<T>&, const DenseParams<T>&);                                      \
    template DenseGrads<T> dense_backward(const Tensor<T>&, const Tensor<T>&, DenseParams<T>&);                     \
    template Tensor<T> dropout_forward(const Tensor<T>&, double, Mode, Rng&, DropoutCache*);                        \
    template Tensor<T> dropout_backward(const Tensor<T>&, const DropoutCache&);                                     \
    template Tensor<T> softmax(const Tensor<T>&);                                                                   \
    template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&);

PLAQNET_INSTANTIATE_LAYERS(float)
PLAQNET_INSTANTIATE_LAYERS(double)

}  // namespace plaqnet
