#pragma once

// Differentiable layer primitives over NCHW tensors. Forward functions are
// pure apart from batch-norm running statistics; backward functions return the
// input gradient and accumulate parameter gradients into the parameters' grad
// slots. Instantiated for float and double.

#include <cstdint>
#include <vector>

#include "plaqnet/rng.hpp"
#include "plaqnet/tensor.hpp"

namespace plaqnet {

enum class Mode { Train, Inference };

template <typename T>
struct ConvParams {
    Tensor<T> weight;  // [F, C, k, k]
    Tensor<T> bias;    // [F]

    std::size_t out_channels() const { return weight.dim(0); }
    std::size_t in_channels() const { return weight.dim(1); }
    std::size_t kernel() const { return weight.dim(2); }
};

template <typename T>
struct ConvGrads {
    Tensor<T> input_grad;
    Tensor<T> weight_grad;
    Tensor<T> bias_grad;
};

/// Stride-1 convolution with same-size zero padding; kernel side must be odd.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvParams<T>& params);

/// Exact gradients of conv2d_forward. Parameter gradients are also added to
/// params.weight / params.bias grad slots. With need_input_grad = false the
/// returned input_grad is empty.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& upstream_grad, const Tensor<T>& saved_input, ConvParams<T>& params,
                             bool need_input_grad = true);

template <typename T>
struct BatchNormParams {
    Tensor<T> gamma;         // trainable
    Tensor<T> beta;          // trainable
    Tensor<T> running_mean;  // statistics
    Tensor<T> running_var;   // statistics

    static BatchNormParams identity(std::size_t channels) {
        return {Tensor<T>({channels}, T{1}), Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{0}),
                Tensor<T>({channels}, T{1})};
    }
};

struct BatchNormConfig {
    double epsilon = 1e-5;
    double momentum = 0.99;  // running = momentum * running + (1 - momentum) * batch
};

/// Per-channel batch statistics kept from a train-mode forward pass.
struct BatchNormCache {
    std::vector<double> mean;
    std::vector<double> inv_std;
    std::size_t count = 0;  // N * H * W
};

/// Train mode normalises with batch statistics (biased variance), updates the
/// running statistics and fills `cache`; inference mode uses running
/// statistics. Accepts [N, C, H, W] or [N, C].
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, BatchNormParams<T>& params, Mode mode,
                            const BatchNormConfig& config, BatchNormCache* cache = nullptr);

/// In-place variant writing into `output` (which may alias `input`'s storage
/// only when no backward pass follows).
template <typename T>
void batchnorm_forward_into(const Tensor<T>& input, Tensor<T>& output, BatchNormParams<T>& params, Mode mode,
                            const BatchNormConfig& config, BatchNormCache* cache);

template <typename T>
Tensor<T> batchnorm_backward(const Tensor<T>& upstream_grad, const Tensor<T>& saved_input,
                             BatchNormParams<T>& params, const BatchNormCache& cache);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input);

/// Gradient given the ReLU *output* (positive exactly where input was).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& upstream_grad, const Tensor<T>& saved_output);

struct MaxPoolCache {
    Shape input_shape;
    std::vector<std::uint32_t> argmax;  // flat input index per output element
};

/// 2x2 window, stride 2, floor on odd sizes. Ties pick the first maximum in
/// row-major window order.
template <typename T>
Tensor<T> maxpool2x2_forward(const Tensor<T>& input, MaxPoolCache* cache = nullptr);

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& upstream_grad, const MaxPoolCache& cache);

/// [N, C, H, W] -> [N, C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& input);

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& upstream_grad, const Shape& input_shape);

template <typename T>
struct DenseParams {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out]
};

template <typename T>
struct DenseGrads {
    Tensor<T> input_grad;
    Tensor<T> weight_grad;
    Tensor<T> bias_grad;
};

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const DenseParams<T>& params);

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& upstream_grad, const Tensor<T>& saved_input, DenseParams<T>& params);

struct DropoutCache {
    std::vector<std::uint8_t> keep;
    double scale = 1.0;
};

/// Inverted dropout: train mode zeroes each element with probability `ratio`
/// and scales survivors by 1 / (1 - ratio); inference mode is the identity.
template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& input, double ratio, Mode mode, Rng& rng, DropoutCache* cache = nullptr);

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& upstream_grad, const DropoutCache& cache);

/// Row-wise softmax over [N, K] with max subtraction. Non-finite logits raise
/// a Numeric error.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

/// Vector-Jacobian product of softmax given its output.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& upstream_grad, const Tensor<T>& probs);

}  // namespace plaqnet
