#pragma once

// The plaque classifier network: 9 conv blocks (3x3 conv, batch norm, ReLU),
// 2x2 max pooling after blocks 3 and 6, global average pooling, a 512-unit
// dense layer, dropout and a 5-way dense layer with softmax.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "plaqnet/layers.hpp"
#include "plaqnet/rng.hpp"
#include "plaqnet/tensor.hpp"

namespace plaqnet {

inline constexpr std::size_t kNumClasses = 5;
inline constexpr std::size_t kPatchSize = 51;

enum class LayerKind { ConvBlock, MaxPool, GlobalAvgPool, Dense, Dropout, Softmax };

struct LayerSpec {
    LayerKind kind;
    std::size_t in = 0;   // channels or features
    std::size_t out = 0;
    std::size_t kernel = 0;
    double ratio = 0.0;   // dropout only

    bool operator==(const LayerSpec&) const = default;
};

struct ArchitectureSpec {
    std::size_t input_channels = 1;
    std::size_t patch_size = kPatchSize;
    std::vector<LayerSpec> layers;

    /// The fixed layer list this library implements.
    static ArchitectureSpec plaquenet();

    /// Throws Architecture unless the spec is exactly plaquenet().
    void validate() const;

    /// One line per layer; the text the fingerprint is computed over.
    std::string canonical() const;

    /// 64-bit FNV-1a of canonical().
    std::uint64_t fingerprint() const;

    /// Trainable-parameter total computed from the layer list alone.
    std::size_t trainable_param_count() const;
};

/// (label, shape) pairs recorded by a forward pass.
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

template <typename T>
struct ConvBlock {
    ConvParams<T> conv;
    BatchNormParams<T> bn;
};

template <typename Ptr>
struct NamedArrayOf {
    std::string name;
    Ptr tensor;
    bool trainable;
};

template <typename T>
using NamedArray = NamedArrayOf<Tensor<T>*>;
template <typename T>
using ConstNamedArray = NamedArrayOf<const Tensor<T>*>;

template <typename T>
class PlaqueNet {
public:
    /// Zero-initialised network for `spec`; throws Architecture on any
    /// deviation from the fixed layer list.
    explicit PlaqueNet(const ArchitectureSpec& spec = ArchitectureSpec::plaquenet());

    const ArchitectureSpec& spec() const noexcept { return spec_; }

    /// He-normal weights, zero biases and beta, unit gamma, fresh running stats.
    void initialize(std::uint64_t seed);

    /// Class probabilities [N, 5] for input [N, 1, H, W]. Train mode keeps the
    /// activations needed by backward(); inference mode keeps nothing.
    Tensor<T> forward(const Tensor<T>& input, Mode mode, Rng& rng, ShapeTrace* trace = nullptr);

    /// Inference-mode forward without a random source.
    Tensor<T> predict(const Tensor<T>& input);

    /// Logits of the most recent forward pass.
    const Tensor<T>& logits() const noexcept { return logits_; }

    /// Backpropagates dL/dlogits through the last train-mode forward pass and
    /// accumulates into the trainable arrays' grad slots.
    void backward(const Tensor<T>& logits_grad);

    void zero_grad();

    /// Hash of every ReLU on/off state and max-pool argmax of the last
    /// train-mode forward pass. Two passes with equal signatures lie on the
    /// same linear piece of the network.
    std::uint64_t activation_signature() const;

    /// All arrays in a fixed order: trainable ones and batch-norm statistics.
    std::vector<NamedArray<T>> arrays();
    std::vector<ConstNamedArray<T>> arrays() const;

    std::vector<ConvBlock<T>>& blocks() noexcept { return blocks_; }
    DenseParams<T>& fc1() noexcept { return fc1_; }
    DenseParams<T>& fc2() noexcept { return fc2_; }
    const BatchNormConfig& bn_config() const noexcept { return bn_config_; }

    /// Releases stored activations.
    void clear_activations();

    template <typename U>
    PlaqueNet<U> cast() const;

private:
    struct BlockState {
        Tensor<T> input;
        Tensor<T> pre_bn;
        Tensor<T> output;  // kept only when it is not the next block's input
        BatchNormCache bn;
    };

    ArchitectureSpec spec_;
    std::vector<ConvBlock<T>> blocks_;
    DenseParams<T> fc1_;
    DenseParams<T> fc2_;
    double dropout_ratio_ = 0.5;
    BatchNormConfig bn_config_;

    bool has_context_ = false;
    std::vector<BlockState> block_states_;
    std::vector<std::size_t> pool_after_;  // block indices followed by max pooling
    std::vector<MaxPoolCache> pool_caches_;
    Shape gap_input_shape_;
    Tensor<T> fc1_input_;
    Tensor<T> fc2_input_;
    DropoutCache dropout_cache_;
    Tensor<T> logits_;

    template <typename U>
    friend class PlaqueNet;
};

template <typename T>
PlaqueNet<T> build_plaquenet(std::uint64_t seed);

/// Sum of the sizes of every trainable array in the network.
template <typename T>
std::size_t count_trainable_params(const PlaqueNet<T>& net);

inline constexpr std::size_t kReferenceParamCount = 550725;

struct CheckpointMeta {
    std::uint64_t iteration = 0;
    double best_val_accuracy = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
    PlaqueNet<float> net;
    CheckpointMeta meta;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const PlaqueNet<float>& net, const CheckpointMeta& meta);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const PlaqueNet<float>& net, const CheckpointMeta& meta, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace plaqnet
