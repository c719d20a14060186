#pragma once

// Weighted cross-entropy, the parameter update rules and the training loop
// with periodic augmentation and best-on-validation model selection.

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plaqnet/image.hpp"
#include "plaqnet/model.hpp"
#include "plaqnet/sampler.hpp"

namespace plaqnet {

enum class OptimizerMode {
    Standard,      // v <- lambda v - eta g; theta <- theta + v
    PaperLiteral,  // theta <- lambda theta + (1 - lambda)(-eta g)
};

std::string to_string(OptimizerMode mode);
OptimizerMode parse_optimizer_mode(const std::string& text);

struct TrainConfig {
    double learning_rate = 1e-4;
    double momentum = 0.9;
    std::size_t batch_size = 216;
    std::size_t max_iterations = 20000;
    std::size_t augmentation_period = 200;
    std::size_t validation_period = 500;
    std::size_t validation_per_image = 1000;
    OptimizerMode optimizer = OptimizerMode::Standard;
    std::uint64_t seed = 0;

    /// Throws Config on out-of-range values.
    void validate() const;

    /// Keys are the field names; unknown keys are rejected.
    static TrainConfig from_key_values(const KeyValues& kv);
    static TrainConfig from_key_values(const KeyValues& kv, TrainConfig base);
    KeyValues to_key_values() const;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// -(1/N) sum_i w_i y_i . log(max(p_i, floor)) with one-hot rows y_i.
/// Throws Shape on mismatched sizes and Numeric when a probability row does
/// not sum to 1 within 1e-6.
template <typename T>
double weighted_cross_entropy(const Tensor<T>& probs, const Tensor<T>& one_hot, std::span<const double> weights);

/// Same loss with integer class labels.
template <typename T>
double weighted_cross_entropy(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                              std::span<const double> weights);

/// dL/dlogits = (w_i / N) (p_i - y_i) for softmax outputs p.
template <typename T>
Tensor<T> weighted_cross_entropy_logit_grad(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                                            std::span<const double> weights);

template <typename T>
Tensor<T> one_hot(std::span<const std::uint8_t> labels);

/// One update of a single array. `velocity` is read and written in standard
/// mode and ignored in paper-literal mode.
template <typename T>
void optimizer_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double learning_rate,
                    double momentum, OptimizerMode mode);

/// Velocity buffers mirroring the trainable arrays of a network.
template <typename T>
class Optimizer {
public:
    Optimizer(PlaqueNet<T>& net, const TrainConfig& config);

    /// Applies one update from the grad slots. Throws Divergence when any
    /// gradient is non-finite.
    void step(PlaqueNet<T>& net);

    std::uint64_t iteration() const noexcept { return iteration_; }

private:
    double learning_rate_;
    double momentum_;
    OptimizerMode mode_;
    std::vector<std::vector<T>> velocity_;
    std::uint64_t iteration_ = 0;
};

/// Predicted class per sample (argmax, lowest index on ties), inference mode.
std::vector<std::uint8_t> classify_patches(PlaqueNet<float>& net, std::span<const PatchSample> samples,
                                           std::size_t batch = 256);

/// Share of samples whose predicted class equals the label.
double patch_accuracy(PlaqueNet<float>& net, std::span<const PatchSample> samples, std::size_t batch = 256);

struct TrainLogRow {
    std::size_t iteration = 0;
    double loss = 0.0;
    std::optional<double> val_accuracy;

    bool operator==(const TrainLogRow&) const = default;
};

struct TrainData {
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> validation;
};

struct TrainResult {
    Checkpoint best;
    std::vector<TrainLogRow> log;
    ClassCounts class_counts{};
    std::array<double, kNumClasses> class_weights{};
    PlaqueNet<float> final_net;
};

using TrainProgress = std::function<void(const TrainLogRow&)>;

/// Runs the loop: every augmentation_period iterations (starting with the
/// first) the training images are re-rotated; each iteration draws a batch,
/// takes one optimizer step and logs the loss; every validation_period
/// iterations and after the last one the fixed validation set is scored and
/// a strictly better score replaces the retained checkpoint.
TrainResult train(const TrainData& data, const TrainConfig& config, const TrainProgress& progress = {});

void write_train_log(std::span<const TrainLogRow> log, const std::filesystem::path& path);

}  // namespace plaqnet
