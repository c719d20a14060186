#include "plaqnet/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "plaqnet/rng.hpp"

namespace plaqnet {

std::string to_string(OptimizerMode mode) {
    return mode == OptimizerMode::Standard ? "standard" : "paper-literal";
}

OptimizerMode parse_optimizer_mode(const std::string& text) {
    if (text == "standard") return OptimizerMode::Standard;
    if (text == "paper-literal") return OptimizerMode::PaperLiteral;
    fail(ErrorKind::Config, "optimizer must be 'standard' or 'paper-literal', got '" + text + "'");
}

void TrainConfig::validate() const {
    auto bad = [](const std::string& m) { fail(ErrorKind::Config, m); };
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) bad("learning_rate must be positive");
    if (!(momentum > 0.0 && momentum <= 1.0)) bad("momentum must lie in (0, 1]");
    if (batch_size < 1) bad("batch_size must be at least 1");
    if (max_iterations < 1) bad("max_iterations must be at least 1");
    if (augmentation_period < 1) bad("augmentation_period must be at least 1");
    if (validation_period < 1) bad("validation_period must be at least 1");
    if (validation_per_image < 1) bad("validation_per_image must be at least 1");
}

namespace {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::size_t parse_count(const std::string& text, const std::string& key) {
    const auto v = parse_int(text, key);
    if (v < 0) fail(ErrorKind::Config, key + " must be non-negative");
    return static_cast<std::size_t>(v);
}

}  // namespace

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) { return from_key_values(kv, TrainConfig{}); }

TrainConfig TrainConfig::from_key_values(const KeyValues& kv, TrainConfig c) {
    for (const auto& [key, value] : kv) {
        if (key == "learning_rate") {
            c.learning_rate = parse_double(value, key);
        } else if (key == "momentum") {
            c.momentum = parse_double(value, key);
        } else if (key == "batch_size") {
            c.batch_size = parse_count(value, key);
        } else if (key == "max_iterations") {
            c.max_iterations = parse_count(value, key);
        } else if (key == "augmentation_period") {
            c.augmentation_period = parse_count(value, key);
        } else if (key == "validation_period") {
            c.validation_period = parse_count(value, key);
        } else if (key == "validation_per_image") {
            c.validation_per_image = parse_count(value, key);
        } else if (key == "optimizer") {
            c.optimizer = parse_optimizer_mode(value);
        } else if (key == "seed") {
            c.seed = parse_count(value, key);
        } else {
            fail(ErrorKind::Config, "unknown training key '" + key + "'");
        }
    }
    c.validate();
    return c;
}

KeyValues TrainConfig::to_key_values() const {
    return {
        {"learning_rate", format_double(learning_rate)},
        {"momentum", format_double(momentum)},
        {"batch_size", std::to_string(batch_size)},
        {"max_iterations", std::to_string(max_iterations)},
        {"augmentation_period", std::to_string(augmentation_period)},
        {"validation_period", std::to_string(validation_period)},
        {"validation_per_image", std::to_string(validation_per_image)},
        {"optimizer", to_string(optimizer)},
        {"seed", std::to_string(seed)},
    };
}

namespace {

template <typename T>
void check_probs(const Tensor<T>& probs, std::size_t n) {
    if (probs.rank() != 2 || probs.dim(1) != kNumClasses || probs.dim(0) != n) {
        fail(ErrorKind::Shape, "expected probabilities [" + std::to_string(n) + ", 5], got " +
                                   shape_string(probs.shape()));
    }
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < kNumClasses; ++j) sum += static_cast<double>(probs[i * kNumClasses + j]);
        if (!(std::abs(sum - 1.0) <= 1e-6)) {
            fail(ErrorKind::Numeric, "probability row " + std::to_string(i) + " sums to " + format_double(sum));
        }
    }
}

}  // namespace

template <typename T>
double weighted_cross_entropy(const Tensor<T>& probs, const Tensor<T>& one_hot_labels, std::span<const double> weights) {
    const std::size_t n = weights.size();
    if (n == 0) fail(ErrorKind::Shape, "empty batch");
    check_probs(probs, n);
    if (one_hot_labels.shape() != probs.shape()) {
        fail(ErrorKind::Shape, "label shape " + shape_string(one_hot_labels.shape()) + " does not match " +
                                   shape_string(probs.shape()));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < kNumClasses; ++j) {
            const double p = std::max(static_cast<double>(probs[i * kNumClasses + j]), kProbabilityFloor);
            dot += static_cast<double>(one_hot_labels[i * kNumClasses + j]) * std::log(p);
        }
        total += weights[i] * dot;
    }
    return -total / static_cast<double>(n);
}

template <typename T>
double weighted_cross_entropy(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                              std::span<const double> weights) {
    if (labels.size() != weights.size()) fail(ErrorKind::Shape, "labels and weights differ in length");
    return weighted_cross_entropy(probs, one_hot<T>(labels), weights);
}

template <typename T>
Tensor<T> weighted_cross_entropy_logit_grad(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                                            std::span<const double> weights) {
    const std::size_t n = labels.size();
    if (weights.size() != n || n == 0) fail(ErrorKind::Shape, "labels and weights differ in length");
    check_probs(probs, n);
    Tensor<T> grad(probs.shape());
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= kNumClasses) fail(ErrorKind::Shape, "label outside 0..4");
        const double scale = weights[i] / static_cast<double>(n);
        for (std::size_t j = 0; j < kNumClasses; ++j) {
            const double y = j == labels[i] ? 1.0 : 0.0;
            grad[i * kNumClasses + j] = static_cast<T>(scale * (static_cast<double>(probs[i * kNumClasses + j]) - y));
        }
    }
    return grad;
}

template <typename T>
Tensor<T> one_hot(std::span<const std::uint8_t> labels) {
    if (labels.empty()) fail(ErrorKind::Shape, "empty label list");
    Tensor<T> t({labels.size(), kNumClasses});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= kNumClasses) fail(ErrorKind::Shape, "label outside 0..4");
        t[i * kNumClasses + labels[i]] = T{1};
    }
    return t;
}

template <typename T>
void optimizer_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double learning_rate,
                    double momentum, OptimizerMode mode) {
    if (grads.size() != params.size()) fail(ErrorKind::Shape, "gradient size does not match parameters");
    const T eta = static_cast<T>(learning_rate);
    const T lambda = static_cast<T>(momentum);
    if (mode == OptimizerMode::Standard) {
        if (velocity.size() != params.size()) fail(ErrorKind::Shape, "velocity size does not match parameters");
        for (std::size_t i = 0; i < params.size(); ++i) {
            velocity[i] = lambda * velocity[i] - eta * grads[i];
            params[i] = params[i] + velocity[i];
        }
    } else {
        const T keep = T{1} - lambda;
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i] = lambda * params[i] + keep * (-(eta * grads[i]));
        }
    }
}

template <typename T>
Optimizer<T>::Optimizer(PlaqueNet<T>& net, const TrainConfig& config)
    : learning_rate_(config.learning_rate), momentum_(config.momentum), mode_(config.optimizer) {
    for (auto& a : net.arrays()) {
        if (a.trainable) velocity_.emplace_back(a.tensor->size(), T{0});
    }
}

template <typename T>
void Optimizer<T>::step(PlaqueNet<T>& net) {
    ++iteration_;
    std::size_t k = 0;
    auto arrays = net.arrays();
    for (auto& a : arrays) {
        if (!a.trainable) continue;
        const auto g = a.tensor->ensure_grad();
        for (T v : g) {
            if (!std::isfinite(static_cast<double>(v))) {
                fail(ErrorKind::Divergence, "non-finite gradient in " + a.name + " at iteration " +
                                                std::to_string(iteration_));
            }
        }
    }
    for (auto& a : arrays) {
        if (!a.trainable) continue;
        optimizer_step<T>(a.tensor->values(), a.tensor->grad(), velocity_[k++], learning_rate_, momentum_, mode_);
    }
}

#define PLAQNET_INSTANTIATE_TRAIN(T)                                                                                 \
    template double weighted_cross_entropy<T>(const Tensor<T>&, const Tensor<T>&, std::span<const double>);         \
    template double weighted_cross_entropy<T>(const Tensor<T>&, std::span<const std::uint8_t>,                      \
                                              std::span<const double>);                                             \
    template Tensor<T> weighted_cross_entropy_logit_grad<T>(const Tensor<T>&, std::span<const std::uint8_t>,        \
                                                            std::span<const double>);                               \
    template Tensor<T> one_hot<T>(std::span<const std::uint8_t>);                                                   \
    template void optimizer_step<T>(std::span<T>, std::span<const T>, std::span<T>, double, double, OptimizerMode); \
    template class Optimizer<T>;

PLAQNET_INSTANTIATE_TRAIN(float)
PLAQNET_INSTANTIATE_TRAIN(double)

std::vector<std::uint8_t> classify_patches(PlaqueNet<float>& net, std::span<const PatchSample> samples,
                                           std::size_t batch) {
    std::vector<std::uint8_t> out;
    out.reserve(samples.size());
    for (std::size_t start = 0; start < samples.size(); start += batch) {
        const std::size_t n = std::min(batch, samples.size() - start);
        const auto probs = net.predict(stack_patches(samples.subspan(start, n)));
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < kNumClasses; ++j) {
                if (probs[i * kNumClasses + j] > probs[i * kNumClasses + best]) best = j;
            }
            out.push_back(static_cast<std::uint8_t>(best));
        }
    }
    return out;
}

double patch_accuracy(PlaqueNet<float>& net, std::span<const PatchSample> samples, std::size_t batch) {
    if (samples.empty()) fail(ErrorKind::Usage, "no samples to score");
    const auto pred = classify_patches(net, samples, batch);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) correct += pred[i] == samples[i].label;
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train(const TrainData& data, const TrainConfig& config, const TrainProgress& progress) {
    config.validate();
    if (data.train.empty()) fail(ErrorKind::Usage, "no training images");
    if (data.validation.empty()) fail(ErrorKind::Usage, "no validation images");

    TrainResult result;
    result.class_counts = count_classes(data.train);
    result.class_weights = class_weights(result.class_counts);

    Rng sample_rng(Rng::derive(config.seed, 1));
    Rng augment_rng(Rng::derive(config.seed, 2));
    Rng dropout_rng(Rng::derive(config.seed, 3));
    Rng validation_rng(Rng::derive(config.seed, 4));

    PatchSampler sampler(data.train, result.class_weights);
    const auto validation = build_validation_set(data.validation, config.validation_per_image, validation_rng);

    PlaqueNet<float> net;
    net.initialize(Rng::derive(config.seed, 0));
    Optimizer<float> optimizer(net, config);

    bool have_best = false;
    result.best.net = net;
    result.best.meta = {0, 0.0, config.seed};

    for (std::size_t t = 1; t <= config.max_iterations; ++t) {
        if ((t - 1) % config.augmentation_period == 0) sampler.augment(augment_rng);
        const auto batch = sampler.sample(config.batch_size, sample_rng);
        std::vector<std::uint8_t> labels(batch.size());
        std::vector<double> weights(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            labels[i] = batch[i].label;
            weights[i] = batch[i].weight;
        }

        TrainLogRow row;
        row.iteration = t;
        try {
            const auto probs = net.forward(stack_patches(batch), Mode::Train, dropout_rng);
            row.loss = weighted_cross_entropy(probs, std::span<const std::uint8_t>(labels), weights);
            if (!std::isfinite(row.loss)) fail(ErrorKind::Numeric, "loss is not finite");
            net.zero_grad();
            net.backward(weighted_cross_entropy_logit_grad(probs, std::span<const std::uint8_t>(labels), weights));
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::Numeric) throw;
            fail(ErrorKind::Divergence, "training diverged at iteration " + std::to_string(t) + ": " + e.what());
        }
        optimizer.step(net);
        net.clear_activations();

        if (t % config.validation_period == 0 || t == config.max_iterations) {
            const double acc = patch_accuracy(net, validation);
            row.val_accuracy = acc;
            if (!have_best || acc > result.best.meta.best_val_accuracy) {
                have_best = true;
                result.best.net = net;
                result.best.meta = {t, acc, config.seed};
            }
        }
        result.log.push_back(row);
        if (progress) progress(row);
    }
    result.final_net = std::move(net);
    return result;
}

void write_train_log(std::span<const TrainLogRow> log, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out << "iteration,loss,val_accuracy\n";
    for (const auto& r : log) {
        out << r.iteration << ',' << format_double(r.loss) << ',';
        if (r.val_accuracy) out << format_double(*r.val_accuracy);
        out << '\n';
    }
    if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace plaqnet
