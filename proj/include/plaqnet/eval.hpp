#pragma once

// Metrics, fold planning, full-frame segmentation and the cross-validation
// protocol.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plaqnet/image.hpp"
#include "plaqnet/model.hpp"
#include "plaqnet/sampler.hpp"
#include "plaqnet/train.hpp"

namespace plaqnet {

/// Rows are the true class, columns the predicted class.
struct ConfusionMatrix {
    std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

    void add(std::size_t truth, std::size_t predicted, std::uint64_t n = 1);
    std::uint64_t total() const;
    std::uint64_t row_sum(std::size_t cls) const;
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    bool operator==(const ConfusionMatrix&) const = default;
};

/// TP / (TP + FN); empty when the class never occurs in the truth.
std::optional<double> sensitivity(const ConfusionMatrix& m, std::size_t cls);

/// Trace over total. Throws Usage on an empty matrix.
double overall_accuracy(const ConfusionMatrix& m);

/// Counts (truth, prediction) pairs over pixels where `mask` is set, or over
/// all pixels when `mask` is null.
ConfusionMatrix confusion_from_maps(const Image8& truth, const Image8& predicted, const Image8* mask = nullptr);

/// Per-class share of all pixels in the maps; sums to 1.
std::array<double, kNumClasses> class_fractions(std::span<const Image8> label_maps);

struct FoldPlan {
    std::vector<std::vector<std::size_t>> folds;  // indices into the image list

    /// Throws Usage unless the folds are disjoint and cover 0..n-1.
    void validate(std::size_t n) const;
};

/// Seeded Fisher-Yates shuffle split into `k` folds whose sizes differ by at
/// most one, larger folds first. Throws Usage when n < k.
FoldPlan make_fold_plan(std::size_t n, std::size_t k, std::uint64_t seed);

/// Keeps each patient's images in one fold: patients are shuffled and each is
/// given to the currently smallest fold.
FoldPlan make_patient_fold_plan(std::span<const std::string> patient_ids, std::size_t k, std::uint64_t seed);

void write_fold_plan(const FoldPlan& plan, std::span<const std::string> ids, const std::filesystem::path& path);

/// Anything that maps a batch of [N, 1, 51, 51] patches to class indices.
class PatchClassifier {
public:
    virtual ~PatchClassifier() = default;
    virtual std::vector<std::uint8_t> classify(const Tensor<float>& patches) = 0;
};

class NetClassifier final : public PatchClassifier {
public:
    explicit NetClassifier(PlaqueNet<float>& net) : net_(net) {}
    std::vector<std::uint8_t> classify(const Tensor<float>& patches) override;

private:
    PlaqueNet<float>& net_;
};

struct Segmentation {
    Image8 labels;     // BK outside the mask
    Image8 evaluated;  // 1 where a patch was actually classified
};

/// Classifies the reflect-padded patch around mask pixels. With stride 1
/// every mask pixel is classified; with stride s each s-by-s block classifies
/// the mask pixel nearest its centre and copies the result to the block's
/// other mask pixels. Throws EmptyMask when the mask has no pixels.
Segmentation segment_image(PatchClassifier& classifier, const Image8& image, const Image8& mask,
                           std::size_t stride = 1, std::size_t batch = 256);

/// Palette: LT red, FT dark green, MT light green, CA white; BK pixels show
/// the grayscale source.
inline constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kPalette{{
    {0, 0, 0},
    {255, 0, 0},
    {0, 100, 0},
    {144, 238, 144},
    {255, 255, 255},
}};

RgbImage make_overlay(const Image8& image, const Image8& labels);
void emit_overlay(const Image8& image, const Image8& labels, const std::filesystem::path& path);

struct CrossValConfig {
    std::size_t folds = 5;
    std::uint64_t seed = 0;
    bool by_patient = false;
    std::size_t eval_stride = 1;
    std::size_t test_patches_per_image = 1000;
    TrainConfig train;
};

struct FoldReport {
    std::size_t fold = 0;
    std::vector<std::string> train_ids;
    std::vector<std::string> validation_ids;
    std::vector<std::string> test_ids;
    ConfusionMatrix pixels;   // segmentation of the test frames, mask pixels
    ConfusionMatrix patches;  // sampled test patches
    double best_val_accuracy = 0.0;
    std::uint64_t best_iteration = 0;
    std::vector<TrainLogRow> log;
    std::vector<Segmentation> segmentations;  // aligned with test_ids
};

struct MetricSummary {
    double accuracy = 0.0;
    std::array<std::optional<double>, kNumClasses> sensitivity{};
};

MetricSummary summarize(const ConfusionMatrix& m);

/// Mean accuracy over folds and, per class, the mean over folds where the
/// sensitivity is defined.
MetricSummary mean_summary(std::span<const MetricSummary> folds);

struct CrossValReport {
    FoldPlan plan;
    std::vector<FoldReport> folds;
    MetricSummary mean_pixels;
    MetricSummary mean_patches;
};

using FoldProgress = std::function<void(std::size_t fold, const TrainLogRow& row)>;

/// Fold k is the test set, fold (k + 1) mod K selects the checkpoint and the
/// remaining folds train. Throws Usage with fewer images than folds.
CrossValReport cross_validate(std::span<const LabeledImage> images, const CrossValConfig& config,
                              const FoldProgress& progress = {});

/// CSV: one row per fold plus a mean row; accuracy and per-class sensitivity
/// for pixel and patch level. Undefined sensitivities are left blank.
void write_metrics_csv(const CrossValReport& report, const std::filesystem::path& path);
std::string format_summary(const CrossValReport& report);

void write_confusion_csv(const ConfusionMatrix& m, const std::filesystem::path& path);

}  // namespace plaqnet
