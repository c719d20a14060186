#include "plaqnet/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "plaqnet/rng.hpp"

namespace plaqnet {

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t n) {
    if (truth >= kNumClasses || predicted >= kNumClasses) fail(ErrorKind::Shape, "class index outside 0..4");
    counts[truth][predicted] += n;
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (const auto& row : counts) {
        for (auto v : row) t += v;
    }
    return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t cls) const {
    std::uint64_t t = 0;
    for (auto v : counts.at(cls)) t += v;
    return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    for (std::size_t i = 0; i < kNumClasses; ++i) {
        for (std::size_t j = 0; j < kNumClasses; ++j) counts[i][j] += other.counts[i][j];
    }
    return *this;
}

std::optional<double> sensitivity(const ConfusionMatrix& m, std::size_t cls) {
    const auto positives = m.row_sum(cls);
    if (positives == 0) return std::nullopt;
    return static_cast<double>(m.counts[cls][cls]) / static_cast<double>(positives);
}

double overall_accuracy(const ConfusionMatrix& m) {
    const auto total = m.total();
    if (total == 0) fail(ErrorKind::Usage, "accuracy of an empty confusion matrix");
    std::uint64_t trace = 0;
    for (std::size_t i = 0; i < kNumClasses; ++i) trace += m.counts[i][i];
    return static_cast<double>(trace) / static_cast<double>(total);
}

ConfusionMatrix confusion_from_maps(const Image8& truth, const Image8& predicted, const Image8* mask) {
    if (truth.width != predicted.width || truth.height != predicted.height ||
        (mask && (mask->width != truth.width || mask->height != truth.height))) {
        fail(ErrorKind::Shape, "label maps differ in size");
    }
    ConfusionMatrix m;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (mask && !mask->data[i]) continue;
        m.add(truth.data[i], predicted.data[i]);
    }
    return m;
}

std::array<double, kNumClasses> class_fractions(std::span<const Image8> label_maps) {
    std::array<std::uint64_t, kNumClasses> counts{};
    std::uint64_t total = 0;
    for (const auto& map : label_maps) {
        for (auto v : map.data) {
            if (v >= kNumClasses) fail(ErrorKind::Shape, "label value outside 0..4");
            ++counts[v];
            ++total;
        }
    }
    if (total == 0) fail(ErrorKind::Usage, "no label pixels");
    std::array<double, kNumClasses> out{};
    for (std::size_t j = 0; j < kNumClasses; ++j) out[j] = static_cast<double>(counts[j]) / static_cast<double>(total);
    return out;
}

void FoldPlan::validate(std::size_t n) const {
    std::vector<int> seen(n, 0);
    for (const auto& f : folds) {
        for (auto i : f) {
            if (i >= n || seen[i]++) fail(ErrorKind::Usage, "fold plan is not a partition");
        }
    }
    if (std::count(seen.begin(), seen.end(), 1) != static_cast<long>(n)) {
        fail(ErrorKind::Usage, "fold plan does not cover every image");
    }
}

namespace {

template <typename V>
void fisher_yates(std::vector<V>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

FoldPlan make_fold_plan(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 2) fail(ErrorKind::Usage, "at least two folds are required");
    if (n < k) fail(ErrorKind::Usage, std::to_string(n) + " images cannot fill " + std::to_string(k) + " folds");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    fisher_yates(order, rng);
    FoldPlan plan;
    plan.folds.resize(k);
    std::size_t pos = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t size = n / k + (f < n % k ? 1 : 0);
        plan.folds[f].assign(order.begin() + static_cast<long>(pos), order.begin() + static_cast<long>(pos + size));
        pos += size;
    }
    return plan;
}

FoldPlan make_patient_fold_plan(std::span<const std::string> patient_ids, std::size_t k, std::uint64_t seed) {
    if (k < 2) fail(ErrorKind::Usage, "at least two folds are required");
    std::map<std::string, std::vector<std::size_t>> by_patient;
    for (std::size_t i = 0; i < patient_ids.size(); ++i) by_patient[patient_ids[i]].push_back(i);
    if (by_patient.size() < k) {
        fail(ErrorKind::Usage, std::to_string(by_patient.size()) + " patients cannot fill " + std::to_string(k) +
                                   " folds");
    }
    std::vector<std::string> patients;
    for (const auto& [p, _] : by_patient) patients.push_back(p);
    Rng rng(seed);
    fisher_yates(patients, rng);
    FoldPlan plan;
    plan.folds.resize(k);
    for (const auto& p : patients) {
        auto smallest = std::min_element(plan.folds.begin(), plan.folds.end(),
                                         [](const auto& a, const auto& b) { return a.size() < b.size(); });
        const auto& imgs = by_patient[p];
        smallest->insert(smallest->end(), imgs.begin(), imgs.end());
    }
    return plan;
}

void write_fold_plan(const FoldPlan& plan, std::span<const std::string> ids, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    for (std::size_t f = 0; f < plan.folds.size(); ++f) {
        out << "fold " << f << ':';
        for (auto i : plan.folds[f]) out << ' ' << ids[i];
        out << '\n';
    }
}

std::vector<std::uint8_t> NetClassifier::classify(const Tensor<float>& patches) {
    const auto probs = net_.predict(patches);
    const std::size_t n = probs.dim(0);
    std::vector<std::uint8_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < kNumClasses; ++j) {
            if (probs[i * kNumClasses + j] > probs[i * kNumClasses + best]) best = j;
        }
        out[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

Segmentation segment_image(PatchClassifier& classifier, const Image8& image, const Image8& mask, std::size_t stride,
                           std::size_t batch) {
    if (mask.width != image.width || mask.height != image.height) fail(ErrorKind::Shape, "mask size differs from image");
    if (stride < 1 || batch < 1) fail(ErrorKind::Usage, "stride and batch must be positive");
    const std::size_t w = image.width;
    const std::size_t h = image.height;

    // Each block contributes the mask pixel nearest its centre.
    std::vector<std::uint32_t> targets;
    std::vector<std::uint32_t> owner(w * h, UINT32_MAX);
    for (std::size_t by = 0; by < h; by += stride) {
        for (std::size_t bx = 0; bx < w; bx += stride) {
            const std::size_t ex = std::min(bx + stride, w);
            const std::size_t ey = std::min(by + stride, h);
            const double cx = static_cast<double>(bx) + static_cast<double>(stride - 1) / 2.0;
            const double cy = static_cast<double>(by) + static_cast<double>(stride - 1) / 2.0;
            double best = -1.0;
            std::uint32_t pick = 0;
            for (std::size_t y = by; y < ey; ++y) {
                for (std::size_t x = bx; x < ex; ++x) {
                    if (!mask.at(x, y)) continue;
                    const double d = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    if (best < 0.0 || d < best) {
                        best = d;
                        pick = static_cast<std::uint32_t>(y * w + x);
                    }
                }
            }
            if (best < 0.0) continue;
            const auto slot = static_cast<std::uint32_t>(targets.size());
            targets.push_back(pick);
            for (std::size_t y = by; y < ey; ++y) {
                for (std::size_t x = bx; x < ex; ++x) {
                    if (mask.at(x, y)) owner[y * w + x] = slot;
                }
            }
        }
    }
    if (targets.empty()) fail(ErrorKind::EmptyMask, "tissue mask is empty");

    constexpr std::size_t area = kPatchSize * kPatchSize;
    std::vector<std::uint8_t> predicted(targets.size());
    for (std::size_t start = 0; start < targets.size(); start += batch) {
        const std::size_t n = std::min(batch, targets.size() - start);
        Tensor<float> patches({n, 1, kPatchSize, kPatchSize});
        for (std::size_t i = 0; i < n; ++i) {
            const auto idx = targets[start + i];
            extract_patch_reflect(image, idx % w, idx / w, patches.data() + i * area);
        }
        const auto out = classifier.classify(patches);
        if (out.size() != n) fail(ErrorKind::Shape, "classifier returned the wrong number of labels");
        for (std::size_t i = 0; i < n; ++i) {
            if (out[i] >= kNumClasses) fail(ErrorKind::Shape, "classifier returned a label outside 0..4");
            predicted[start + i] = out[i];
        }
    }

    Segmentation seg{Image8(w, h), Image8(w, h)};
    for (std::size_t i = 0; i < w * h; ++i) {
        if (owner[i] != UINT32_MAX) seg.labels.data[i] = predicted[owner[i]];
    }
    for (auto idx : targets) seg.evaluated.data[idx] = 1;
    return seg;
}

RgbImage make_overlay(const Image8& image, const Image8& labels) {
    if (image.width != labels.width || image.height != labels.height) {
        fail(ErrorKind::Shape, "overlay label map size differs from the image");
    }
    RgbImage out(image.width, image.height);
    for (std::size_t i = 0; i < image.size(); ++i) {
        const auto cls = labels.data[i];
        if (cls >= kNumClasses) fail(ErrorKind::Shape, "label value outside 0..4");
        for (std::size_t c = 0; c < 3; ++c) out.data[3 * i + c] = cls == 0 ? image.data[i] : kPalette[cls][c];
    }
    return out;
}

void emit_overlay(const Image8& image, const Image8& labels, const std::filesystem::path& path) {
    write_png(make_overlay(image, labels), path);
}

MetricSummary summarize(const ConfusionMatrix& m) {
    MetricSummary s;
    s.accuracy = overall_accuracy(m);
    for (std::size_t j = 0; j < kNumClasses; ++j) s.sensitivity[j] = sensitivity(m, j);
    return s;
}

MetricSummary mean_summary(std::span<const MetricSummary> folds) {
    if (folds.empty()) fail(ErrorKind::Usage, "no folds to average");
    MetricSummary out;
    for (const auto& f : folds) out.accuracy += f.accuracy / static_cast<double>(folds.size());
    for (std::size_t j = 0; j < kNumClasses; ++j) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& f : folds) {
            if (f.sensitivity[j]) {
                sum += *f.sensitivity[j];
                ++n;
            }
        }
        if (n > 0) out.sensitivity[j] = sum / static_cast<double>(n);
    }
    return out;
}

CrossValReport cross_validate(std::span<const LabeledImage> images, const CrossValConfig& config,
                              const FoldProgress& progress) {
    const std::size_t k = config.folds;
    if (k < 3) fail(ErrorKind::Usage, "cross-validation needs at least three folds (test, validation, training)");
    CrossValReport report;
    if (config.by_patient) {
        std::vector<std::string> patients;
        for (const auto& img : images) patients.push_back(img.patient_id.empty() ? img.id : img.patient_id);
        report.plan = make_patient_fold_plan(patients, k, config.seed);
    } else {
        report.plan = make_fold_plan(images.size(), k, config.seed);
    }
    report.plan.validate(images.size());

    std::vector<MetricSummary> pixel_summaries;
    std::vector<MetricSummary> patch_summaries;
    for (std::size_t f = 0; f < k; ++f) {
        FoldReport fold;
        fold.fold = f;
        TrainData data;
        std::vector<const LabeledImage*> test;
        for (std::size_t g = 0; g < k; ++g) {
            for (auto i : report.plan.folds[g]) {
                const auto& img = images[i];
                if (g == f) {
                    test.push_back(&img);
                    fold.test_ids.push_back(img.id);
                } else if (g == (f + 1) % k) {
                    data.validation.push_back(img);
                    fold.validation_ids.push_back(img.id);
                } else {
                    data.train.push_back(img);
                    fold.train_ids.push_back(img.id);
                }
            }
        }

        TrainConfig tc = config.train;
        tc.seed = Rng::derive(config.seed, 100 + f);
        auto result = train(data, tc, [&](const TrainLogRow& row) {
            if (progress) progress(f, row);
        });
        fold.log = std::move(result.log);
        fold.best_val_accuracy = result.best.meta.best_val_accuracy;
        fold.best_iteration = result.best.meta.iteration;

        NetClassifier classifier(result.best.net);
        for (const auto* img : test) {
            auto seg = segment_image(classifier, img->image, img->mask, config.eval_stride);
            fold.pixels += confusion_from_maps(img->labels, seg.labels, &seg.evaluated);
            fold.segmentations.push_back(std::move(seg));
        }

        std::vector<LabeledImage> test_copy;
        for (const auto* img : test) test_copy.push_back(*img);
        Rng patch_rng(Rng::derive(config.seed, 200 + f));
        const auto samples = build_validation_set(test_copy, config.test_patches_per_image, patch_rng);
        const auto pred = classify_patches(result.best.net, samples);
        for (std::size_t i = 0; i < samples.size(); ++i) fold.patches.add(samples[i].label, pred[i]);

        pixel_summaries.push_back(summarize(fold.pixels));
        patch_summaries.push_back(summarize(fold.patches));
        report.folds.push_back(std::move(fold));
    }
    report.mean_pixels = mean_summary(pixel_summaries);
    report.mean_patches = mean_summary(patch_summaries);
    return report;
}

namespace {

void csv_row(std::ostream& out, const std::string& fold, const char* level, const MetricSummary& s) {
    out << fold << ',' << level << ',' << format_double(s.accuracy);
    for (const auto& v : s.sensitivity) {
        out << ',';
        if (v) out << format_double(*v);
    }
    out << '\n';
}

}  // namespace

void write_metrics_csv(const CrossValReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out << "fold,level,accuracy";
    for (const char* name : kClassNames) out << ",sens_" << name;
    out << '\n';
    for (const auto& f : report.folds) {
        csv_row(out, std::to_string(f.fold), "pixel", summarize(f.pixels));
        csv_row(out, std::to_string(f.fold), "patch", summarize(f.patches));
    }
    csv_row(out, "mean", "pixel", report.mean_pixels);
    csv_row(out, "mean", "patch", report.mean_patches);
}

std::string format_summary(const CrossValReport& report) {
    std::ostringstream out;
    auto line = [&](const std::string& label, const MetricSummary& s) {
        out << label << ": accuracy " << format_double(s.accuracy);
        for (std::size_t j = 0; j < kNumClasses; ++j) {
            out << "  " << kClassNames[j] << ' ' << (s.sensitivity[j] ? format_double(*s.sensitivity[j]) : "n/a");
        }
        out << '\n';
    };
    for (const auto& f : report.folds) {
        out << "fold " << f.fold << " (" << f.test_ids.size() << " test, " << f.validation_ids.size()
            << " validation, " << f.train_ids.size() << " training images; best checkpoint at iteration "
            << f.best_iteration << ", validation accuracy " << format_double(f.best_val_accuracy) << ")\n";
        line("  pixels", summarize(f.pixels));
        line("  patches", summarize(f.patches));
    }
    out << "mean over folds\n";
    line("  pixels", report.mean_pixels);
    line("  patches", report.mean_patches);
    return out.str();
}

void write_confusion_csv(const ConfusionMatrix& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out << "truth\\predicted";
    for (const char* name : kClassNames) out << ',' << name;
    out << '\n';
    for (std::size_t i = 0; i < kNumClasses; ++i) {
        out << kClassNames[i];
        for (std::size_t j = 0; j < kNumClasses; ++j) out << ',' << m.counts[i][j];
        out << '\n';
    }
}

}  // namespace plaqnet
