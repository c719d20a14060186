#include "plaqnet/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace plaqnet {

namespace {

// 1 where any pixel of `src` within [i - r, i + r] along one axis is set.
void dilate_1d(const std::uint8_t* src, std::uint8_t* dst, std::size_t n, std::size_t stride, std::size_t r,
               std::vector<std::uint32_t>& prefix) {
    prefix.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + (src[i * stride] ? 1u : 0u);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= r ? i - r : 0;
        const std::size_t hi = std::min(n, i + r + 1);
        dst[i * stride] = prefix[hi] - prefix[lo] > 0 ? 1 : 0;
    }
}

std::size_t reflect(long i, std::size_t n) {
    if (n == 1) return 0;
    const long period = 2 * (static_cast<long>(n) - 1);
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < static_cast<long>(n) ? i : period - i);
}

void check_same_size(const Image8& a, const Image8& b, const char* what) {
    if (a.width != b.width || a.height != b.height) {
        fail(ErrorKind::Shape, std::string(what) + " size does not match the image");
    }
}

}  // namespace

Image8 sampling_region(const Image8& mask, const Image8& labels, std::size_t band) {
    check_same_size(mask, labels, "label map");
    const std::size_t w = mask.width;
    const std::size_t h = mask.height;
    Image8 horiz(w, h);
    Image8 dilated(w, h);
    std::vector<std::uint32_t> prefix;
    for (std::size_t y = 0; y < h; ++y) dilate_1d(&mask.data[y * w], &horiz.data[y * w], w, 1, band, prefix);
    for (std::size_t x = 0; x < w; ++x) dilate_1d(&horiz.data[x], &dilated.data[x], h, w, band, prefix);
    Image8 region(w, h);
    for (std::size_t i = 0; i < region.size(); ++i) {
        region.data[i] = mask.data[i] || (dilated.data[i] && labels.data[i] == 0) ? 1 : 0;
    }
    return region;
}

LabeledImage make_labeled_image(std::string id, Image8 image, Image8 labels, Image8 mask, std::string patient_id) {
    check_same_size(image, labels, "label map");
    check_same_size(image, mask, "mask");
    if (image.width < kPatchSize || image.height < kPatchSize) {
        fail(ErrorKind::UnusableImage, id + " is smaller than one " + std::to_string(kPatchSize) + "x" +
                                           std::to_string(kPatchSize) + " patch");
    }
    for (auto v : labels.data) {
        if (v >= kNumClasses) fail(ErrorKind::Shape, id + ": label value outside 0..4");
    }
    LabeledImage out{std::move(id), std::move(patient_id), std::move(image), std::move(labels), std::move(mask), {}};
    out.region = sampling_region(out.mask, out.labels);
    return out;
}

LabeledImage make_labeled_image(std::string id, const PreprocessedFrame& frame, std::string patient_id) {
    if (frame.labels.empty()) fail(ErrorKind::Usage, id + ": frame has no label map");
    return make_labeled_image(std::move(id), frame.image, frame.labels, frame.mask, std::move(patient_id));
}

std::vector<std::uint32_t> patch_centres(const LabeledImage& img) {
    std::vector<std::uint32_t> out;
    const std::size_t w = img.region.width;
    const std::size_t h = img.region.height;
    if (w < kPatchSize || h < kPatchSize) return out;
    for (std::size_t y = kHalfPatch; y + kHalfPatch < h; ++y) {
        for (std::size_t x = kHalfPatch; x + kHalfPatch < w; ++x) {
            if (img.region.at(x, y)) out.push_back(static_cast<std::uint32_t>(y * w + x));
        }
    }
    return out;
}

ClassCounts count_classes(std::span<const LabeledImage> images) {
    ClassCounts counts{};
    for (const auto& img : images) {
        for (auto idx : patch_centres(img)) ++counts[img.labels.data[idx]];
    }
    return counts;
}

std::array<double, kNumClasses> class_weights(const ClassCounts& counts) {
    double denom = 0.0;
    for (std::size_t j = 0; j < kNumClasses; ++j) {
        if (counts[j] == 0) {
            fail(ErrorKind::MissingClass, std::string("no training samples of class ") + kClassNames[j]);
        }
        denom += 1.0 / static_cast<double>(counts[j]);
    }
    std::array<double, kNumClasses> w{};
    for (std::size_t j = 0; j < kNumClasses; ++j) w[j] = (1.0 / static_cast<double>(counts[j])) / denom;
    return w;
}

void extract_patch(const Image8& image, std::size_t x, std::size_t y, float* out) {
    if (x < kHalfPatch || y < kHalfPatch || x + kHalfPatch >= image.width || y + kHalfPatch >= image.height) {
        fail(ErrorKind::Usage, "patch centre is too close to the frame edge");
    }
    for (std::size_t dy = 0; dy < kPatchSize; ++dy) {
        const std::uint8_t* row = &image.data[(y - kHalfPatch + dy) * image.width + (x - kHalfPatch)];
        for (std::size_t dx = 0; dx < kPatchSize; ++dx) *out++ = static_cast<float>(row[dx]) / 255.0f;
    }
}

void extract_patch_reflect(const Image8& image, std::size_t x, std::size_t y, float* out) {
    if (image.empty()) fail(ErrorKind::Shape, "empty image");
    const long half = static_cast<long>(kHalfPatch);
    for (long dy = -half; dy <= half; ++dy) {
        const std::size_t sy = reflect(static_cast<long>(y) + dy, image.height);
        for (long dx = -half; dx <= half; ++dx) {
            const std::size_t sx = reflect(static_cast<long>(x) + dx, image.width);
            *out++ = static_cast<float>(image.at(sx, sy)) / 255.0f;
        }
    }
}

LabeledImage augment_rotate(const LabeledImage& img, double degrees) {
    const std::size_t w = img.image.width;
    const std::size_t h = img.image.height;
    const double rad = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(rad);
    const double s = std::sin(rad);
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;

    LabeledImage out{img.id, img.patient_id, Image8(w, h), Image8(w, h), Image8(w, h), Image8(w, h)};
    const double max_x = static_cast<double>(w - 1);
    const double max_y = static_cast<double>(h - 1);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double sx = cx + c * dx + s * dy;
            const double sy = cy - s * dx + c * dy;

            const long nx = std::lround(sx);
            const long ny = std::lround(sy);
            if (nx >= 0 && ny >= 0 && nx < static_cast<long>(w) && ny < static_cast<long>(h)) {
                const std::size_t src = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
                out.labels.at(x, y) = img.labels.data[src];
                out.mask.at(x, y) = img.mask.data[src];
                out.region.at(x, y) = img.region.data[src];
            }

            if (sx < 0.0 || sy < 0.0 || sx > max_x || sy > max_y) continue;
            const auto x0 = static_cast<std::size_t>(sx);
            const auto y0 = static_cast<std::size_t>(sy);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double ax = sx - static_cast<double>(x0);
            const double ay = sy - static_cast<double>(y0);
            const double top = img.image.at(x0, y0) * (1 - ax) + img.image.at(x1, y0) * ax;
            const double bottom = img.image.at(x0, y1) * (1 - ax) + img.image.at(x1, y1) * ax;
            out.image.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(top * (1 - ay) + bottom * ay), 0L, 255L));
        }
    }
    return out;
}

LabeledImage augment_rotate(const LabeledImage& img, Rng& rng) {
    return augment_rotate(img, rng.uniform(0.0, kMaxRotationDeg));
}

Tensor<float> stack_patches(std::span<const PatchSample> samples) {
    if (samples.empty()) fail(ErrorKind::Usage, "no samples to stack");
    constexpr std::size_t area = kPatchSize * kPatchSize;
    Tensor<float> t({samples.size(), 1, kPatchSize, kPatchSize});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].patch.size() != area) fail(ErrorKind::Shape, "patch has the wrong size");
        std::copy(samples[i].patch.begin(), samples[i].patch.end(), t.data() + i * area);
    }
    return t;
}

PatchSampler::PatchSampler(std::vector<LabeledImage> images, std::array<double, kNumClasses> weights)
    : originals_(std::move(images)), weights_(weights) {
    if (originals_.empty()) fail(ErrorKind::Usage, "no training images");
    reset();
}

void PatchSampler::augment(Rng& rng) {
    working_.clear();
    for (const auto& img : originals_) working_.push_back(augment_rotate(img, rng));
    refresh_centres();
}

void PatchSampler::reset() {
    working_ = originals_;
    refresh_centres();
}

void PatchSampler::refresh_centres() {
    centres_.clear();
    for (const auto& img : working_) {
        centres_.push_back(patch_centres(img));
        if (centres_.back().empty()) fail(ErrorKind::UnusableImage, img.id + " has no admissible patch centre");
    }
}

std::vector<PatchSample> PatchSampler::sample(std::size_t batch_size, Rng& rng) {
    std::vector<PatchSample> batch(batch_size);
    for (auto& s : batch) {
        const std::size_t i = cursor_;
        cursor_ = (cursor_ + 1) % working_.size();
        const auto& img = working_[i];
        const auto idx = centres_[i][rng.below(centres_[i].size())];
        s.x = idx % img.image.width;
        s.y = idx / img.image.width;
        s.label = img.labels.data[idx];
        s.weight = weights_[s.label];
        s.image_index = i;
        s.image_id = img.id;
        s.patch.resize(kPatchSize * kPatchSize);
        extract_patch(img.image, s.x, s.y, s.patch.data());
    }
    return batch;
}

std::vector<PatchSample> build_validation_set(std::span<const LabeledImage> images, std::size_t per_image,
                                              Rng& rng) {
    std::vector<PatchSample> out;
    out.reserve(images.size() * per_image);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& img = images[i];
        const auto centres = patch_centres(img);
        if (centres.empty()) fail(ErrorKind::UnusableImage, img.id + " has no admissible patch centre");
        for (std::size_t k = 0; k < per_image; ++k) {
            PatchSample s;
            const auto idx = centres[rng.below(centres.size())];
            s.x = idx % img.image.width;
            s.y = idx / img.image.width;
            s.label = img.labels.data[idx];
            s.weight = 1.0;
            s.image_index = i;
            s.image_id = img.id;
            s.patch.resize(kPatchSize * kPatchSize);
            extract_patch(img.image, s.x, s.y, s.patch.data());
            out.push_back(std::move(s));
        }
    }
    return out;
}

}  // namespace plaqnet
