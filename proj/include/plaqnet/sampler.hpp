#pragma once

// Patch extraction, class weights and rotation augmentation over Cartesian
// training images.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "plaqnet/image.hpp"
#include "plaqnet/model.hpp"
#include "plaqnet/preprocess.hpp"
#include "plaqnet/rng.hpp"
#include "plaqnet/tensor.hpp"

namespace plaqnet {

inline constexpr std::size_t kHalfPatch = kPatchSize / 2;
inline constexpr double kMaxRotationDeg = 50.0;

/// A Cartesian frame with ground truth. `region` marks admissible patch
/// centres: the tissue mask plus background pixels within half a patch of it.
struct LabeledImage {
    std::string id;
    std::string patient_id;
    Image8 image;
    Image8 labels;
    Image8 mask;
    Image8 region;
};

/// Mask pixels, plus BK-labelled pixels within Chebyshev distance `band` of
/// the mask.
Image8 sampling_region(const Image8& mask, const Image8& labels, std::size_t band = kHalfPatch);

/// Builds a LabeledImage and its region; throws Shape on size mismatches and
/// UnusableImage when the frame cannot hold a full patch.
LabeledImage make_labeled_image(std::string id, Image8 image, Image8 labels, Image8 mask,
                                std::string patient_id = {});

/// From a preprocessed frame that carries labels.
LabeledImage make_labeled_image(std::string id, const PreprocessedFrame& frame, std::string patient_id = {});

/// Flat indices y * width + x of region pixels whose full patch lies inside
/// the frame.
std::vector<std::uint32_t> patch_centres(const LabeledImage& img);

using ClassCounts = std::array<std::uint64_t, kNumClasses>;

/// Label counts over admissible patch centres of all images.
ClassCounts count_classes(std::span<const LabeledImage> images);

/// w_j = (1/M_j) / sum_k (1/M_k). Throws MissingClass if any M_j is zero.
std::array<double, kNumClasses> class_weights(const ClassCounts& counts);

struct PatchSample {
    std::vector<float> patch;  // kPatchSize^2 intensities in [0, 1]
    std::uint8_t label = 0;
    double weight = 0.0;
    std::size_t image_index = 0;
    std::string image_id;
    std::size_t x = 0;
    std::size_t y = 0;
};

/// Copies the patch centred on (x, y) into `out` scaled by 1/255. The patch
/// must lie inside the frame.
void extract_patch(const Image8& image, std::size_t x, std::size_t y, float* out);

/// As extract_patch, reflecting coordinates that fall outside the frame.
void extract_patch_reflect(const Image8& image, std::size_t x, std::size_t y, float* out);

/// Rotates about the frame centre by `degrees` (counter-clockwise in image
/// coordinates). Intensities are bilinear, labels, mask and region nearest;
/// pixels mapped from outside the frame become 0.
LabeledImage augment_rotate(const LabeledImage& img, double degrees);

/// Uniform angle in [0, kMaxRotationDeg].
LabeledImage augment_rotate(const LabeledImage& img, Rng& rng);

/// Stacks samples into an [N, 1, 51, 51] tensor.
Tensor<float> stack_patches(std::span<const PatchSample> samples);

/// Draws training batches. Images are visited round-robin across calls; the
/// centre within each image is uniform over its admissible positions.
class PatchSampler {
public:
    PatchSampler(std::vector<LabeledImage> images, std::array<double, kNumClasses> weights);

    /// Replaces the working copies by fresh rotations of the originals.
    void augment(Rng& rng);
    /// Restores the unrotated originals.
    void reset();

    std::vector<PatchSample> sample(std::size_t batch_size, Rng& rng);

    std::size_t image_count() const noexcept { return originals_.size(); }
    const LabeledImage& working(std::size_t i) const { return working_[i]; }
    const std::vector<std::uint32_t>& centres(std::size_t i) const { return centres_[i]; }

private:
    void refresh_centres();

    std::vector<LabeledImage> originals_;
    std::vector<LabeledImage> working_;
    std::vector<std::vector<std::uint32_t>> centres_;
    std::array<double, kNumClasses> weights_;
    std::size_t cursor_ = 0;
};

/// `per_image` samples from every image, unrotated; image_index refers to the
/// position in `images`.
std::vector<PatchSample> build_validation_set(std::span<const LabeledImage> images, std::size_t per_image,
                                              Rng& rng);

}  // namespace plaqnet
