#pragma once

// Tissue-area extraction on polar frames: Otsu threshold, lumen border per
// A-line, fixed-depth expansion into a tissue band, and resampling between
// polar and Cartesian grids.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "plaqnet/image.hpp"

namespace plaqnet {

inline constexpr double kTissueDepthMm = 1.5;

/// Threshold t maximising the between-class variance of {v <= t} vs {v > t}
/// over the 256-bin histogram; the smallest maximiser wins ties. Throws
/// DegenerateHistogram for images with a single gray value.
int otsu_threshold(const Image8& image);

/// 1 where the pixel is strictly above the threshold.
Image8 binarize(const Image8& image, int threshold);

struct LumenBorder {
    std::vector<std::size_t> row;  // one entry per column
    std::vector<bool> detected;    // false where the row was interpolated
};

/// First row above threshold in every column. Columns without one are filled
/// by linear interpolation between the nearest detected columns on either
/// side, wrapping around. Throws NoTissue when no column has a detection.
LumenBorder detect_lumen_border(const Image8& image, int threshold);

/// round(depth_mm / pitch) pixels.
std::size_t expansion_depth(double pixel_pitch_mm, double depth_mm = kTissueDepthMm);

struct TissueBand {
    std::vector<std::size_t> inner;
    std::vector<std::size_t> outer;  // inclusive
    Image8 mask;                     // polar, 1 on [inner, outer] per column
};

/// outer = min(inner + depth, height - 1).
TissueBand expand_border(const LumenBorder& border, std::size_t height, double pixel_pitch_mm);

/// Side of the Cartesian frame for a polar image of `height` rows.
inline std::size_t cartesian_side(std::size_t polar_height) { return 2 * polar_height + 1; }

/// Output pixel (x, y) samples polar radius r = |(x, y) - centre| and angle
/// atan2(y - c, x - c) mapped to a fractional column with wrap-around.
/// Bilinear over the polar grid; radii beyond the last row give 0.
Image8 polar_to_cartesian(const Image8& polar);

/// Nearest-neighbour variant for label maps and masks.
Image8 polar_to_cartesian_nearest(const Image8& polar);

/// Samples a Cartesian frame back along rays: column j is angle 2*pi*j/width
/// and row i is radius i. Bilinear; samples outside the frame give 0.
Image8 cartesian_to_polar(const Image8& cartesian, std::size_t width, std::size_t height);

struct PreprocessedFrame {
    int threshold = 0;
    LumenBorder border;
    TissueBand band;
    Image8 image;   // Cartesian intensities
    Image8 mask;    // Cartesian tissue mask
    Image8 labels;  // Cartesian labels, empty when no polar labels were given
};

/// The full tissue-area step for one polar frame. Polar label values must lie
/// in 0..4; labels outside the band are kept as given.
PreprocessedFrame preprocess_frame(const PolarImage& frame, const Image8* polar_labels = nullptr);

}  // namespace plaqnet
