#pragma once

// Synthetic labeled polar OCT frames with exact ground truth.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "plaqnet/image.hpp"

namespace plaqnet {

struct TextureSpec {
    double mean = 0.0;     // gray level before noise
    double noise = 0.0;    // additive Gaussian std
    double speckle = 0.0;  // multiplicative std, constant within a grain
    std::size_t grain = 1; // speckle cell size in pixels
    double fraction = 0.25;

    double effective_std() const;
};

/// Tissue textures are indexed by TissueClass (index 0, BK, is unused).
struct PhantomSpec {
    std::size_t width = 256;   // A-lines
    std::size_t height = 128;  // samples per A-line
    double pixel_pitch_mm = 0.02;

    double lumen_radius_px = 30.0;
    double lumen_amplitude_px = 5.0;
    int lumen_frequency = 3;

    /// Share of the expanded band, from the lumen border down, filled with
    /// tissue. The remainder of the band is background.
    double tissue_depth_fraction = 0.8;

    std::array<TextureSpec, 5> tissue{{
        {},
        {120.0, 8.0, 0.04, 2, 0.25},  // LT
        {200.0, 8.0, 0.04, 1, 0.25},  // FT
        {160.0, 8.0, 0.04, 3, 0.25},  // MT
        {240.0, 6.0, 0.02, 1, 0.25},  // CA
    }};

    double background_mean = 3.0;
    double background_noise = 2.0;
    double artifact_intensity = 35.0;  // catheter arcs near row 0

    /// Throws Spec on infeasible or inseparable settings.
    void validate() const;

    /// Keys mirror the field names; tissue keys are `<class>_<field>` with
    /// lower-case class names, e.g. `ca_fraction`.
    static PhantomSpec from_key_values(const KeyValues& kv);
    KeyValues to_key_values() const;
};

PhantomSpec load_phantom_spec(const std::filesystem::path& path);

struct Phantom {
    PolarImage image;
    Image8 labels;                      // polar, values 0..4
    std::vector<std::size_t> border;    // lumen border row per column
    std::array<std::size_t, 5> sector_columns{};  // A-lines per class
};

/// Lumen radius per column is round(base + amp * sin(freq * theta + phase))
/// with a per-frame random phase; the four tissue classes occupy contiguous
/// angular sectors starting at a random column.
Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

/// Per-class share of tissue pixels (BK excluded) in a label map.
std::array<double, 5> tissue_fractions(const Image8& labels);

struct DatasetEntry {
    std::string stem;
    std::filesystem::path image;
    std::filesystem::path labels;
    std::filesystem::path meta;
};

/// Writes `phantom_NNN.png`, `phantom_NNN_labels.png` and `phantom_NNN.meta`
/// for each frame; frame k uses seed derive(seed, k).
std::vector<DatasetEntry> generate_dataset(const PhantomSpec& spec, std::size_t count, std::uint64_t seed,
                                           const std::filesystem::path& out_dir);

}  // namespace plaqnet
