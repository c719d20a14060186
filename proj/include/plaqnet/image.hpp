#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "plaqnet/error.hpp"

namespace plaqnet {

/// Label values as stored in label-map files.
enum class TissueClass : std::uint8_t { BK = 0, LT = 1, FT = 2, MT = 3, CA = 4 };

inline constexpr std::array<const char*, 5> kClassNames = {"BK", "LT", "FT", "MT", "CA"};

/// 8-bit single-channel raster, row-major. Used for grayscale frames, label
/// maps (values 0..4) and masks (0 or 1).
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> data;

    Image8() = default;
    Image8(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), data(w * h, fill) {}

    std::uint8_t& at(std::size_t x, std::size_t y) { return data[y * width + x]; }
    std::uint8_t at(std::size_t x, std::size_t y) const { return data[y * width + x]; }
    std::size_t size() const noexcept { return data.size(); }
    bool empty() const noexcept { return data.empty(); }

    bool operator==(const Image8&) const = default;
};

struct RgbImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> data;  // r, g, b interleaved

    RgbImage() = default;
    RgbImage(std::size_t w, std::size_t h) : width(w), height(h), data(w * h * 3, 0) {}
};

/// Polar OCT frame: columns are A-lines, row 0 is the catheter side.
struct PolarImage {
    Image8 pixels;
    double pixel_pitch_mm = 0.0;
};

/// Binary PGM (P5) or PNG, chosen by extension on write and by magic bytes
/// on read. Only 8-bit grayscale is accepted.
Image8 read_image(const std::filesystem::path& path);
void write_image(const Image8& image, const std::filesystem::path& path);
void write_pgm(const Image8& image, const std::filesystem::path& path);
void write_png(const Image8& image, const std::filesystem::path& path);
void write_png(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_png_rgb(const std::filesystem::path& path);

/// `key = value` lines; '#' starts a comment. Keys are case-sensitive.
using KeyValues = std::map<std::string, std::string>;
KeyValues read_key_values(const std::filesystem::path& path);
KeyValues parse_key_values(const std::string& text, const std::string& origin);
void write_key_values(const KeyValues& values, const std::filesystem::path& path);

double parse_double(const std::string& text, const std::string& what);
long long parse_int(const std::string& text, const std::string& what);

/// Sidecar metadata next to a frame: `<stem>.meta` holding pixel_pitch_mm and
/// optionally patient_id.
struct FrameMeta {
    double pixel_pitch_mm = 0.0;
    std::string patient_id;
};
FrameMeta read_frame_meta(const std::filesystem::path& path);
void write_frame_meta(const FrameMeta& meta, const std::filesystem::path& path);

}  // namespace plaqnet
