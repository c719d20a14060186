#include "plaqnet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

#include "plaqnet/preprocess.hpp"
#include "plaqnet/rng.hpp"

namespace plaqnet {

double TextureSpec::effective_std() const {
    return std::sqrt(noise * noise + mean * speckle * mean * speckle);
}

namespace {

std::string lower(const char* s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

constexpr std::size_t kFirstTissue = 1;

// Columns [start, end) of each class before the random rotation.
std::array<std::size_t, 6> sector_bounds(const PhantomSpec& spec) {
    std::array<std::size_t, 6> bounds{};
    double cum = 0.0;
    for (std::size_t c = kFirstTissue; c < 5; ++c) {
        cum += spec.tissue[c].fraction;
        bounds[c + 1] = static_cast<std::size_t>(std::lround(cum * static_cast<double>(spec.width)));
    }
    bounds[1] = 0;
    bounds[5] = spec.width;
    return bounds;
}

}  // namespace

void PhantomSpec::validate() const {
    auto bad = [](const std::string& msg) { fail(ErrorKind::Spec, msg); };
    if (width < 8) bad("width must be at least 8 A-lines");
    if (height < 16) bad("height must be at least 16 samples");
    if (!(pixel_pitch_mm > 0.0) || !std::isfinite(pixel_pitch_mm)) bad("pixel_pitch_mm must be positive");
    if (!(tissue_depth_fraction > 0.0 && tissue_depth_fraction <= 1.0)) {
        bad("tissue_depth_fraction must lie in (0, 1]");
    }
    if (lumen_frequency < 0) bad("lumen_frequency must be non-negative");
    const double min_r = lumen_radius_px - std::abs(lumen_amplitude_px);
    const double max_r = lumen_radius_px + std::abs(lumen_amplitude_px);
    if (min_r < 8.0) bad("lumen radius minus amplitude must be at least 8 pixels to clear the catheter");
    const std::size_t depth = expansion_depth(pixel_pitch_mm);
    if (static_cast<double>(std::lround(max_r) + static_cast<long>(depth)) > static_cast<double>(height - 1)) {
        bad("height " + std::to_string(height) + " cannot hold the lumen plus a " + std::to_string(depth) +
            "-pixel tissue band");
    }

    double total = 0.0;
    for (std::size_t c = kFirstTissue; c < 5; ++c) {
        const auto& t = tissue[c];
        const std::string name = kClassNames[c];
        if (t.fraction < 0.0) bad(name + " fraction is negative");
        if (t.fraction > 0.0 && t.fraction * static_cast<double>(width) < 1.0) {
            bad(name + " sector is narrower than one A-line");
        }
        if (t.mean < 0.0 || t.mean > 255.0) bad(name + " mean must lie in [0, 255]");
        if (t.noise < 0.0 || t.speckle < 0.0) bad(name + " noise and speckle must be non-negative");
        if (t.grain < 1) bad(name + " grain must be at least 1");
        total += t.fraction;
    }
    if (std::abs(total - 1.0) > 1e-9) bad("tissue fractions must sum to 1, got " + format_double(total));
    const auto bounds = sector_bounds(*this);
    for (std::size_t c = kFirstTissue; c < 5; ++c) {
        if (tissue[c].fraction > 0.0 && bounds[c + 1] <= bounds[c]) {
            bad(std::string(kClassNames[c]) + " sector rounds to zero A-lines");
        }
    }

    for (std::size_t a = kFirstTissue; a < 5; ++a) {
        for (std::size_t b = a + 1; b < 5; ++b) {
            const double sep = std::abs(tissue[a].mean - tissue[b].mean);
            const double sd = std::max(tissue[a].effective_std(), tissue[b].effective_std());
            if (sep < 2.0 * sd) {
                bad(std::string(kClassNames[a]) + " and " + kClassNames[b] +
                    " means are closer than twice their noise std");
            }
        }
    }
    if (background_mean < 0.0 || background_noise < 0.0 || artifact_intensity < 0.0) {
        bad("background settings must be non-negative");
    }
}

PhantomSpec PhantomSpec::from_key_values(const KeyValues& kv) {
    PhantomSpec s;
    std::set<std::string> used;
    auto num = [&](const std::string& key, double& field) {
        if (auto it = kv.find(key); it != kv.end()) {
            field = parse_double(it->second, key);
            used.insert(key);
        }
    };
    auto count = [&](const std::string& key, std::size_t& field) {
        if (auto it = kv.find(key); it != kv.end()) {
            const auto v = parse_int(it->second, key);
            if (v < 0) fail(ErrorKind::Spec, key + " must be non-negative");
            field = static_cast<std::size_t>(v);
            used.insert(key);
        }
    };
    count("width", s.width);
    count("height", s.height);
    num("pixel_pitch_mm", s.pixel_pitch_mm);
    num("lumen_radius_px", s.lumen_radius_px);
    num("lumen_amplitude_px", s.lumen_amplitude_px);
    if (auto it = kv.find("lumen_frequency"); it != kv.end()) {
        s.lumen_frequency = static_cast<int>(parse_int(it->second, "lumen_frequency"));
        used.insert("lumen_frequency");
    }
    num("tissue_depth_fraction", s.tissue_depth_fraction);
    for (std::size_t c = kFirstTissue; c < 5; ++c) {
        const std::string p = lower(kClassNames[c]) + "_";
        num(p + "mean", s.tissue[c].mean);
        num(p + "noise", s.tissue[c].noise);
        num(p + "speckle", s.tissue[c].speckle);
        count(p + "grain", s.tissue[c].grain);
        num(p + "fraction", s.tissue[c].fraction);
    }
    num("background_mean", s.background_mean);
    num("background_noise", s.background_noise);
    num("artifact_intensity", s.artifact_intensity);
    for (const auto& [key, value] : kv) {
        if (!used.count(key)) fail(ErrorKind::Spec, "unknown phantom key '" + key + "'");
    }
    s.validate();
    return s;
}

KeyValues PhantomSpec::to_key_values() const {
    KeyValues kv{
        {"width", std::to_string(width)},
        {"height", std::to_string(height)},
        {"pixel_pitch_mm", format_double(pixel_pitch_mm)},
        {"lumen_radius_px", format_double(lumen_radius_px)},
        {"lumen_amplitude_px", format_double(lumen_amplitude_px)},
        {"lumen_frequency", std::to_string(lumen_frequency)},
        {"tissue_depth_fraction", format_double(tissue_depth_fraction)},
        {"background_mean", format_double(background_mean)},
        {"background_noise", format_double(background_noise)},
        {"artifact_intensity", format_double(artifact_intensity)},
    };
    for (std::size_t c = kFirstTissue; c < 5; ++c) {
        const std::string p = lower(kClassNames[c]) + "_";
        kv[p + "mean"] = format_double(tissue[c].mean);
        kv[p + "noise"] = format_double(tissue[c].noise);
        kv[p + "speckle"] = format_double(tissue[c].speckle);
        kv[p + "grain"] = std::to_string(tissue[c].grain);
        kv[p + "fraction"] = format_double(tissue[c].fraction);
    }
    return kv;
}

PhantomSpec load_phantom_spec(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail(ErrorKind::Io, "phantom spec not found: " + path.string());
    return PhantomSpec::from_key_values(read_key_values(path));
}

Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
    spec.validate();
    const std::size_t w = spec.width;
    const std::size_t h = spec.height;
    Rng rng(seed);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const std::size_t offset = static_cast<std::size_t>(rng.below(w));

    Phantom out;
    out.image = PolarImage{Image8(w, h), spec.pixel_pitch_mm};
    out.labels = Image8(w, h);
    out.border.resize(w);

    const std::size_t depth = expansion_depth(spec.pixel_pitch_mm);
    const auto tissue_rows = static_cast<std::size_t>(
        std::max(1L, std::lround(spec.tissue_depth_fraction * static_cast<double>(depth + 1))));

    std::vector<std::uint8_t> column_class(w, 0);
    const auto bounds = sector_bounds(spec);
    for (std::size_t c = kFirstTissue; c < 5; ++c) {
        out.sector_columns[c] = bounds[c + 1] - bounds[c];
        for (std::size_t k = bounds[c]; k < bounds[c + 1]; ++k) column_class[(k + offset) % w] = static_cast<std::uint8_t>(c);
    }

    // Speckle multipliers on a coarse grid, one grid per class.
    std::array<std::vector<double>, 5> speckle;
    std::array<std::size_t, 5> grid_w{};
    for (std::size_t c = kFirstTissue; c < 5; ++c) {
        const auto& t = spec.tissue[c];
        grid_w[c] = (w + t.grain - 1) / t.grain;
        const std::size_t grid_h = (h + t.grain - 1) / t.grain;
        speckle[c].resize(grid_w[c] * grid_h);
        for (auto& f : speckle[c]) f = 1.0 + t.speckle * rng.normal();
    }

    for (std::size_t x = 0; x < w; ++x) {
        const double theta = 2.0 * std::numbers::pi * static_cast<double>(x) / static_cast<double>(w);
        const double r = spec.lumen_radius_px + spec.lumen_amplitude_px * std::sin(spec.lumen_frequency * theta + phase);
        out.border[x] = static_cast<std::size_t>(std::lround(r));
    }

    auto to_gray = [](double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); };
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t inner = out.border[x];
            const std::uint8_t cls = column_class[x];
            double v;
            if (y >= inner && y < inner + tissue_rows) {
                const auto& t = spec.tissue[cls];
                const double f = speckle[cls][(y / t.grain) * grid_w[cls] + x / t.grain];
                v = t.mean * f + t.noise * rng.normal();
                out.labels.at(x, y) = cls;
            } else {
                double base = spec.background_mean;
                if (y < inner && (y == 2 || y == 3)) base = spec.artifact_intensity;
                if (y < inner && y == 6) base = spec.artifact_intensity / 2.0;
                v = base + spec.background_noise * rng.normal();
            }
            out.image.pixels.at(x, y) = to_gray(v);
        }
    }
    return out;
}

std::array<double, 5> tissue_fractions(const Image8& labels) {
    std::array<std::size_t, 5> counts{};
    std::size_t total = 0;
    for (auto v : labels.data) {
        if (v > 4) fail(ErrorKind::Shape, "label value outside 0..4");
        if (v > 0) {
            ++counts[v];
            ++total;
        }
    }
    std::array<double, 5> out{};
    if (total == 0) return out;
    for (std::size_t c = kFirstTissue; c < 5; ++c) out[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
    return out;
}

std::vector<DatasetEntry> generate_dataset(const PhantomSpec& spec, std::size_t count, std::uint64_t seed,
                                           const std::filesystem::path& out_dir) {
    if (count == 0) fail(ErrorKind::Usage, "phantom count must be at least 1");
    spec.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create " + out_dir.string() + ": " + ec.message());
    std::vector<DatasetEntry> entries;
    for (std::size_t k = 0; k < count; ++k) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "phantom_%03zu", k);
        DatasetEntry e{stem, out_dir / (std::string(stem) + ".png"), out_dir / (std::string(stem) + "_labels.png"),
                       out_dir / (std::string(stem) + ".meta")};
        const auto p = generate_phantom(spec, Rng::derive(seed, k));
        write_png(p.image.pixels, e.image);
        write_png(p.labels, e.labels);
        write_frame_meta({spec.pixel_pitch_mm, stem}, e.meta);
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace plaqnet
