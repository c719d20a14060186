#include "plaqnet/preprocess.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

namespace plaqnet {

int otsu_threshold(const Image8& image) {
    std::array<std::uint64_t, 256> hist{};
    for (auto v : image.data) ++hist[v];
    const std::size_t distinct = static_cast<std::size_t>(std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; }));
    if (distinct < 2) fail(ErrorKind::DegenerateHistogram, "Otsu threshold needs at least two gray values");

    const double total = static_cast<double>(image.size());
    double sum_all = 0.0;
    for (int i = 0; i < 256; ++i) sum_all += static_cast<double>(i) * static_cast<double>(hist[i]);

    int best_t = 0;
    double best = -1.0;
    double w0 = 0.0;
    double sum0 = 0.0;
    for (int t = 0; t < 256; ++t) {
        w0 += static_cast<double>(hist[t]);
        sum0 += static_cast<double>(t) * static_cast<double>(hist[t]);
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double mu0 = sum0 / w0;
        const double mu1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (between > best) {
            best = between;
            best_t = t;
        }
    }
    return best_t;
}

Image8 binarize(const Image8& image, int threshold) {
    Image8 out(image.width, image.height);
    for (std::size_t i = 0; i < image.size(); ++i) out.data[i] = image.data[i] > threshold ? 1 : 0;
    return out;
}

LumenBorder detect_lumen_border(const Image8& image, int threshold) {
    const std::size_t w = image.width;
    LumenBorder border{std::vector<std::size_t>(w, 0), std::vector<bool>(w, false)};
    std::vector<std::size_t> valid;
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < image.height; ++y) {
            if (image.at(x, y) > threshold) {
                border.row[x] = y;
                border.detected[x] = true;
                valid.push_back(x);
                break;
            }
        }
    }
    if (valid.empty()) fail(ErrorKind::NoTissue, "no column contains a pixel above the threshold");

    // Walk the gaps between consecutive detected columns, wrapping at the end.
    for (std::size_t k = 0; k < valid.size(); ++k) {
        const std::size_t a = valid[k];
        const std::size_t b = valid[(k + 1) % valid.size()];
        const std::size_t gap = (b + w - a) % w == 0 ? w : (b + w - a) % w;
        const double ra = static_cast<double>(border.row[a]);
        const double rb = static_cast<double>(border.row[b]);
        for (std::size_t step = 1; step < gap; ++step) {
            const std::size_t x = (a + step) % w;
            const double t = static_cast<double>(step) / static_cast<double>(gap);
            border.row[x] = static_cast<std::size_t>(std::lround(ra + (rb - ra) * t));
        }
    }
    return border;
}

std::size_t expansion_depth(double pixel_pitch_mm, double depth_mm) {
    if (!(pixel_pitch_mm > 0.0) || !std::isfinite(pixel_pitch_mm)) {
        fail(ErrorKind::Config, "pixel_pitch_mm must be positive and finite");
    }
    return static_cast<std::size_t>(std::lround(depth_mm / pixel_pitch_mm));
}

TissueBand expand_border(const LumenBorder& border, std::size_t height, double pixel_pitch_mm) {
    const std::size_t depth = expansion_depth(pixel_pitch_mm);
    const std::size_t w = border.row.size();
    TissueBand band{border.row, std::vector<std::size_t>(w), Image8(w, height)};
    for (std::size_t x = 0; x < w; ++x) {
        if (band.inner[x] >= height) fail(ErrorKind::Shape, "border row outside the image");
        band.outer[x] = std::min(band.inner[x] + depth, height - 1);
        for (std::size_t y = band.inner[x]; y <= band.outer[x]; ++y) band.mask.at(x, y) = 1;
    }
    return band;
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct PolarCoord {
    double radius;
    double column;  // fractional, in [0, width)
};

PolarCoord to_polar(std::size_t x, std::size_t y, std::size_t centre, std::size_t width) {
    const double dx = static_cast<double>(x) - static_cast<double>(centre);
    const double dy = static_cast<double>(y) - static_cast<double>(centre);
    double phi = std::atan2(dy, dx);
    if (phi < 0.0) phi += kTwoPi;
    double column = phi / kTwoPi * static_cast<double>(width);
    if (column >= static_cast<double>(width)) column -= static_cast<double>(width);
    return {std::hypot(dx, dy), column};
}

void require_polar(const Image8& polar) {
    if (polar.width < 4 || polar.height < 1) {
        fail(ErrorKind::Shape, "polar image needs at least 4 columns, got " + std::to_string(polar.width));
    }
}

}  // namespace

Image8 polar_to_cartesian(const Image8& polar) {
    require_polar(polar);
    const std::size_t h = polar.height;
    const std::size_t w = polar.width;
    const std::size_t side = cartesian_side(h);
    Image8 out(side, side);
    const double max_r = static_cast<double>(h - 1);

    double row0 = 0.0;
    for (std::size_t x = 0; x < w; ++x) row0 += polar.at(x, 0);
    row0 /= static_cast<double>(w);

    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const auto p = to_polar(x, y, h, w);
            if (p.radius > max_r) continue;
            if (p.radius == 0.0) {
                // Every column meets at the centre; take their mean.
                out.at(x, y) = static_cast<std::uint8_t>(std::lround(row0));
                continue;
            }
            const auto r0 = static_cast<std::size_t>(p.radius);
            const std::size_t r1 = std::min(r0 + 1, h - 1);
            const double fr = p.radius - static_cast<double>(r0);
            const auto c0 = static_cast<std::size_t>(p.column) % w;
            const std::size_t c1 = (c0 + 1) % w;
            const double fc = p.column - std::floor(p.column);
            const double top = polar.at(c0, r0) * (1.0 - fc) + polar.at(c1, r0) * fc;
            const double bottom = polar.at(c0, r1) * (1.0 - fc) + polar.at(c1, r1) * fc;
            const double v = top * (1.0 - fr) + bottom * fr;
            out.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    return out;
}

Image8 polar_to_cartesian_nearest(const Image8& polar) {
    require_polar(polar);
    const std::size_t h = polar.height;
    const std::size_t w = polar.width;
    const std::size_t side = cartesian_side(h);
    Image8 out(side, side);
    const double max_r = static_cast<double>(h - 1);
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const auto p = to_polar(x, y, h, w);
            if (p.radius > max_r) continue;
            const auto r = static_cast<std::size_t>(std::lround(p.radius));
            const auto c = static_cast<std::size_t>(std::lround(p.column)) % w;
            out.at(x, y) = polar.at(c, std::min(r, h - 1));
        }
    }
    return out;
}

Image8 cartesian_to_polar(const Image8& cartesian, std::size_t width, std::size_t height) {
    if (width == 0 || height == 0) fail(ErrorKind::Shape, "polar size must be positive");
    Image8 out(width, height);
    const double c = static_cast<double>(cartesian.width) / 2.0 - 0.5;
    for (std::size_t j = 0; j < width; ++j) {
        const double phi = kTwoPi * static_cast<double>(j) / static_cast<double>(width);
        const double ux = std::cos(phi);
        const double uy = std::sin(phi);
        for (std::size_t i = 0; i < height; ++i) {
            const double x = c + static_cast<double>(i) * ux;
            const double y = c + static_cast<double>(i) * uy;
            const double fx = std::floor(x);
            const double fy = std::floor(y);
            if (fx < 0 || fy < 0 || fx > static_cast<double>(cartesian.width - 1) ||
                fy > static_cast<double>(cartesian.height - 1)) {
                continue;
            }
            const auto x0 = static_cast<std::size_t>(fx);
            const auto y0 = static_cast<std::size_t>(fy);
            const std::size_t x1 = std::min(x0 + 1, cartesian.width - 1);
            const std::size_t y1 = std::min(y0 + 1, cartesian.height - 1);
            const double ax = x - fx;
            const double ay = y - fy;
            const double top = cartesian.at(x0, y0) * (1 - ax) + cartesian.at(x1, y0) * ax;
            const double bottom = cartesian.at(x0, y1) * (1 - ax) + cartesian.at(x1, y1) * ax;
            out.at(j, i) = static_cast<std::uint8_t>(std::clamp(std::lround(top * (1 - ay) + bottom * ay), 0L, 255L));
        }
    }
    return out;
}

PreprocessedFrame preprocess_frame(const PolarImage& frame, const Image8* polar_labels) {
    const Image8& polar = frame.pixels;
    require_polar(polar);
    PreprocessedFrame out;
    out.threshold = otsu_threshold(polar);
    out.border = detect_lumen_border(polar, out.threshold);
    out.band = expand_border(out.border, polar.height, frame.pixel_pitch_mm);
    out.image = polar_to_cartesian(polar);
    out.mask = polar_to_cartesian_nearest(out.band.mask);
    if (polar_labels) {
        if (polar_labels->width != polar.width || polar_labels->height != polar.height) {
            fail(ErrorKind::Shape, "label map size does not match the frame");
        }
        for (auto v : polar_labels->data) {
            if (v > 4) fail(ErrorKind::Shape, "label value " + std::to_string(v) + " outside 0..4");
        }
        out.labels = polar_to_cartesian_nearest(*polar_labels);
    }
    return out;
}

}  // namespace plaqnet
