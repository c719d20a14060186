#include <png.h>

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "plaqnet/image.hpp"

namespace plaqnet {
namespace {

using FilePtr = std::unique_ptr<FILE, int (*)(FILE*)>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FILE* f = std::fopen(path.c_str(), mode);
    if (!f) fail(ErrorKind::Io, "cannot open " + path.string() + ": " + std::strerror(errno));
    return FilePtr(f, &std::fclose);
}

std::string lower_extension(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext;
}

// PGM header tokens may be separated by any whitespace and interleaved with
// comment lines.
std::size_t pgm_token(std::istream& in, const std::filesystem::path& path) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    std::string token;
    while (c != EOF && std::isdigit(c)) {
        token.push_back(static_cast<char>(c));
        c = in.get();
    }
    if (token.empty()) fail(ErrorKind::Io, "malformed PGM header in " + path.string());
    return static_cast<std::size_t>(std::stoull(token));
}

Image8 read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
    char magic[2] = {};
    in.read(magic, 2);
    if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '2')) {
        fail(ErrorKind::Io, path.string() + " is not a grayscale PGM");
    }
    const std::size_t w = pgm_token(in, path);
    const std::size_t h = pgm_token(in, path);
    const std::size_t maxval = pgm_token(in, path);
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
        fail(ErrorKind::Io, path.string() + ": only 8-bit PGM with positive size is supported");
    }
    Image8 img(w, h);
    if (magic[1] == '5') {
        in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.size()));
        if (in.gcount() != static_cast<std::streamsize>(img.size())) {
            fail(ErrorKind::Io, path.string() + ": truncated pixel data");
        }
    } else {
        for (auto& v : img.data) v = static_cast<std::uint8_t>(pgm_token(in, path));
    }
    return img;
}

struct PngReadGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

struct PngWriteGuard {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriteGuard() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};

[[noreturn]] void png_error_handler(png_structp, png_const_charp message) {
    throw Error(ErrorKind::Io, std::string("libpng: ") + message);
}

void png_warning_handler(png_structp, png_const_charp) {}

// Reads any PNG and returns it converted to 8-bit with the given channel count
// (1 = gray, 3 = rgb).
std::vector<std::uint8_t> read_png_raw(const std::filesystem::path& path, int channels, std::size_t& w,
                                       std::size_t& h) {
    auto file = open_file(path, "rb");
    PngReadGuard g;
    g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
    if (!g.png) fail(ErrorKind::Io, "libpng initialisation failed");
    g.info = png_create_info_struct(g.png);
    png_init_io(g.png, file.get());
    png_read_info(g.png, g.info);
    const auto color = png_get_color_type(g.png, g.info);
    const auto depth = png_get_bit_depth(g.png, g.info);
    if (depth == 16) png_set_strip_16(g.png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(g.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(g.png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(g.png);
    const bool is_gray = (color & PNG_COLOR_MASK_COLOR) == 0 && color != PNG_COLOR_TYPE_PALETTE;
    if (channels == 1 && !is_gray) {
        fail(ErrorKind::Io, path.string() + " is a colour PNG; an 8-bit grayscale image is required");
    }
    if (channels == 3 && is_gray) png_set_gray_to_rgb(g.png);
    png_read_update_info(g.png, g.info);
    w = png_get_image_width(g.png, g.info);
    h = png_get_image_height(g.png, g.info);
    std::vector<std::uint8_t> data(w * h * static_cast<std::size_t>(channels));
    std::vector<png_bytep> rows(h);
    for (std::size_t y = 0; y < h; ++y) rows[y] = data.data() + y * w * static_cast<std::size_t>(channels);
    png_read_image(g.png, rows.data());
    png_read_end(g.png, nullptr);
    return data;
}

void write_png_raw(const std::uint8_t* data, std::size_t w, std::size_t h, int color_type, int channels,
                   const std::filesystem::path& path) {
    auto file = open_file(path, "wb");
    PngWriteGuard g;
    g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
    if (!g.png) fail(ErrorKind::Io, "libpng initialisation failed");
    g.info = png_create_info_struct(g.png);
    png_init_io(g.png, file.get());
    png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(g.png, g.info);
    for (std::size_t y = 0; y < h; ++y) {
        png_write_row(g.png, const_cast<png_bytep>(data + y * w * static_cast<std::size_t>(channels)));
    }
    png_write_end(g.png, nullptr);
}

}  // namespace

Image8 read_image(const std::filesystem::path& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) fail(ErrorKind::Io, "cannot open " + path.string());
    unsigned char sig[8] = {};
    probe.read(reinterpret_cast<char*>(sig), 8);
    probe.close();
    if (png_sig_cmp(sig, 0, 8) == 0) {
        Image8 img;
        img.data = read_png_raw(path, 1, img.width, img.height);
        return img;
    }
    return read_pgm(path);
}

void write_pgm(const Image8& image, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.data.data()), static_cast<std::streamsize>(image.size()));
    if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

void write_png(const Image8& image, const std::filesystem::path& path) {
    write_png_raw(image.data.data(), image.width, image.height, PNG_COLOR_TYPE_GRAY, 1, path);
}

void write_png(const RgbImage& image, const std::filesystem::path& path) {
    write_png_raw(image.data.data(), image.width, image.height, PNG_COLOR_TYPE_RGB, 3, path);
}

RgbImage read_png_rgb(const std::filesystem::path& path) {
    RgbImage img;
    img.data = read_png_raw(path, 3, img.width, img.height);
    return img;
}

void write_image(const Image8& image, const std::filesystem::path& path) {
    const std::string ext = lower_extension(path);
    if (ext == ".png") {
        write_png(image, path);
    } else if (ext == ".pgm") {
        write_pgm(image, path);
    } else {
        fail(ErrorKind::Usage, "unsupported image extension '" + ext + "' (use .png or .pgm)");
    }
}

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(ErrorKind::Config, origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) fail(ErrorKind::Config, origin + ":" + std::to_string(lineno) + ": empty key");
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_key_values(ss.str(), path.string());
}

void write_key_values(const KeyValues& values, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    for (const auto& [k, v] : values) out << k << " = " << v << '\n';
}

double parse_double(const std::string& text, const std::string& what) {
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() || errno == ERANGE || !std::isfinite(v)) {
        fail(ErrorKind::Config, what + ": '" + text + "' is not a finite number");
    }
    return v;
}

long long parse_int(const std::string& text, const std::string& what) {
    char* end = nullptr;
    errno = 0;
    const long long v = std::strtoll(text.c_str(), &end, 10);
    if (text.empty() || end != text.c_str() + text.size() || errno == ERANGE) {
        fail(ErrorKind::Config, what + ": '" + text + "' is not an integer");
    }
    return v;
}

FrameMeta read_frame_meta(const std::filesystem::path& path) {
    const auto kv = read_key_values(path);
    FrameMeta meta;
    const auto it = kv.find("pixel_pitch_mm");
    if (it == kv.end()) fail(ErrorKind::Config, path.string() + ": missing pixel_pitch_mm");
    meta.pixel_pitch_mm = parse_double(it->second, "pixel_pitch_mm");
    if (!(meta.pixel_pitch_mm > 0.0)) fail(ErrorKind::Config, path.string() + ": pixel_pitch_mm must be positive");
    if (const auto p = kv.find("patient_id"); p != kv.end()) meta.patient_id = p->second;
    return meta;
}

void write_frame_meta(const FrameMeta& meta, const std::filesystem::path& path) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", meta.pixel_pitch_mm);
    KeyValues kv{{"pixel_pitch_mm", buf}};
    if (!meta.patient_id.empty()) kv["patient_id"] = meta.patient_id;
    write_key_values(kv, path);
}

}  // namespace plaqnet
