#pragma once

#include <bit>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "ri3d/error.hpp"
#include "ri3d/image.hpp"

namespace ri3d::io {

namespace fs = std::filesystem;

inline std::uint8_t to_byte(double v) {
    if (!(v > 0.0)) return 0;
    if (v >= 1.0) return 255;
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

// ---------------------------------------------------------------- PFM

/// Reads a grayscale PFM ("Pf"). Rows are stored bottom-up; the sign of the scale
/// field gives the byte order (negative = little-endian).
inline std::vector<float> read_pfm_raw(std::istream& in, const std::string& name, int& width, int& height) {
    std::string magic;
    in >> magic;
    if (magic != "Pf") throw LoadError(name, "header", "expected grayscale PFM magic 'Pf', got '" + magic + "'");
    double scale = 0;
    in >> width >> height >> scale;
    if (!in || width <= 0 || height <= 0 || scale == 0.0)
        throw LoadError(name, "header", "malformed PFM header");
    in.get();  // single whitespace byte terminates the header
    std::vector<float> rows(static_cast<std::size_t>(width) * height);
    in.read(reinterpret_cast<char*>(rows.data()), static_cast<std::streamsize>(rows.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(rows.size() * sizeof(float)))
        throw LoadError(name, "data", "truncated PFM payload");
    const bool file_little = scale < 0;
    if (file_little != (std::endian::native == std::endian::little)) {
        for (float& f : rows) {
            std::uint32_t u;
            std::memcpy(&u, &f, 4);
            u = __builtin_bswap32(u);
            std::memcpy(&f, &u, 4);
        }
    }
    std::vector<float> top_down(rows.size());
    for (int y = 0; y < height; ++y)
        std::memcpy(&top_down[static_cast<std::size_t>(y) * width],
                    &rows[static_cast<std::size_t>(height - 1 - y) * width], sizeof(float) * width);
    return top_down;
}

template <class Tag>
Raster<double, Tag> read_pfm(std::istream& in, const std::string& name) {
    int w = 0, h = 0;
    const auto data = read_pfm_raw(in, name, w, h);
    Raster<double, Tag> out(w, h);
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = static_cast<double>(data[i]);
    return out;
}

template <class Tag>
Raster<double, Tag> read_pfm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError(path.string(), "file", "cannot open");
    return read_pfm<Tag>(in, path.string());
}

template <class Tag>
Raster<double, Tag> decode_pfm(const std::vector<std::uint8_t>& bytes, const std::string& name = "pfm payload") {
    std::istringstream in(std::string(bytes.begin(), bytes.end()), std::ios::binary);
    return read_pfm<Tag>(in, name);
}

template <class Tag>
void write_pfm(std::ostream& out, const Raster<double, Tag>& r) {
    out << "Pf\n" << r.width() << " " << r.height() << "\n-1.0\n";
    std::vector<float> row(static_cast<std::size_t>(r.width()));
    for (int y = r.height() - 1; y >= 0; --y) {
        for (int x = 0; x < r.width(); ++x) {
            float f = static_cast<float>(r(x, y));
            if constexpr (std::endian::native == std::endian::big) {
                std::uint32_t u;
                std::memcpy(&u, &f, 4);
                u = __builtin_bswap32(u);
                std::memcpy(&f, &u, 4);
            }
            row[static_cast<std::size_t>(x)] = f;
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
}

template <class Tag>
void write_pfm(const fs::path& path, const Raster<double, Tag>& r) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::invalid_argument, "cannot write " + path.string());
    write_pfm(out, r);
}

template <class Tag>
std::vector<std::uint8_t> encode_pfm(const Raster<double, Tag>& r) {
    std::ostringstream out(std::ios::binary);
    write_pfm(out, r);
    const std::string s = out.str();
    return {s.begin(), s.end()};
}

// ---------------------------------------------------------------- PNG

namespace detail {

struct PngImage {
    png_image img{};
    PngImage() {
        std::memset(&img, 0, sizeof(img));
        img.version = PNG_IMAGE_VERSION;
    }
    ~PngImage() { png_image_free(&img); }
    PngImage(const PngImage&) = delete;
    PngImage& operator=(const PngImage&) = delete;
};

inline std::vector<std::uint8_t> finish_read(PngImage& p, std::uint32_t format, const std::string& what) {
    p.img.format = format;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(p.img));
    if (!png_image_finish_read(&p.img, nullptr, buf.data(), 0, nullptr))
        throw LoadError(what, "png", p.img.message);
    return buf;
}

inline ImageRGB rgb_from_bytes(const std::vector<std::uint8_t>& buf, int w, int h) {
    ImageRGB out(w, h);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = {buf[3 * i] / 255.0, buf[3 * i + 1] / 255.0, buf[3 * i + 2] / 255.0};
    return out;
}

inline std::vector<std::uint8_t> bytes_from_rgb(const ImageRGB& img) {
    std::vector<std::uint8_t> buf(img.size() * 3);
    for (std::size_t i = 0; i < img.size(); ++i)
        for (int c = 0; c < 3; ++c) buf[3 * i + c] = to_byte(img[i][c]);
    return buf;
}

inline std::vector<std::uint8_t> bytes_from_mask(const BinaryMask& m) {
    std::vector<std::uint8_t> buf(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) buf[i] = m[i] ? 255 : 0;
    return buf;
}

inline BinaryMask mask_from_bytes(const std::vector<std::uint8_t>& buf, int w, int h) {
    BinaryMask m(w, h);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = buf[i] >= 128 ? 1 : 0;
    return m;
}

inline std::vector<std::uint8_t> encode(std::vector<std::uint8_t> pixels, int w, int h, std::uint32_t format) {
    PngImage p;
    p.img.width = static_cast<png_uint_32>(w);
    p.img.height = static_cast<png_uint_32>(h);
    p.img.format = format;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&p.img, nullptr, &size, 0, pixels.data(), 0, nullptr))
        throw Error(ErrorCode::invalid_argument, std::string("png encode: ") + p.img.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&p.img, out.data(), &size, 0, pixels.data(), 0, nullptr))
        throw Error(ErrorCode::invalid_argument, std::string("png encode: ") + p.img.message);
    out.resize(size);
    return out;
}

inline void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::invalid_argument, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

inline ImageRGB decode_png_rgb(const std::vector<std::uint8_t>& bytes, const std::string& what = "png payload") {
    detail::PngImage p;
    if (!png_image_begin_read_from_memory(&p.img, bytes.data(), bytes.size()))
        throw LoadError(what, "png", p.img.message);
    const int w = static_cast<int>(p.img.width), h = static_cast<int>(p.img.height);
    return detail::rgb_from_bytes(detail::finish_read(p, PNG_FORMAT_RGB, what), w, h);
}

inline BinaryMask decode_png_mask(const std::vector<std::uint8_t>& bytes, const std::string& what = "png payload") {
    detail::PngImage p;
    if (!png_image_begin_read_from_memory(&p.img, bytes.data(), bytes.size()))
        throw LoadError(what, "png", p.img.message);
    const int w = static_cast<int>(p.img.width), h = static_cast<int>(p.img.height);
    return detail::mask_from_bytes(detail::finish_read(p, PNG_FORMAT_GRAY, what), w, h);
}

inline std::vector<std::uint8_t> encode_png(const ImageRGB& img) {
    return detail::encode(detail::bytes_from_rgb(img), img.width(), img.height(), PNG_FORMAT_RGB);
}

inline std::vector<std::uint8_t> encode_png(const BinaryMask& m) {
    return detail::encode(detail::bytes_from_mask(m), m.width(), m.height(), PNG_FORMAT_GRAY);
}

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError(path.string(), "file", "cannot open");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ImageRGB read_png_rgb(const fs::path& path) { return decode_png_rgb(read_bytes(path), path.string()); }
inline BinaryMask read_png_mask(const fs::path& path) { return decode_png_mask(read_bytes(path), path.string()); }

inline void write_png(const fs::path& path, const ImageRGB& img) { detail::write_file(path, encode_png(img)); }
inline void write_png(const fs::path& path, const BinaryMask& m) { detail::write_file(path, encode_png(m)); }

/// 8-bit quantisation as performed by a PNG round trip.
inline ImageRGB quantize8(const ImageRGB& img) {
    ImageRGB out(img.width(), img.height());
    for (std::size_t i = 0; i < img.size(); ++i)
        for (int c = 0; c < 3; ++c) out[i][c] = to_byte(img[i][c]) / 255.0;
    return out;
}

inline std::string view_name(const char* pattern, int index) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), pattern, index);
    return buf;
}

}  // namespace ri3d::io
