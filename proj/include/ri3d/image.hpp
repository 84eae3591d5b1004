#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ri3d/error.hpp"

namespace ri3d {

using Rgb = std::array<double, 3>;

/// Row-major 2-D raster. The tag parameter keeps depth, confidence and
/// generic scalar images from silently converting into each other.
template <class T, class Tag>
class Raster {
public:
    using value_type = T;

    Raster() = default;
    Raster(int width, int height, T fill = T{})
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(checked_area(width, height)), fill) {}

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(int x, int y) { return data_[index(x, y)]; }
    const T& operator()(int x, int y) const { return data_[index(x, y)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(x);
    }
    bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    template <class OtherT, class OtherTag>
    bool same_shape(const Raster<OtherT, OtherTag>& o) const {
        return width_ == o.width() && height_ == o.height();
    }

    friend bool operator==(const Raster& a, const Raster& b) = default;

private:
    static long checked_area(int w, int h) {
        if (w < 0 || h < 0) throw Error(ErrorCode::invalid_argument, "negative raster size");
        return static_cast<long>(w) * static_cast<long>(h);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

struct RgbTag {};
struct DepthTag {};
struct ConfidenceTag {};
struct MaskTag {};
struct ScalarTag {};

using ImageRGB = Raster<Rgb, RgbTag>;
/// Non-positive values mark invalid pixels.
using DepthMap = Raster<double, DepthTag>;
using ConfidenceMap = Raster<double, ConfidenceTag>;
using BinaryMask = Raster<std::uint8_t, MaskTag>;
/// Alpha images and per-pixel gradient images.
using ScalarImage = Raster<double, ScalarTag>;

inline constexpr double kInvalidDepth = 0.0;

inline bool valid_depth(double d) { return d > 0.0 && std::isfinite(d); }

template <class A, class B>
void require_same_shape(const A& a, const B& b, const char* what) {
    if (!a.same_shape(b))
        throw Error(ErrorCode::invalid_argument,
                    std::string(what) + ": size mismatch " + std::to_string(a.width()) + "x" +
                        std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                        std::to_string(b.height()));
}

inline std::size_t count(const BinaryMask& m) {
    return static_cast<std::size_t>(std::count_if(m.values().begin(), m.values().end(),
                                                  [](std::uint8_t b) { return b != 0; }));
}

inline BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b, "mask_and");
    BinaryMask out(a.width(), a.height());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] && b[i]) ? 1 : 0;
    return out;
}

inline BinaryMask mask_not(const BinaryMask& a) {
    BinaryMask out(a.width(), a.height());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] ? 0 : 1;
    return out;
}

inline BinaryMask full_mask(int w, int h) { return BinaryMask(w, h, 1); }

/// Disk dilation; only in-bounds neighbours take part.
inline BinaryMask dilate(const BinaryMask& m, int radius) {
    BinaryMask out(m.width(), m.height());
    const int r2 = radius * radius;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) {
            std::uint8_t v = 0;
            for (int dy = -radius; dy <= radius && !v; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    if (dx * dx + dy * dy > r2 || !m.contains(x + dx, y + dy)) continue;
                    if (m(x + dx, y + dy)) {
                        v = 1;
                        break;
                    }
                }
            out(x, y) = v;
        }
    return out;
}

/// Disk erosion; out-of-bounds neighbours are ignored rather than treated as zero.
inline BinaryMask erode(const BinaryMask& m, int radius) {
    BinaryMask out(m.width(), m.height());
    const int r2 = radius * radius;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) {
            std::uint8_t v = 1;
            for (int dy = -radius; dy <= radius && v; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    if (dx * dx + dy * dy > r2 || !m.contains(x + dx, y + dy)) continue;
                    if (!m(x + dx, y + dy)) {
                        v = 0;
                        break;
                    }
                }
            out(x, y) = v;
        }
    return out;
}

inline BinaryMask close(const BinaryMask& m, int radius) { return erode(dilate(m, radius), radius); }

/// Bilinear resample with pixel centres at integer + 0.5 and clamped borders.
template <class T, class Tag>
Raster<T, Tag> resize_bilinear(const Raster<T, Tag>& src, int width, int height) {
    if (src.empty()) throw Error(ErrorCode::invalid_argument, "resize of empty raster");
    Raster<T, Tag> out(width, height);
    const double sx = static_cast<double>(src.width()) / width;
    const double sy = static_cast<double>(src.height()) / height;
    auto lerp = [](const T& a, const T& b, double t) {
        if constexpr (std::is_same_v<T, Rgb>) {
            return Rgb{a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
        } else {
            return static_cast<T>(a + (b - a) * t);
        }
    };
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height() - 1.0);
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, src.height() - 1);
        const double ty = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width() - 1.0);
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, src.width() - 1);
            const double tx = fx - x0;
            out(x, y) = lerp(lerp(src(x0, y0), src(x1, y0), tx), lerp(src(x0, y1), src(x1, y1), tx), ty);
        }
    }
    return out;
}

/// Bilinear upsampling of a depth map that never mixes valid and invalid samples:
/// weights of invalid neighbours are dropped and the rest renormalised.
inline DepthMap resize_depth(const DepthMap& src, int width, int height) {
    DepthMap out(width, height);
    const double sx = static_cast<double>(src.width()) / width;
    const double sy = static_cast<double>(src.height()) / height;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height() - 1.0);
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, src.height() - 1);
        const double ty = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width() - 1.0);
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, src.width() - 1);
            const double tx = fx - x0;
            const std::array<std::pair<double, double>, 4> taps{{
                {src(x0, y0), (1 - tx) * (1 - ty)},
                {src(x1, y0), tx * (1 - ty)},
                {src(x0, y1), (1 - tx) * ty},
                {src(x1, y1), tx * ty},
            }};
            double acc = 0, wsum = 0;
            for (auto [v, w] : taps)
                if (valid_depth(v) && w > 0) {
                    acc += v * w;
                    wsum += w;
                }
            out(x, y) = wsum > 0 ? acc / wsum : kInvalidDepth;
        }
    }
    return out;
}

}  // namespace ri3d
