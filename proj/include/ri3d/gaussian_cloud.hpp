#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "ri3d/camera.hpp"
#include "ri3d/image.hpp"

namespace ri3d {

using Quat = Eigen::Vector4d;  // (w, x, y, z)

enum class GaussianSource : std::uint8_t { input_view = 0, inpaint_spawned = 1 };

struct SourceTag {
    GaussianSource kind = GaussianSource::input_view;
    std::int32_t view = 0;
    std::int32_t pixel = 0;  // row-major pixel index in the originating view
    friend bool operator==(const SourceTag&, const SourceTag&) = default;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Structure-of-arrays Gaussian scene. Opacity is stored pre-activation and
/// passed through a logistic function.
struct GaussianCloud {
    std::vector<Vec3> position;
    std::vector<double> opacity_logit;
    std::vector<Vec3> scale;
    std::vector<Quat> rotation;
    std::vector<Rgb> color;
    std::vector<SourceTag> source;

    std::size_t size() const { return position.size(); }
    bool empty() const { return position.empty(); }
    double opacity(std::size_t i) const { return sigmoid(opacity_logit[i]); }

    void push_back(const Vec3& p, double opacity_activated, const Vec3& s, const Quat& q, const Rgb& c,
                   SourceTag tag = {}) {
        position.push_back(p);
        opacity_logit.push_back(logit(opacity_activated));
        scale.push_back(s);
        rotation.push_back(q);
        color.push_back(c);
        source.push_back(tag);
    }

    void append(const GaussianCloud& other) {
        position.insert(position.end(), other.position.begin(), other.position.end());
        opacity_logit.insert(opacity_logit.end(), other.opacity_logit.begin(), other.opacity_logit.end());
        scale.insert(scale.end(), other.scale.begin(), other.scale.end());
        rotation.insert(rotation.end(), other.rotation.begin(), other.rotation.end());
        color.insert(color.end(), other.color.begin(), other.color.end());
        source.insert(source.end(), other.source.begin(), other.source.end());
    }

    friend bool operator==(const GaussianCloud&, const GaussianCloud&) = default;
};

inline Quat identity_quat() { return Quat(1, 0, 0, 0); }

/// Rotation matrix of a (not necessarily normalised) quaternion; the quaternion is normalised first.
inline Mat3 quat_to_matrix(const Quat& q) {
    const Quat n = q / q.norm();
    const double w = n[0], x = n[1], y = n[2], z = n[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

inline constexpr double kQuatTolerance = 1e-6;

inline void validate(const GaussianCloud& g) {
    const std::size_t n = g.size();
    if (g.opacity_logit.size() != n || g.scale.size() != n || g.rotation.size() != n ||
        g.color.size() != n || g.source.size() != n)
        throw Error(ErrorCode::invalid_argument, "GaussianCloud arrays have inconsistent lengths");
    for (std::size_t i = 0; i < n; ++i) {
        const std::string at = " (gaussian " + std::to_string(i) + ")";
        if (!g.position[i].allFinite()) throw Error(ErrorCode::invalid_argument, "non-finite position" + at);
        const double a = g.opacity(i);
        if (!(a > 0.0 && a < 1.0)) throw Error(ErrorCode::invalid_argument, "opacity outside (0,1)" + at);
        if (!(g.scale[i].minCoeff() > 0.0) || !g.scale[i].allFinite())
            throw Error(ErrorCode::invalid_argument, "non-positive scale" + at);
        if (std::abs(g.rotation[i].norm() - 1.0) > kQuatTolerance)
            throw Error(ErrorCode::invalid_argument, "quaternion not unit" + at);
        for (double c : g.color[i])
            if (!(c >= 0.0 && c <= 1.0)) throw Error(ErrorCode::invalid_argument, "color outside [0,1]" + at);
    }
}

}  // namespace ri3d
