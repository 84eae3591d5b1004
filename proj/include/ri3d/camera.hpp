#pragma once

#include <cmath>
#include <string>

#include <Eigen/Core>
#include <Eigen/LU>

#include "ri3d/error.hpp"

namespace ri3d {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole camera with a world-to-camera pose: p_cam = rotation * p_world + translation.
/// +Z looks forward, +Y points down the image, the image origin is the top-left corner
/// and pixel (i, j) has its centre at (i + 0.5, j + 0.5).
struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 1, height = 1;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 center() const { return -rotation.transpose() * translation; }
    Vec3 to_camera(const Vec3& p) const { return rotation * p + translation; }

    friend bool operator==(const Camera& a, const Camera& b) {
        return a.fx == b.fx && a.fy == b.fy && a.cx == b.cx && a.cy == b.cy && a.width == b.width &&
               a.height == b.height && a.rotation == b.rotation && a.translation == b.translation;
    }
};

inline constexpr double kRotationTolerance = 1e-6;
inline constexpr double kMinProjectionDepth = 1e-8;

/// Throws with a message naming the violated invariant; returns normally otherwise.
inline void validate(const Camera& c) {
    if (!(c.fx > 0) || !(c.fy > 0))
        throw Error(ErrorCode::invalid_argument, "focal length must be positive");
    if (c.width < 1 || c.height < 1)
        throw Error(ErrorCode::invalid_argument, "image size must be at least 1x1");
    if (!c.rotation.allFinite() || !c.translation.allFinite())
        throw Error(ErrorCode::invalid_argument, "pose is not finite");
    const double orth = (c.rotation * c.rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (orth > kRotationTolerance || std::abs(c.rotation.determinant() - 1.0) > kRotationTolerance)
        throw Error(ErrorCode::invalid_argument, "rotation not special-orthogonal");
}

struct Projection {
    double u = 0, v = 0, z = 0;
};

inline Projection project_point(const Camera& cam, const Vec3& p) {
    const Vec3 pc = cam.to_camera(p);
    if (!(pc.z() > kMinProjectionDepth))
        throw Error(ErrorCode::behind_camera, "point is behind the camera");
    return {cam.fx * pc.x() / pc.z() + cam.cx, cam.fy * pc.y() / pc.z() + cam.cy, pc.z()};
}

/// World point at camera-space depth `depth` on the ray through image coordinate (u, v).
inline Vec3 unproject_pixel(const Camera& cam, double u, double v, double depth) {
    if (!(depth > 0) || !std::isfinite(depth))
        throw Error(ErrorCode::invalid_depth, "unproject requires positive finite depth");
    const Vec3 pc((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
    return cam.rotation.transpose() * (pc - cam.translation);
}

/// Camera at `eye` looking at `target`; `up` is the world direction mapped to image -Y.
inline Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy,
                      int width, int height) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up);
    if (right.norm() < 1e-12) throw Error(ErrorCode::invalid_argument, "look_at: up parallel to view");
    right.normalize();
    const Vec3 down = forward.cross(right);
    Camera c;
    c.fx = fx;
    c.fy = fy;
    c.cx = width / 2.0;
    c.cy = height / 2.0;
    c.width = width;
    c.height = height;
    c.rotation.row(0) = right.transpose();
    c.rotation.row(1) = down.transpose();
    c.rotation.row(2) = forward.transpose();
    c.translation = -c.rotation * eye;
    return c;
}

}  // namespace ri3d
