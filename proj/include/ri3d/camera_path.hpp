#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "ri3d/camera.hpp"
#include "ri3d/error.hpp"

namespace ri3d {

/// Ellipse lying in a 3-D plane: origin + (center + a cos t e1 + b sin t e2) in the
/// plane basis (u, v). `phase` is the parameter of the first input camera.
struct CameraPath {
    Vec3 origin = Vec3::Zero();
    Vec3 u = Vec3::UnitX(), v = Vec3::UnitY(), normal = Vec3::UnitZ();
    Vec3 up = Vec3::UnitY();  // up vector handed to the sampled cameras
    Vec2 center = Vec2::Zero();
    Vec2 e1 = Vec2::UnitX(), e2 = Vec2::UnitY();
    double a = 1, b = 1;
    double phase = 0;
    bool circle = true;

    Vec3 point(double t) const {
        const Vec2 p = center + a * std::cos(t) * e1 + b * std::sin(t) * e2;
        return origin + p.x() * u + p.y() * v;
    }
    Vec2 to_plane(const Vec3& p) const { return Vec2((p - origin).dot(u), (p - origin).dot(v)); }
    /// Parameter of the path point nearest (in the ellipse frame) to the projection of p.
    double parameter(const Vec3& p) const {
        const Vec2 d = to_plane(p) - center;
        return std::atan2(d.dot(e2) / b, d.dot(e1) / a);
    }
};

namespace detail {

[[noreturn]] inline void path_fit_failed(const std::string& why) {
    throw Error(ErrorCode::path_fit, "camera path fit failed: " + why + "; supply a manual path file instead");
}

inline bool circle_fit(const std::vector<Vec2>& pts, Vec2& center, double& radius) {
    Eigen::MatrixXd a(pts.size(), 3);
    Eigen::VectorXd rhs(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        a.row(i) << pts[i].x(), pts[i].y(), 1.0;
        rhs[i] = -pts[i].squaredNorm();
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    qr.setThreshold(1e-10);
    if (qr.rank() < 3) return false;
    const Eigen::Vector3d s = qr.solve(rhs);
    center = Vec2(-s[0] / 2, -s[1] / 2);
    const double r2 = center.squaredNorm() - s[2];
    if (!(r2 > 0)) return false;
    radius = std::sqrt(r2);
    return true;
}

/// Direct least-squares ellipse fit (Halir & Flusser's stable form of Fitzgibbon's method)
/// on points already centred and scaled to unit spread.
inline bool ellipse_fit(const std::vector<Vec2>& pts, Vec2& center, Vec2& e1, Vec2& e2, double& a, double& b) {
    const Eigen::Index n = static_cast<Eigen::Index>(pts.size());
    Eigen::MatrixXd d1(n, 3), d2(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double x = pts[i].x(), y = pts[i].y();
        d1.row(i) << x * x, x * y, y * y;
        d2.row(i) << x, y, 1.0;
    }
    const Eigen::Matrix3d s1 = d1.transpose() * d1, s2 = d1.transpose() * d2, s3 = d2.transpose() * d2;
    Eigen::FullPivLU<Eigen::Matrix3d> lu(s3);
    if (!lu.isInvertible()) return false;
    const Eigen::Matrix3d t = -lu.solve(s2.transpose());
    const Eigen::Matrix3d m = s1 + s2 * t;
    Eigen::Matrix3d mc;
    mc.row(0) = m.row(2) / 2;
    mc.row(1) = -m.row(1);
    mc.row(2) = m.row(0) / 2;
    Eigen::EigenSolver<Eigen::Matrix3d> es(mc);
    int pick = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
        const Eigen::Vector3d ev = es.eigenvectors().col(k).real();
        const double cond = 4 * ev[0] * ev[2] - ev[1] * ev[1];
        // The ellipse solution is the eigenvector with positive constraint value and the
        // smallest non-negative eigenvalue.
        const double lam = es.eigenvalues()[k].real();
        if (cond > 0 && std::abs(lam) < best) {
            best = std::abs(lam);
            pick = k;
        }
    }
    if (pick < 0) return false;
    const Eigen::Vector3d c1 = es.eigenvectors().col(pick).real();
    const Eigen::Vector3d c2 = t * c1;
    const double A = c1[0], B = c1[1], C = c1[2], D = c2[0], E = c2[1], F = c2[2];
    Eigen::Matrix2d q;
    q << 2 * A, B, B, 2 * C;
    const Vec2 c = q.fullPivLu().solve(Vec2(-D, -E));
    const double f0 = F + (D * c.x() + E * c.y()) / 2;
    Eigen::Matrix2d quad;
    quad << A, B / 2, B / 2, C;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> sa(quad);
    const double r0 = -f0 / sa.eigenvalues()[0], r1 = -f0 / sa.eigenvalues()[1];
    if (!(r0 > 0) || !(r1 > 0)) return false;
    center = c;
    // eigenvalues ascending: the smaller one belongs to the major axis
    a = std::sqrt(r0);
    b = std::sqrt(r1);
    e1 = sa.eigenvectors().col(0);
    e2 = sa.eigenvectors().col(1);
    if (e1.x() * e2.y() - e1.y() * e2.x() < 0) e2 = -e2;
    return std::isfinite(a) && std::isfinite(b);
}

}  // namespace detail

/// Fits a plane to the camera centres, then an ellipse (five or more cameras) or a
/// circle (fewer, or when the conic fit is not an ellipse) to the in-plane centres.
/// The plane normal is oriented along the cameras' mean up direction and serves as the
/// novel cameras' up vector unless it is more than 60 degrees away from that direction.
inline CameraPath fit_camera_path(const std::vector<Camera>& cams) {
    if (cams.size() < 3) detail::path_fit_failed("need at least 3 non-collinear camera centres");
    const Eigen::Index n = static_cast<Eigen::Index>(cams.size());
    Vec3 mean = Vec3::Zero();
    for (const auto& c : cams) mean += c.center();
    mean /= static_cast<double>(n);
    Eigen::MatrixXd x(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = (cams[i].center() - mean).transpose();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
    const auto sv = svd.singularValues();
    if (sv[0] < 1e-9) detail::path_fit_failed("camera centres coincide");
    if (sv[1] < 1e-9 * sv[0]) detail::path_fit_failed("camera centres are collinear");

    CameraPath path;
    path.origin = mean;
    path.u = svd.matrixV().col(0);
    path.normal = svd.matrixV().col(2);
    Vec3 up = Vec3::Zero();
    for (const auto& c : cams) up -= c.rotation.row(1).transpose();
    if (path.normal.dot(up) < 0) path.normal = -path.normal;
    path.v = path.normal.cross(path.u);
    // A path around the scene has its normal along the cameras' up direction; a
    // forward-facing rig has it along the view direction, where it cannot serve as up.
    up.normalize();
    path.up = path.normal.dot(up) >= 0.5 ? path.normal : up;

    std::vector<Vec2> pts;
    for (const auto& c : cams) pts.push_back(path.to_plane(c.center()));

    bool ok = false;
    if (pts.size() >= 5) {
        const double spread = sv[0] / std::sqrt(static_cast<double>(n));
        std::vector<Vec2> scaled;
        for (const auto& p : pts) scaled.push_back(p / spread);
        Vec2 c, e1, e2;
        double a = 0, b = 0;
        if (detail::ellipse_fit(scaled, c, e1, e2, a, b)) {
            path.center = c * spread;
            path.e1 = e1;
            path.e2 = e2;
            path.a = a * spread;
            path.b = b * spread;
            path.circle = false;
            ok = true;
        }
    }
    if (!ok) {
        double r = 0;
        if (!detail::circle_fit(pts, path.center, r)) detail::path_fit_failed("no circle through the camera centres");
        path.a = path.b = r;
        path.e1 = Vec2::UnitX();
        path.e2 = Vec2::UnitY();
        path.circle = true;
    }
    path.phase = path.parameter(cams.front().center());
    return path;
}

/// `count` cameras at equal parameter spacing along the path, offset half a step from
/// the first input camera so none duplicates it, looking at `target` with intrinsics copied from `intrinsics`.
inline std::vector<Camera> sample_path(const CameraPath& path, int count, const Vec3& target, const Camera& intrinsics) {
    if (count < 1) throw Error(ErrorCode::invalid_argument, "sample_path: count must be >= 1");
    std::vector<Camera> out;
    for (int k = 0; k < count; ++k) {
        const double t = path.phase + 2 * M_PI * (k + 0.5) / count;
        Camera c = look_at(path.point(t), target, path.up, intrinsics.fx, intrinsics.fy, intrinsics.width,
                           intrinsics.height);
        c.cx = intrinsics.cx;
        c.cy = intrinsics.cy;
        out.push_back(c);
    }
    return out;
}

}  // namespace ri3d
