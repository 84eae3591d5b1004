#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "ri3d/camera.hpp"
#include "ri3d/gaussian_cloud.hpp"
#include "ri3d/image.hpp"

namespace ri3d {

struct RenderSettings {
    double alpha_max = 0.999;
    double min_transmittance = 1e-4;
    double lowpass = 0.3;       // px^2 added to the projected covariance diagonal
    double cull_sigma = 3.0;    // footprint radius in projected standard deviations
    double near_plane = 0.01;
    // The projection Jacobian is evaluated with x/z and y/z clamped to this multiple of
    // the image bounds, so Gaussians far outside the view cannot blow up on screen.
    double frustum_margin = 1.3;
    int tile_size = 16;
};

using CountImage = Raster<int, ScalarTag>;

struct RenderOutput {
    ImageRGB color;
    DepthMap depth;      // alpha-normalised expected depth, invalid where alpha <= 1e-4
    ScalarImage alpha;   // accumulated opacity
    CountImage contributors;
};

/// Per-pixel loss gradients fed to render_backward. Empty rasters stand for zero.
struct PixelGradients {
    ImageRGB color;
    ScalarImage depth;
    ScalarImage alpha;
};

struct GradientBuffer {
    std::vector<Vec3> position;
    std::vector<double> opacity_logit;
    std::vector<Vec3> scale;
    std::vector<Quat> rotation;
    std::vector<Rgb> color;

    explicit GradientBuffer(std::size_t n = 0)
        : position(n, Vec3::Zero()), opacity_logit(n, 0.0), scale(n, Vec3::Zero()), rotation(n, Quat::Zero()),
          color(n, Rgb{0, 0, 0}) {}
    std::size_t size() const { return position.size(); }

    GradientBuffer& operator+=(const GradientBuffer& o) {
        for (std::size_t i = 0; i < size(); ++i) {
            position[i] += o.position[i];
            opacity_logit[i] += o.opacity_logit[i];
            scale[i] += o.scale[i];
            rotation[i] += o.rotation[i];
            for (int c = 0; c < 3; ++c) color[i][c] += o.color[i][c];
        }
        return *this;
    }
    GradientBuffer& operator*=(double s) {
        for (std::size_t i = 0; i < size(); ++i) {
            position[i] *= s;
            opacity_logit[i] *= s;
            scale[i] *= s;
            rotation[i] *= s;
            for (int c = 0; c < 3; ++c) color[i][c] *= s;
        }
        return *this;
    }
};

namespace detail {

/// A Gaussian after EWA projection into one camera.
struct Splat {
    bool visible = false;
    Vec3 cam;             // camera-space centre
    Vec2 mean;            // image-space centre
    Eigen::Matrix2d cov;  // projected covariance incl. low-pass
    double conic_a = 0, conic_b = 0, conic_c = 0;
    double opacity = 0;
    double radius_x = 0, radius_y = 0;
    // Kept for the backward pass.
    Mat3 rot;                           // rotation of the normalised quaternion
    Eigen::Matrix<double, 2, 3> jw;     // J * W
    Mat3 sigma3;                        // world-space covariance
    bool clamp_x = false, clamp_y = false;  // Jacobian used a clamped x/z or y/z
    double jx = 0, jy = 0;                  // x/z and y/z after clamping
};

inline Splat project_splat(const GaussianCloud& g, std::size_t i, const Camera& cam, const RenderSettings& rs) {
    Splat s;
    s.cam = cam.to_camera(g.position[i]);
    const double X = s.cam.x(), Y = s.cam.y(), Z = s.cam.z();
    if (!(Z > rs.near_plane)) return s;
    s.rot = quat_to_matrix(g.rotation[i]);
    const Mat3 m = s.rot * g.scale[i].asDiagonal();
    s.sigma3 = m * m.transpose();
    const double fm = rs.frustum_margin;
    const double x_lo = -fm * cam.cx / cam.fx, x_hi = fm * (cam.width - cam.cx) / cam.fx;
    const double y_lo = -fm * cam.cy / cam.fy, y_hi = fm * (cam.height - cam.cy) / cam.fy;
    s.jx = std::clamp(X / Z, x_lo, x_hi);
    s.jy = std::clamp(Y / Z, y_lo, y_hi);
    s.clamp_x = s.jx != X / Z;
    s.clamp_y = s.jy != Y / Z;
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx / Z, 0, -cam.fx * s.jx / Z, 0, cam.fy / Z, -cam.fy * s.jy / Z;
    s.jw = j * cam.rotation;
    s.cov = s.jw * s.sigma3 * s.jw.transpose();
    s.cov(0, 0) += rs.lowpass;
    s.cov(1, 1) += rs.lowpass;
    const double det = s.cov(0, 0) * s.cov(1, 1) - s.cov(0, 1) * s.cov(1, 0);
    if (!(det > 0)) return s;
    s.conic_a = s.cov(1, 1) / det;
    s.conic_b = -s.cov(0, 1) / det;
    s.conic_c = s.cov(0, 0) / det;
    s.mean = Vec2(cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy);
    s.opacity = g.opacity(i);
    s.radius_x = rs.cull_sigma * std::sqrt(s.cov(0, 0));
    s.radius_y = rs.cull_sigma * std::sqrt(s.cov(1, 1));
    s.visible = true;
    return s;
}

/// Sorted candidate lists per screen tile.
struct Binning {
    int tiles_x = 0, tiles_y = 0, tile = 16;
    std::vector<std::vector<std::uint32_t>> lists;
};

inline Binning bin_splats(const std::vector<Splat>& splats, const Camera& cam, const RenderSettings& rs) {
    Binning b;
    b.tile = std::max(1, rs.tile_size);
    b.tiles_x = (cam.width + b.tile - 1) / b.tile;
    b.tiles_y = (cam.height + b.tile - 1) / b.tile;
    b.lists.resize(static_cast<std::size_t>(b.tiles_x * b.tiles_y));
    for (std::size_t i = 0; i < splats.size(); ++i) {
        const Splat& s = splats[i];
        if (!s.visible) continue;
        // Pixel centres x + 0.5 inside [mean - r, mean + r].
        const double x0 = std::ceil(s.mean.x() - s.radius_x - 0.5), x1 = std::floor(s.mean.x() + s.radius_x - 0.5);
        const double y0 = std::ceil(s.mean.y() - s.radius_y - 0.5), y1 = std::floor(s.mean.y() + s.radius_y - 0.5);
        if (x1 < 0 || y1 < 0 || x0 > cam.width - 1 || y0 > cam.height - 1 || x0 > x1 || y0 > y1) continue;
        const int px0 = static_cast<int>(std::max(0.0, x0)), px1 = static_cast<int>(std::min<double>(cam.width - 1, x1));
        const int py0 = static_cast<int>(std::max(0.0, y0)), py1 = static_cast<int>(std::min<double>(cam.height - 1, y1));
        for (int ty = py0 / b.tile; ty <= py1 / b.tile; ++ty)
            for (int tx = px0 / b.tile; tx <= px1 / b.tile; ++tx)
                b.lists[static_cast<std::size_t>(ty * b.tiles_x + tx)].push_back(static_cast<std::uint32_t>(i));
    }
    for (auto& l : b.lists)
        std::sort(l.begin(), l.end(), [&](std::uint32_t a, std::uint32_t c) {
            const double za = splats[a].cam.z(), zc = splats[c].cam.z();
            return za < zc || (za == zc && a < c);
        });
    return b;
}

struct Contribution {
    std::uint32_t index;
    double alpha;
    double gauss;   // exp(power)
    double dx, dy;  // pixel centre minus splat mean
    double transmittance;  // before this splat
    bool clamped;
};

/// Front-to-back compositing of one pixel; returns the final transmittance.
template <class Visit>
double composite_pixel(const std::vector<Splat>& splats, const std::vector<std::uint32_t>& list, double px, double py,
                       const RenderSettings& rs, Visit&& visit) {
    double t = 1.0;
    const double max_power = 0.5 * rs.cull_sigma * rs.cull_sigma;
    for (std::uint32_t idx : list) {
        if (t < rs.min_transmittance) break;
        const Splat& s = splats[idx];
        const double dx = px - s.mean.x(), dy = py - s.mean.y();
        const double q = 0.5 * (s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy);
        if (q > max_power) continue;
        const double gauss = std::exp(-q);
        double a = s.opacity * gauss;
        bool clamped = false;
        if (a > rs.alpha_max) {
            a = rs.alpha_max;
            clamped = true;
        }
        visit(Contribution{idx, a, gauss, dx, dy, t, clamped});
        t *= 1.0 - a;
    }
    return t;
}

inline std::vector<Splat> project_all(const GaussianCloud& cloud, const Camera& cam, const RenderSettings& rs) {
    std::vector<Splat> splats(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) splats[i] = project_splat(cloud, i, cam, rs);
    return splats;
}

}  // namespace detail

/// Alpha-composited rendering of colour, expected depth and accumulated opacity.
inline RenderOutput render(const GaussianCloud& cloud, const Camera& cam, const Rgb& background,
                           const RenderSettings& rs = {}) {
    const auto splats = detail::project_all(cloud, cam, rs);
    const auto bins = detail::bin_splats(splats, cam, rs);
    RenderOutput out;
    out.color = ImageRGB(cam.width, cam.height);
    out.depth = DepthMap(cam.width, cam.height);
    out.alpha = ScalarImage(cam.width, cam.height);
    out.contributors = CountImage(cam.width, cam.height);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const auto& list = bins.lists[static_cast<std::size_t>((y / bins.tile) * bins.tiles_x + x / bins.tile)];
            Rgb c{0, 0, 0};
            double dnum = 0;
            int n = 0;
            const double t = detail::composite_pixel(splats, list, x + 0.5, y + 0.5, rs, [&](const detail::Contribution& k) {
                const double w = k.alpha * k.transmittance;
                for (int ch = 0; ch < 3; ++ch) c[ch] += w * cloud.color[k.index][ch];
                dnum += w * splats[k.index].cam.z();
                ++n;
            });
            for (int ch = 0; ch < 3; ++ch) c[ch] += t * background[ch];
            const double a = 1.0 - t;
            out.color(x, y) = c;
            out.alpha(x, y) = a;
            out.depth(x, y) = a > 1e-4 ? dnum / a : kInvalidDepth;
            out.contributors(x, y) = n;
        }
    return out;
}

namespace detail {

struct SplatGrad {
    Vec2 mean = Vec2::Zero();
    double conic_a = 0, conic_b = 0, conic_c = 0;
    double opacity = 0;  // w.r.t. activated opacity
    double z = 0;
};

inline Mat3 rotation_partial(const Quat& q, int k) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 d;
    switch (k) {
        case 0: d << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0; break;
        case 1: d << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x; break;
        case 2: d << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y; break;
        default: d << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0; break;
    }
    return d;
}

}  // namespace detail

/// Analytic gradients of a scalar loss through `render`, given the loss's per-pixel
/// gradients with respect to the rendered colour, depth and alpha images.
inline GradientBuffer render_backward(const GaussianCloud& cloud, const Camera& cam, const Rgb& background,
                                      const PixelGradients& upstream, const RenderSettings& rs = {}) {
    const std::size_t n = cloud.size();
    GradientBuffer grad(n);
    const bool has_color = !upstream.color.empty(), has_depth = !upstream.depth.empty(),
               has_alpha = !upstream.alpha.empty();
    if (!has_color && !has_depth && !has_alpha) return grad;

    const auto splats = detail::project_all(cloud, cam, rs);
    const auto bins = detail::bin_splats(splats, cam, rs);
    std::vector<detail::SplatGrad> sg(n);
    std::vector<detail::Contribution> contribs;

    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const Rgb gc = has_color ? upstream.color(x, y) : Rgb{0, 0, 0};
            const double gd = has_depth ? upstream.depth(x, y) : 0.0;
            double ga = has_alpha ? upstream.alpha(x, y) : 0.0;
            if (gc[0] == 0 && gc[1] == 0 && gc[2] == 0 && gd == 0 && ga == 0) continue;

            const auto& list = bins.lists[static_cast<std::size_t>((y / bins.tile) * bins.tiles_x + x / bins.tile)];
            contribs.clear();
            double dnum = 0;
            const double t_final = detail::composite_pixel(splats, list, x + 0.5, y + 0.5, rs,
                                                           [&](const detail::Contribution& k) {
                                                               contribs.push_back(k);
                                                               dnum += k.alpha * k.transmittance * splats[k.index].cam.z();
                                                           });
            const double a = 1.0 - t_final;
            double g_dnum = 0;
            if (gd != 0 && a > 1e-4) {
                g_dnum = gd / a;
                ga -= gd * dnum / (a * a);
            }
            const double g_t = -ga;
            double tail = t_final * (gc[0] * background[0] + gc[1] * background[1] + gc[2] * background[2] + g_t);
            for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
                const auto& k = *it;
                const Rgb& col = cloud.color[k.index];
                const double zc = splats[k.index].cam.z();
                const double f = gc[0] * col[0] + gc[1] * col[1] + gc[2] * col[2] + g_dnum * zc;
                const double w = k.alpha * k.transmittance;
                const double g_alpha = k.transmittance * f - tail / (1.0 - k.alpha);
                tail += w * f;
                for (int ch = 0; ch < 3; ++ch) grad.color[k.index][ch] += w * gc[ch];
                auto& s = sg[k.index];
                s.z += w * g_dnum;
                if (k.clamped) continue;
                const auto& sp = splats[k.index];
                s.opacity += g_alpha * k.gauss;
                const double g_power = g_alpha * k.alpha;  // d alpha / d(-q) = alpha
                // power = -q, q = 0.5 (a dx^2 + 2 b dx dy + c dy^2), dx = px - mean_x
                s.mean.x() += g_power * (sp.conic_a * k.dx + sp.conic_b * k.dy);
                s.mean.y() += g_power * (sp.conic_b * k.dx + sp.conic_c * k.dy);
                s.conic_a += g_power * (-0.5 * k.dx * k.dx);
                s.conic_b += g_power * (-k.dx * k.dy);
                s.conic_c += g_power * (-0.5 * k.dy * k.dy);
            }
        }

    for (std::size_t i = 0; i < n; ++i) {
        const auto& sp = splats[i];
        const auto& s = sg[i];
        if (!sp.visible) continue;
        const double sig = sp.opacity;
        grad.opacity_logit[i] = s.opacity * sig * (1.0 - sig);

        // conic -> projected covariance
        Eigen::Matrix2d k;
        k << sp.conic_a, sp.conic_b, sp.conic_b, sp.conic_c;
        Eigen::Matrix2d gk;
        gk << s.conic_a, 0.5 * s.conic_b, 0.5 * s.conic_b, s.conic_c;
        const Eigen::Matrix2d g_cov = -k * gk * k;

        // cov = T Sigma T^T with T = J W
        const Mat3 g_sigma = sp.jw.transpose() * g_cov * sp.jw;
        const Eigen::Matrix<double, 2, 3> g_t = 2.0 * g_cov * sp.jw * sp.sigma3;
        const Eigen::Matrix<double, 2, 3> g_j = g_t * cam.rotation.transpose();

        const double X = sp.cam.x(), Y = sp.cam.y(), Z = sp.cam.z();
        const double fx = cam.fx, fy = cam.fy;
        Vec3 g_pc = Vec3::Zero();
        // mean
        g_pc.x() += s.mean.x() * fx / Z;
        g_pc.y() += s.mean.y() * fy / Z;
        g_pc.z() += -s.mean.x() * fx * X / (Z * Z) - s.mean.y() * fy * Y / (Z * Z);
        // Jacobian entries
        g_pc.z() += g_j(0, 0) * (-fx / (Z * Z)) + g_j(1, 1) * (-fy / (Z * Z));
        // J02 = -fx X / Z^2, or -fx c / Z with c the clamped x/z held constant
        if (sp.clamp_x) {
            g_pc.z() += g_j(0, 2) * (fx * sp.jx / (Z * Z));
        } else {
            g_pc.x() += g_j(0, 2) * (-fx / (Z * Z));
            g_pc.z() += g_j(0, 2) * (2.0 * fx * X / (Z * Z * Z));
        }
        if (sp.clamp_y) {
            g_pc.z() += g_j(1, 2) * (fy * sp.jy / (Z * Z));
        } else {
            g_pc.y() += g_j(1, 2) * (-fy / (Z * Z));
            g_pc.z() += g_j(1, 2) * (2.0 * fy * Y / (Z * Z * Z));
        }
        // expected depth
        g_pc.z() += s.z;
        grad.position[i] = cam.rotation.transpose() * g_pc;

        // Sigma = M M^T, M = R S
        const Vec3& scale = cloud.scale[i];
        const Mat3 m = sp.rot * scale.asDiagonal();
        const Mat3 g_m = 2.0 * g_sigma * m;
        for (int c = 0; c < 3; ++c) grad.scale[i][c] = g_m.col(c).dot(sp.rot.col(c));
        const Mat3 g_r = g_m * scale.asDiagonal();

        const Quat& q = cloud.rotation[i];
        const double qn = q.norm();
        const Quat qh = q / qn;
        Quat g_qh;
        for (int c = 0; c < 4; ++c) g_qh[c] = (g_r.array() * detail::rotation_partial(qh, c).array()).sum();
        grad.rotation[i] = (g_qh - qh * qh.dot(g_qh)) / qn;
    }
    return grad;
}

struct SpawnInit {
    double scale_factor = 1.4;
    double opacity = 0.1;
};

struct SpawnResult {
    GaussianCloud fragment;
    std::size_t skipped = 0;  // region pixels without valid depth
};

/// One isotropic Gaussian per region pixel, placed on the pixel ray at the given depth.
inline SpawnResult spawn_from_depth(const ImageRGB& image, const DepthMap& depth, const Camera& cam,
                                    const BinaryMask& region, const SpawnInit& init = {}, int view = 0,
                                    GaussianSource kind = GaussianSource::input_view) {
    require_same_shape(image, depth, "spawn_from_depth");
    require_same_shape(image, region, "spawn_from_depth");
    SpawnResult out;
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x) {
            if (!region(x, y)) continue;
            const double z = depth(x, y);
            if (!valid_depth(z)) {
                ++out.skipped;
                continue;
            }
            const Vec3 p = unproject_pixel(cam, x + 0.5, y + 0.5, z);
            const double s = init.scale_factor * z / cam.fx;
            Rgb c = image(x, y);
            for (double& v : c) v = std::clamp(v, 0.0, 1.0);
            out.fragment.push_back(p, init.opacity, Vec3::Constant(s), identity_quat(), c,
                                   SourceTag{kind, view, static_cast<std::int32_t>(image.index(x, y))});
        }
    return out;
}

}  // namespace ri3d
