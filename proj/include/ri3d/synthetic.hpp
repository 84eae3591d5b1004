#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ri3d/dataset.hpp"
#include "ri3d/renderer.hpp"

namespace ri3d {

/// Ground-truth Gaussian scene: foreground blobs in front of a flat backdrop wall,
/// photographed by forward-facing cameras on one arc of a circle. Views from the rest of
/// the circle see parts of the wall no input saw.
struct SyntheticScene {
    GaussianCloud truth;
    SceneDataset dataset;
    std::vector<Camera> held_out;  // evaluation cameras not in the dataset
};

struct SyntheticConfig {
    int views = 3;
    int width = 64, height = 64;
    double focal = 56;
    double rig_radius = 3.5;    // camera circle radius
    double rig_distance = 5;    // camera plane to scene centre
    double wall_distance = 6;   // scene centre to backdrop
    double arc_degrees = 60;    // input cameras span this arc of the rig circle
    int foreground = 4;
    int wall_columns = 4, wall_rows = 4;
    std::uint64_t seed = 0;
    std::vector<double> held_out_degrees{30, 180};  // rig angles relative to view 0
};

namespace detail {

inline Camera rig_camera(const SyntheticConfig& c, double degrees) {
    const double t = (90 + degrees) * M_PI / 180;
    const Vec3 eye(c.rig_radius * std::cos(t), c.rig_radius * std::sin(t), -c.rig_distance);
    return look_at(eye, Vec3::Zero(), Vec3(0, 1, 0), c.focal, c.focal, c.width, c.height);
}

/// Median surface depth along each pixel ray: Gaussians are hit at the depth of their
/// density peak on the ray, and the surface is the hit where accumulated opacity first
/// reaches one half. Invalid where it never does. Unlike splatted depth this has hard
/// edges between objects and places large Gaussians seen at an angle correctly.
inline DepthMap surface_depth(const GaussianCloud& g, const Camera& cam) {
    struct Prep {
        Mat3 inv;
        Vec3 mu;
        double opacity;
    };
    std::vector<Prep> prep;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const Mat3 r = quat_to_matrix(g.rotation[i]);
        const Vec3 s = g.scale[i].cwiseInverse().cwiseAbs2();
        prep.push_back({r * s.asDiagonal() * r.transpose(), g.position[i], g.opacity(i)});
    }
    const Vec3 o = cam.center();
    DepthMap out(cam.width, cam.height);
    std::vector<std::pair<double, double>> hits;  // (depth, alpha)
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const Vec3 d = cam.rotation.transpose() * Vec3((x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0);
            hits.clear();
            for (const auto& p : prep) {
                const Vec3 m = p.inv * (p.mu - o);
                const double dd = d.dot(p.inv * d), dm = d.dot(m);
                const double t = dm / dd;
                if (!(t > 0)) continue;
                const double maha = (p.mu - o).dot(m) - dm * t;
                const double a = std::min(0.999, p.opacity * std::exp(-0.5 * std::max(0.0, maha)));
                if (a >= 1.0 / 255.0) hits.emplace_back(t, a);
            }
            std::sort(hits.begin(), hits.end());
            double trans = 1;
            out(x, y) = kInvalidDepth;
            for (const auto& [t, a] : hits) {
                trans *= 1 - a;
                if (trans <= 0.5) {
                    out(x, y) = t;
                    break;
                }
            }
        }
    return out;
}

inline Quat random_quat(std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    Quat q(n(rng), n(rng), n(rng), n(rng));
    return q / q.norm();
}

}  // namespace detail

/// Builds the scene and renders the dataset from it: splatted images, surface depth,
/// full confidence where depth is valid, and an affine transform of the true depth
/// as monocular depth.
inline SyntheticScene make_synthetic_scene(const SyntheticConfig& c = {}) {
    std::mt19937_64 rng(c.seed);
    std::uniform_real_distribution<double> u(0, 1);
    SyntheticScene s;
    for (int i = 0; i < c.foreground; ++i) {
        const Vec3 p(2.0 * u(rng) - 1.0, 1.6 * u(rng) - 0.8, 1.0 * u(rng) - 0.5);
        const Vec3 sc(0.3 + 0.4 * u(rng), 0.3 + 0.4 * u(rng), 0.3 + 0.4 * u(rng));
        const Rgb col{0.2 + 0.8 * u(rng), 0.2 + 0.8 * u(rng), 0.2 + 0.8 * u(rng)};
        s.truth.push_back(p, 0.8 + 0.15 * u(rng), sc, detail::random_quat(rng), col);
    }
    const double sx = 8, sy = 8;
    for (int r = 0; r < c.wall_rows; ++r)
        for (int k = 0; k < c.wall_columns; ++k) {
            const double x = (k - (c.wall_columns - 1) / 2.0) * sx, y = (r - (c.wall_rows - 1) / 2.0) * sy;
            const Rgb col{0.5 + 0.3 * std::sin(0.2 * x + 0.13 * y), 0.5 + 0.3 * std::cos(0.17 * x - 0.1 * y),
                          0.5 + 0.25 * std::sin(0.13 * y + 1.0)};
            s.truth.push_back(Vec3(x, y, c.wall_distance), 0.97, Vec3(4.4, 4.4, 0.05), identity_quat(), col);
        }
    const RenderSettings rs;
    for (int v = 0; v < c.views; ++v) {
        ViewData view;
        view.camera = detail::rig_camera(c, c.views > 1 ? c.arc_degrees * v / (c.views - 1) : 0.0);
        const RenderOutput r = render(s.truth, view.camera, Rgb{0, 0, 0}, rs);
        view.image = r.color;
        view.depth_mvs = detail::surface_depth(s.truth, view.camera);
        view.confidence = ConfidenceMap(c.width, c.height);
        view.depth_mono = DepthMap(c.width, c.height);
        for (std::size_t i = 0; i < view.depth_mvs.size(); ++i) {
            const double z = view.depth_mvs[i];
            const bool ok = valid_depth(z);
            view.confidence[i] = ok ? 1.0 : 0.0;
            view.depth_mono[i] = ok ? 0.5 * z + 0.3 : kInvalidDepth;
        }
        s.dataset.views.push_back(std::move(view));
    }
    for (double deg : c.held_out_degrees) s.held_out.push_back(detail::rig_camera(c, deg));
    return s;
}

}  // namespace ri3d
