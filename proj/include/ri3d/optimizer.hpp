#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ri3d/camera_path.hpp"
#include "ri3d/dataset.hpp"
#include "ri3d/depth_fusion.hpp"
#include "ri3d/harmonic.hpp"
#include "ri3d/losses.hpp"
#include "ri3d/oracle.hpp"
#include "ri3d/renderer.hpp"

namespace ri3d {

// ------------------------------------------------------------------ schedule

struct Schedule {
    int stage1_iters = 4000;
    int stage1_refresh = 400;
    int stage1_views = 8;
    int stage2_iters = 4000;
    int stage2_cycle = 200;
    int stage2_views = 10;
    int inpaint_stride = 2;
    int inpaint_stop_iter = 2800;
    int loo_pretrain_iters = 6000;
    int loo_total_iters = 10000;
    std::vector<int> snapshot_iters{6000, 8000, 10000};

    int inpaint_count() const { return (stage2_views + inpaint_stride - 1) / inpaint_stride; }
};

inline void validate(const Schedule& s) {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::invalid_argument, "schedule: " + m); };
    if (s.stage1_iters < 0 || s.stage2_iters < 0) fail("iteration counts must be >= 0");
    if (s.stage1_refresh < 1 || s.stage2_cycle < 1) fail("refresh and cycle lengths must be >= 1");
    if (s.stage1_iters % s.stage1_refresh) fail("stage1_refresh must divide stage1_iters");
    if (s.stage2_iters % s.stage2_cycle) fail("stage2_cycle must divide stage2_iters");
    if (s.stage1_views < 1 || s.stage2_views < 1) fail("view counts must be >= 1");
    if (s.inpaint_stride < 1) fail("inpaint_stride must be >= 1");
    if (s.inpaint_count() > s.stage2_views) fail("K exceeds stage2_views");
    if (s.loo_pretrain_iters < 0 || s.loo_total_iters < s.loo_pretrain_iters)
        fail("need 0 <= loo_pretrain_iters <= loo_total_iters");
    for (int t : s.snapshot_iters)
        if (t < 0 || t > s.loo_total_iters) fail("snapshot iteration outside [0, loo_total_iters]");
}

// ------------------------------------------------------------------ adam

/// Per-Gaussian parameter layout seen by the optimizer:
/// position(3) opacity-logit(1) log-scale(3) quaternion(4) colour(3).
inline constexpr int kParamsPerGaussian = 14;
using ParamBlock = std::array<double, kParamsPerGaussian>;

struct StepSizes {
    double position_init = 1.6e-4;
    double position_final = 1.6e-6;
    double position_extent = 1.0;  // scene extent multiplying the position rate
    double opacity = 0.05;
    double scale = 0.005;
    double rotation = 0.001;
    double color = 0.0025;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-15;
};

struct AdamMoments {
    std::vector<ParamBlock> m, v;
    std::vector<std::int64_t> steps;

    void resize(std::size_t n) {
        m.resize(n, ParamBlock{});
        v.resize(n, ParamBlock{});
        steps.resize(n, 0);
    }
    friend bool operator==(const AdamMoments&, const AdamMoments&) = default;
};

/// Position rate decayed log-linearly from init to final over a stage of `total` steps.
inline double position_rate(const StepSizes& s, int iteration, int total) {
    const double t = total > 0 ? std::clamp(static_cast<double>(iteration) / total, 0.0, 1.0) : 0.0;
    return s.position_extent * std::exp(std::log(s.position_init) * (1 - t) + std::log(s.position_final) * t);
}

struct StepReport {
    std::size_t updated = 0;
    std::size_t skipped_nonfinite = 0;
};

inline constexpr double kMaxOpacityLogit = 30.0;

/// One Adam update. Gaussians whose gradient is exactly zero (not seen this step) only
/// have their moments decayed; Gaussians with a non-finite gradient are left untouched.
inline StepReport adam_step(GaussianCloud& cloud, AdamMoments& mom, const GradientBuffer& g, const StepSizes& s,
                            double position_lr) {
    if (g.size() != cloud.size()) throw Error(ErrorCode::invalid_argument, "adam_step: gradient size mismatch");
    mom.resize(cloud.size());
    const ParamBlock lr{position_lr, position_lr, position_lr, s.opacity,  s.scale,    s.scale,    s.scale,
                        s.rotation,  s.rotation,  s.rotation,  s.rotation, s.color,    s.color,    s.color};
    StepReport rep;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        ParamBlock gr;
        for (int k = 0; k < 3; ++k) gr[k] = g.position[i][k];
        gr[3] = g.opacity_logit[i];
        for (int k = 0; k < 3; ++k) gr[4 + k] = g.scale[i][k] * cloud.scale[i][k];
        for (int k = 0; k < 4; ++k) gr[7 + k] = g.rotation[i][k];
        for (int k = 0; k < 3; ++k) gr[11 + k] = g.color[i][k];

        bool finite = true, zero = true;
        for (double v : gr) {
            finite = finite && std::isfinite(v);
            zero = zero && v == 0.0;
        }
        if (!finite) {
            ++rep.skipped_nonfinite;
            continue;
        }
        auto& m = mom.m[i];
        auto& v = mom.v[i];
        if (zero) {
            for (int k = 0; k < kParamsPerGaussian; ++k) {
                m[k] *= s.beta1;
                v[k] *= s.beta2;
            }
            continue;
        }
        const auto t = ++mom.steps[i];
        const double c1 = 1 - std::pow(s.beta1, static_cast<double>(t));
        const double c2 = 1 - std::pow(s.beta2, static_cast<double>(t));
        ParamBlock d;
        for (int k = 0; k < kParamsPerGaussian; ++k) {
            m[k] = s.beta1 * m[k] + (1 - s.beta1) * gr[k];
            v[k] = s.beta2 * v[k] + (1 - s.beta2) * gr[k] * gr[k];
            d[k] = lr[k] * (m[k] / c1) / (std::sqrt(v[k] / c2) + s.epsilon);
        }
        for (int k = 0; k < 3; ++k) cloud.position[i][k] -= d[k];
        cloud.opacity_logit[i] = std::clamp(cloud.opacity_logit[i] - d[3], -kMaxOpacityLogit, kMaxOpacityLogit);
        for (int k = 0; k < 3; ++k) cloud.scale[i][k] *= std::exp(-d[4 + k]);
        Quat& q = cloud.rotation[i];
        for (int k = 0; k < 4; ++k) q[k] -= d[7 + k];
        const double qn = q.norm();
        q = qn > 0 ? Quat(q / qn) : identity_quat();
        for (int k = 0; k < 3; ++k) cloud.color[i][k] = std::clamp(cloud.color[i][k] - d[11 + k], 0.0, 1.0);
        ++rep.updated;
    }
    return rep;
}

// ------------------------------------------------------------------ state

struct NovelView {
    Camera camera;
    double weight = 1;     // camera distance weight
    ImageRGB target;       // pseudo ground truth (repaired render)
    BinaryMask visible;    // thresholded opacity, closed
    BinaryMask background;
    DepthMap mono;         // oracle depth of the target; empty without a depth oracle
    ImageRGB inpainted;    // inpainted render; empty unless inpainted in the current cycle
    BinaryMask hole;       // (1 - visible) & background at the last inpaint cycle
};

struct NovelCameraSet {
    CameraPath path;
    std::vector<NovelView> views;
};

struct LossRecord {
    int stage = 0;
    int iteration = 0;
    double total = 0;
    std::map<std::string, double> terms;
};

struct CycleRecord {
    int iteration = 0;
    std::size_t hole_pixels = 0;  // summed over the stage-2 view set before inpainting
    std::size_t spawned = 0;
    std::vector<int> inpainted;
};

struct OptimState {
    GaussianCloud cloud;
    AdamMoments moments;
    int stage = 0;  // 0 = initialised; 1 or 2 = inside or after that stage
    int iteration = 0;
    bool stage_done = false;
    std::uint64_t seed = 0;
    std::mt19937_64 rng;
    std::vector<LossRecord> history;
    NovelCameraSet novel;
    std::vector<CycleRecord> cycles;
};

inline OptimState make_state(GaussianCloud cloud, std::uint64_t seed) {
    OptimState s;
    s.cloud = std::move(cloud);
    s.moments.resize(s.cloud.size());
    s.seed = seed;
    s.rng.seed(seed);
    return s;
}

/// Applies one adaptive update to the state's cloud.
inline StepReport step_params(OptimState& state, const GradientBuffer& g, const StepSizes& s, double position_lr) {
    return adam_step(state.cloud, state.moments, g, s, position_lr);
}

// ------------------------------------------------------------------ options

struct RunOptions {
    StepSizes steps;
    Rgb background{0, 0, 0};
    RenderSettings render;
    double visibility_threshold = 0.5;
    int closing_radius = 3;
    double background_tau = 0.1;
    FusionConfig fusion;   // lambda / tolerance of the stage-2 depth blend
    int anchor_band = 4;   // px around a hole whose rendered depth anchors the blend
    SpawnInit spawn;
    int stop_at = -1;      // pause once the stage reaches this iteration (checkpointing)
    std::function<void(const OptimState&)> on_iteration;  // after every step
    std::function<void(const OptimState&)> on_abort;      // before a NaN abort
    std::function<void(const std::string&)> on_warning;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t z = base;
    for (std::uint64_t v : {a, b, c}) {
        z += 0x9e3779b97f4a7c15ULL + v;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z ^= z >> 31;
    }
    return z;
}

inline void warn(const RunOptions& o, const std::string& msg) {
    if (o.on_warning) o.on_warning(msg);
}

/// Rendered depth with invalid pixels harmonically filled; a constant map when nothing
/// is valid.
inline DepthMap filled_depth(const DepthMap& d) {
    BinaryMask unknown(d.width(), d.height());
    std::size_t valid = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        unknown[i] = valid_depth(d[i]) ? 0 : 1;
        valid += !unknown[i];
    }
    if (valid == 0) return DepthMap(d.width(), d.height(), 1.0);
    DepthMap out = harmonic_fill(d, unknown);
    for (double& v : out.values()) v = std::max(v, 1e-6);
    return out;
}

inline BinaryMask background_of(const DepthMap& depth, double tau) {
    const DepthMap f = filled_depth(depth);
    return background_mask(f, tau);
}

inline std::vector<Camera> novel_cameras_of(const NovelCameraSet& s) {
    std::vector<Camera> out;
    for (const auto& v : s.views) out.push_back(v.camera);
    return out;
}

inline void add_terms(LossRecord& rec, const LossReport& r, double scale, const std::string& prefix) {
    rec.total += scale * r.total;
    for (const auto& [k, v] : r.terms) rec.terms[prefix + k] += scale * v;
}

inline void check_finite(OptimState& state, const LossRecord& rec, const RunOptions& o) {
    if (std::isfinite(rec.total)) return;
    if (o.on_abort) o.on_abort(state);
    throw Error(ErrorCode::numerical, "non-finite loss at stage " + std::to_string(rec.stage) + " iteration " +
                                          std::to_string(rec.iteration));
}

}  // namespace detail

// ------------------------------------------------------------------ initialisation

/// Per-view fused depth (alignment, Poisson blend, bilateral filter).
inline std::vector<FusedDepth> fuse_all(const SceneDataset& ds, const FusionConfig& cfg) {
    std::vector<FusedDepth> out;
    for (const auto& v : ds.views) out.push_back(fuse_view(v, cfg));
    return out;
}

/// One Gaussian per pixel of each listed view (all views when `views` is empty).
inline GaussianCloud initialize_cloud(const SceneDataset& ds, const std::vector<DepthMap>& depth,
                                      std::vector<int> views = {}, const SpawnInit& init = {}) {
    if (depth.size() != ds.size()) throw Error(ErrorCode::invalid_argument, "initialize_cloud: one depth map per view");
    if (views.empty())
        for (std::size_t i = 0; i < ds.size(); ++i) views.push_back(static_cast<int>(i));
    GaussianCloud cloud;
    for (int i : views) {
        const auto& v = ds.views[static_cast<std::size_t>(i)];
        cloud.append(spawn_from_depth(v.image, depth[i], v.camera, full_mask(v.image.width(), v.image.height()), init,
                                      i).fragment);
    }
    return cloud;
}

/// Unprojected confident, non-background fused-depth pixels; falls back to all confident
/// pixels, then to all valid ones.
inline std::vector<Vec3> foreground_points(const SceneDataset& ds, const std::vector<DepthMap>& depth,
                                           const std::vector<BinaryMask>& background, const FusionConfig& cfg) {
    if (depth.size() != ds.size() || background.size() != ds.size())
        throw Error(ErrorCode::invalid_argument, "foreground_points: one depth map and mask per view");
    std::vector<Vec3> pts;
    for (int pass = 0; pass < 3 && pts.empty(); ++pass)
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto& v = ds.views[i];
            const BinaryMask conf = confidence_mask(v.confidence, v.depth_mvs, cfg.confidence_threshold);
            for (int y = 0; y < v.image.height(); ++y)
                for (int x = 0; x < v.image.width(); ++x) {
                    const double z = depth[i](x, y);
                    if (!valid_depth(z)) continue;
                    if (pass < 2 && !conf(x, y)) continue;
                    if (pass == 0 && background[i](x, y)) continue;
                    pts.push_back(unproject_pixel(v.camera, x + 0.5, y + 0.5, z));
                }
        }
    return pts;
}

/// Background mask of a fused view, clustered on the Poisson depth: the bilateral step
/// blurs depth across object edges wherever the image does not separate them, which
/// bridges the disparity gap.
inline BinaryMask fused_background(const FusedDepth& f, const FusionConfig& cfg) {
    return background_mask(f.blended, cfg.background_tau);
}

inline std::vector<Vec3> foreground_points(const SceneDataset& ds, const std::vector<FusedDepth>& fused,
                                           const FusionConfig& cfg) {
    std::vector<DepthMap> depth;
    std::vector<BinaryMask> bg;
    for (const auto& f : fused) {
        depth.push_back(f.depth);
        bg.push_back(fused_background(f, cfg));
    }
    return foreground_points(ds, depth, bg, cfg);
}

/// 3DGS-style scene extent: 1.1 x the largest camera distance from the mean centre.
inline double scene_extent(const std::vector<Camera>& cams) {
    Vec3 mean = Vec3::Zero();
    for (const auto& c : cams) mean += c.center();
    mean /= std::max<std::size_t>(1, cams.size());
    double r = 0;
    for (const auto& c : cams) r = std::max(r, (c.center() - mean).norm());
    return r > 0 ? 1.1 * r : 1.0;
}

// ------------------------------------------------------------------ novel cameras

inline NovelCameraSet fit_novel_cameras(const std::vector<Camera>& inputs, const std::vector<Vec3>& foreground, int m) {
    if (inputs.size() < 2) throw Error(ErrorCode::path_fit, "camera path fit needs at least 2 input cameras");
    if (foreground.empty()) throw Error(ErrorCode::invalid_argument, "fit_novel_cameras: empty foreground point set");
    NovelCameraSet set;
    set.path = fit_camera_path(inputs);
    Vec3 target = Vec3::Zero();
    for (const auto& p : foreground) target += p;
    target /= static_cast<double>(foreground.size());
    const double tau = median_pairwise_distance(inputs);
    for (const auto& cam : sample_path(set.path, m, target, inputs.front())) {
        NovelView v;
        v.camera = cam;
        v.weight = camera_distance_weight(cam, inputs, tau);
        set.views.push_back(std::move(v));
    }
    return set;
}

/// Re-renders a novel view, repairs it into the pseudo ground truth and recomputes its
/// visibility and background masks.
inline void refresh_view(NovelView& v, const GaussianCloud& cloud, OracleClient& oracle, std::uint64_t seed,
                         const RunOptions& o) {
    const RenderOutput r = render(cloud, v.camera, o.background, o.render);
    v.target = oracle.repair(r.color, seed);
    v.visible = visibility_mask(r.alpha, o.visibility_threshold, o.closing_radius);
    auto mono = oracle.mono_depth(v.target, seed);
    v.mono = mono ? std::move(*mono) : DepthMap{};
    v.background = detail::background_of(v.mono.empty() ? r.depth : v.mono, o.background_tau);
}


// ------------------------------------------------------------------ per-step losses

namespace detail {

inline void backprop(const GaussianCloud& cloud, const Camera& cam, const LossReport& rep, LossRecord& rec,
                     GradientBuffer& grad, const RunOptions& o) {
    add_terms(rec, rep, 1.0, "");
    grad += render_backward(cloud, cam, o.background, rep.grad, o.render);
}

inline void input_view_loss(const GaussianCloud& cloud, const ViewData& view, const LossWeights& w,
                            const RunOptions& o, LossRecord& rec, GradientBuffer& grad) {
    const RenderOutput r = render(cloud, view.camera, o.background, o.render);
    LossReport step;
    accumulate(step, reconstruction_loss(r, view.image, {}, view.depth_mono.empty() ? nullptr : &view.depth_mono, w),
               1.0, "input_");
    backprop(cloud, view.camera, step, rec, grad, o);
}

enum class NovelTerms { stage1, stage2 };

/// Stage 1: lambda_j * masked L_rec + opacity suppression.
/// Stage 2: lambda_j * L_rec over the full image + inpaint consistency on the hole.
inline void novel_view_loss(const GaussianCloud& cloud, const NovelView& nv, NovelTerms terms, const LossWeights& w,
                            const RunOptions& o, LossRecord& rec, GradientBuffer& grad) {
    const RenderOutput r = render(cloud, nv.camera, o.background, o.render);
    LossReport step;
    const DepthMap* mono = nv.mono.empty() ? nullptr : &nv.mono;
    if (terms == NovelTerms::stage1) {
        if (count(nv.visible) > 0)
            accumulate(step, reconstruction_loss(r, nv.target, nv.visible, mono, w), nv.weight, "novel_");
        if (w.opacity > 0) {
            const ScalarLoss op = opacity_suppression(r.alpha, nv.visible, nv.background);
            step.total += w.opacity * op.value;
            step.terms["opacity"] += w.opacity * op.value;
            add_scaled(step.grad.alpha, op.grad, w.opacity);
        }
    } else {
        accumulate(step, reconstruction_loss(r, nv.target, {}, mono, w), nv.weight, "novel_");
        if (w.inpaint > 0 && !nv.inpainted.empty() && count(nv.hole) > 0) {
            const ImageLoss l1 = loss_l1(r.color, nv.inpainted, nv.hole);
            const ImageLoss pp = loss_perceptual_proxy(r.color, nv.inpainted, nv.hole);
            step.total += w.inpaint * (l1.value + pp.value);
            step.terms["inpaint_l1"] += w.inpaint * l1.value;
            step.terms["inpaint_perceptual"] += w.inpaint * pp.value;
            add_scaled(step.grad.color, l1.grad, w.inpaint);
            add_scaled(step.grad.color, pp.grad, w.inpaint);
        }
    }
    backprop(cloud, nv.camera, step, rec, grad, o);
}

inline void finish_step(OptimState& state, LossRecord rec, const GradientBuffer& grad, double position_lr,
                        const RunOptions& o) {
    check_finite(state, rec, o);
    const StepReport sr = step_params(state, grad, o.steps, position_lr);
    if (sr.skipped_nonfinite)
        warn(o, "iteration " + std::to_string(rec.iteration) + ": skipped " + std::to_string(sr.skipped_nonfinite) +
                    " Gaussians with non-finite gradients");
    state.history.push_back(std::move(rec));
    state.iteration = state.history.back().iteration + 1;
    if (o.on_iteration) o.on_iteration(state);
}

}  // namespace detail

// ------------------------------------------------------------------ stage 1

/// Stage 1: each step uses one sampled input view and one novel view (round robin);
/// all novel views are re-rendered and repaired every `stage1_refresh` steps.
inline OptimState run_stage1(OptimState state, const SceneDataset& ds, const NovelCameraSet& novel,
                             OracleClient& oracle, const Schedule& sched, const LossWeights& w,
                             const RunOptions& o = {}) {
    validate(sched);
    validate(w);
    if (sched.stage1_iters == 0 || (state.stage == 1 && state.stage_done)) return state;
    if (state.stage > 1) throw Error(ErrorCode::pipeline_order, "stage 1 cannot resume a stage-2 state");
    if (ds.size() == 0) throw Error(ErrorCode::invalid_argument, "stage 1 needs input views");
    if (state.stage == 0) {
        if (novel.views.empty()) throw Error(ErrorCode::invalid_argument, "stage 1 needs novel views");
        state.stage = 1;
        state.iteration = 0;
        state.stage_done = false;
        state.novel = novel;
    }
    const int T = sched.stage1_iters;
    const auto m = state.novel.views.size();
    std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
    while (state.iteration < T) {
        const int it = state.iteration;
        if (o.stop_at >= 0 && it >= o.stop_at) return state;
        if (it % sched.stage1_refresh == 0)
            for (std::size_t j = 0; j < m; ++j)
                refresh_view(state.novel.views[j], state.cloud, oracle, detail::mix_seed(state.seed, 1, it, j), o);
        LossRecord rec{1, it, 0, {}};
        GradientBuffer grad(state.cloud.size());
        detail::input_view_loss(state.cloud, ds.views[pick(state.rng)], w, o, rec, grad);
        detail::novel_view_loss(state.cloud, state.novel.views[static_cast<std::size_t>(it) % m],
                                detail::NovelTerms::stage1, w, o, rec, grad);
        detail::finish_step(state, std::move(rec), grad, position_rate(o.steps, it, T), o);
    }
    state.stage_done = true;
    return state;
}

// ------------------------------------------------------------------ stage 2

/// Views inpainted in a cycle: every `stride`-th view, alternating the offset per cycle.
inline std::vector<int> inpaint_subset(int views, int stride, int cycle) {
    std::vector<int> out;
    for (int v = 0; v < views; ++v)
        if (v % stride == cycle % stride) out.push_back(v);
    return out;
}

/// Depth for an inpainted hole: the rendered depth around the hole is harmonically
/// extended across it (or, with an oracle depth map, that map is aligned to the rendered
/// depth) and the result is blended with the rendered depth anchored on a band around
/// the hole. Pixels without any usable depth come back invalid.
inline DepthMap inpaint_depth(const DepthMap& rendered, const BinaryMask& hole, const DepthMap* mono,
                              const RunOptions& o) {
    require_same_shape(rendered, hole, "inpaint_depth");
    BinaryMask covered(rendered.width(), rendered.height());
    for (std::size_t i = 0; i < covered.size(); ++i) covered[i] = (!hole[i] && valid_depth(rendered[i])) ? 1 : 0;
    if (count(covered) == 0) return DepthMap(rendered.width(), rendered.height(), kInvalidDepth);
    BinaryMask anchor = mask_and(covered, dilate(hole, o.anchor_band));
    if (count(anchor) == 0) anchor = covered;
    DepthMap guide = harmonic_fill(rendered, mask_not(covered));
    if (mono) {
        try {
            const DepthMap aligned = apply_alignment(fit_alignment(*mono, rendered, anchor, o.fusion.knot_count), *mono);
            for (std::size_t i = 0; i < guide.size(); ++i)
                if (valid_depth(aligned[i])) guide[i] = aligned[i];
        } catch (const Error& e) {
            if (e.code() != ErrorCode::alignment_failed) throw;
        }
    }
    DepthMap out =
        poisson_blend(rendered, guide, anchor, o.fusion.lambda, o.fusion.tolerance, o.fusion.max_iterations).depth;
    for (double& v : out.values()) v = std::max(v, 1e-6);
    return out;
}

/// One stage-2 cycle: measures the holes of every view, inpaints the selected subset in
/// sequence (each inpainted hole is lifted to 3-D and spawned before the next view is
/// rendered), then re-renders and repairs every view.
inline CycleRecord inpaint_cycle(OptimState& state, OracleClient& oracle, const Schedule& sched, int cycle_index,
                                 bool inpaint, const RunOptions& o = {}) {
    CycleRecord rec;
    rec.iteration = state.iteration;
    auto& views = state.novel.views;
    auto hole_of = [&](const RenderOutput& r) {
        return mask_and(mask_not(visibility_mask(r.alpha, o.visibility_threshold, o.closing_radius)),
                        detail::background_of(r.depth, o.background_tau));
    };
    for (auto& nv : views) {
        rec.hole_pixels += count(hole_of(render(state.cloud, nv.camera, o.background, o.render)));
        nv.inpainted = ImageRGB{};
        nv.hole = BinaryMask{};
    }
    if (inpaint)
        for (int k : inpaint_subset(static_cast<int>(views.size()), sched.inpaint_stride, cycle_index)) {
            NovelView& nv = views[static_cast<std::size_t>(k)];
            const RenderOutput r = render(state.cloud, nv.camera, o.background, o.render);
            nv.hole = hole_of(r);
            if (count(nv.hole) == 0) continue;
            const auto seed = detail::mix_seed(state.seed, 2, rec.iteration, static_cast<std::uint64_t>(k));
            nv.inpainted = oracle.inpaint(r.color, nv.hole, seed);
            const auto mono = oracle.mono_depth(nv.inpainted, seed);
            const DepthMap depth = inpaint_depth(r.depth, nv.hole, mono ? &*mono : nullptr, o);
            auto spawned = spawn_from_depth(nv.inpainted, depth, nv.camera, nv.hole, o.spawn, k,
                                            GaussianSource::inpaint_spawned);
            if (spawned.skipped)
                detail::warn(o, "view " + std::to_string(k) + ": " + std::to_string(spawned.skipped) +
                                    " hole pixels without depth were not spawned");
            rec.spawned += spawned.fragment.size();
            rec.inpainted.push_back(k);
            state.cloud.append(spawned.fragment);
            state.moments.resize(state.cloud.size());
        }
    for (std::size_t j = 0; j < views.size(); ++j)
        refresh_view(views[j], state.cloud, oracle, detail::mix_seed(state.seed, 3, rec.iteration, j), o);
    return rec;
}

/// Stage 2: the stage-1 loss without the visibility mask plus the inpaint consistency
/// term, with an inpaint cycle every `stage2_cycle` steps (repair only from
/// `inpaint_stop_iter` on). `novel` is the stage-2 view set.
inline OptimState run_stage2(OptimState state, const SceneDataset& ds, const NovelCameraSet& novel,
                             OracleClient& oracle, const Schedule& sched, const LossWeights& w,
                             const RunOptions& o = {}) {
    validate(sched);
    validate(w);
    if (state.stage == 2 && state.stage_done) return state;
    if (state.stage < 1 || (state.stage == 1 && !state.stage_done))
        throw Error(ErrorCode::pipeline_order, "stage 1 checkpoint required");
    if (ds.size() == 0) throw Error(ErrorCode::invalid_argument, "stage 2 needs input views");
    if (state.stage == 1) {
        if (novel.views.empty()) throw Error(ErrorCode::invalid_argument, "stage 2 needs novel views");
        state.stage = 2;
        state.iteration = 0;
        state.stage_done = false;
        state.novel = novel;
        state.cycles.clear();
    }
    const int T = sched.stage2_iters;
    const auto m = state.novel.views.size();
    std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
    while (state.iteration < T) {
        const int it = state.iteration;
        if (o.stop_at >= 0 && it >= o.stop_at) return state;
        if (it % sched.stage2_cycle == 0)
            state.cycles.push_back(
                inpaint_cycle(state, oracle, sched, it / sched.stage2_cycle, it < sched.inpaint_stop_iter, o));
        LossRecord rec{2, it, 0, {}};
        GradientBuffer grad(state.cloud.size());
        detail::input_view_loss(state.cloud, ds.views[pick(state.rng)], w, o, rec, grad);
        detail::novel_view_loss(state.cloud, state.novel.views[static_cast<std::size_t>(it) % m],
                                detail::NovelTerms::stage2, w, o, rec, grad);
        detail::finish_step(state, std::move(rec), grad, position_rate(o.steps, it, T), o);
    }
    state.stage_done = true;
    return state;
}

// ------------------------------------------------------------------ leave-one-out

struct LooPair {
    int view = 0;
    int iteration = 0;
    ImageRGB corrupt;  // render of the held-out view
    ImageRGB clean;    // the held-out input image
};

/// Which input view entered the loss at each step of each held-out run.
struct LooAuditEntry {
    int held_out = 0;
    int iteration = 0;
    int view = 0;
};

struct LooResult {
    std::vector<LooPair> pairs;
    std::vector<LooAuditEntry> audit;
};

/// For each held-out view: optimise a cloud initialised from the other views on those
/// views only, reintroduce the held-out view at `loo_pretrain_iters`, continue to
/// `loo_total_iters`, and render the held-out view at every snapshot iteration.
inline LooResult generate_loo_pairs(const SceneDataset& ds, const std::vector<DepthMap>& depth, const Schedule& sched,
                                    const LossWeights& w, std::uint64_t seed, const RunOptions& o = {}) {
    validate(sched);
    validate(w);
    if (ds.size() < 3) throw Error(ErrorCode::invalid_argument, "leave-one-out pairs need at least 3 views");
    std::vector<int> snaps = sched.snapshot_iters;
    std::sort(snaps.begin(), snaps.end());
    snaps.erase(std::unique(snaps.begin(), snaps.end()), snaps.end());
    const int n = static_cast<int>(ds.size()), T = sched.loo_total_iters;
    LooResult out;
    for (int held = 0; held < n; ++held) {
        std::vector<int> others, all;
        for (int v = 0; v < n; ++v) {
            all.push_back(v);
            if (v != held) others.push_back(v);
        }
        OptimState st = make_state(initialize_cloud(ds, depth, others, o.spawn), detail::mix_seed(seed, 4, held, 0));
        const auto& target = ds.views[static_cast<std::size_t>(held)];
        auto snap = snaps.begin();
        for (int it = 0;; ++it) {
            for (; snap != snaps.end() && *snap == it; ++snap)
                out.pairs.push_back(
                    {held, it, render(st.cloud, target.camera, o.background, o.render).color, target.image});
            if (it >= T) break;
            const auto& active = it < sched.loo_pretrain_iters ? others : all;
            std::uniform_int_distribution<std::size_t> pick(0, active.size() - 1);
            const int v = active[pick(st.rng)];
            out.audit.push_back({held, it, v});
            LossRecord rec{0, it, 0, {}};
            GradientBuffer grad(st.cloud.size());
            detail::input_view_loss(st.cloud, ds.views[static_cast<std::size_t>(v)], w, o, rec, grad);
            detail::check_finite(st, rec, o);
            step_params(st, grad, o.steps, position_rate(o.steps, it, T));
        }
    }
    return out;
}

}  // namespace ri3d
