#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/SparseCholesky>

#include "ri3d/cg.hpp"
#include "ri3d/dataset.hpp"
#include "ri3d/error.hpp"
#include "ri3d/image.hpp"

namespace ri3d {

struct BilateralSigmas {
    double spatial = 3.0;  // pixels
    double range = 0.1;    // guide intensity units
};

struct FusionConfig {
    double lambda = 10.0;
    double confidence_threshold = 0.5;
    int knot_count = 8;
    BilateralSigmas bilateral;
    double tolerance = 1e-8;
    int max_iterations = 20000;
    double background_tau = 0.1;
};

// ------------------------------------------------------------------ alignment

/// Monotone piecewise-linear map with linear extrapolation past the outer knots.
class AlignmentFunction {
public:
    AlignmentFunction() = default;
    AlignmentFunction(std::vector<double> xs, std::vector<double> ys) : xs_(std::move(xs)), ys_(std::move(ys)) {
        if (xs_.size() < 2 || xs_.size() != ys_.size())
            throw Error(ErrorCode::invalid_argument, "alignment needs at least two knots");
        for (std::size_t k = 1; k < xs_.size(); ++k)
            if (!(xs_[k] > xs_[k - 1])) throw Error(ErrorCode::invalid_argument, "knot x-values must increase");
    }

    static AlignmentFunction identity() { return AlignmentFunction({0.0, 1.0}, {0.0, 1.0}); }

    const std::vector<double>& knots_x() const { return xs_; }
    const std::vector<double>& knots_y() const { return ys_; }

    double operator()(double x) const {
        const auto it = std::upper_bound(xs_.begin(), xs_.end(), x);
        std::size_t s = static_cast<std::size_t>(std::distance(xs_.begin(), it));
        s = std::clamp<std::size_t>(s, 1, xs_.size() - 1) - 1;
        const double slope = (ys_[s + 1] - ys_[s]) / (xs_[s + 1] - xs_[s]);
        // Identity segments reproduce their input exactly.
        if (slope == 1.0 && ys_[s] == xs_[s]) return x;
        return ys_[s] + (x - xs_[s]) * slope;
    }

private:
    std::vector<double> xs_, ys_;
};

namespace detail {

/// Pool-adjacent-violators projection onto non-decreasing sequences (unit weights).
inline std::vector<double> isotonic(const std::vector<double>& y) {
    std::vector<double> value;
    std::vector<std::size_t> weight;
    for (double v : y) {
        value.push_back(v);
        weight.push_back(1);
        while (value.size() > 1 && value[value.size() - 2] > value.back()) {
            const std::size_t w = weight.back() + weight[weight.size() - 2];
            const double merged = (value.back() * weight.back() + value[value.size() - 2] * weight[weight.size() - 2]) / w;
            value.pop_back();
            weight.pop_back();
            value.back() = merged;
            weight.back() = w;
        }
    }
    std::vector<double> out;
    for (std::size_t b = 0; b < value.size(); ++b) out.insert(out.end(), weight[b], value[b]);
    return out;
}

}  // namespace detail

/// Least-squares monotone piecewise-linear fit from monocular to MVS depth over the
/// masked pixels that are valid in both maps. Knots sit at equal quantiles of the
/// masked monocular values.
inline AlignmentFunction fit_alignment(const DepthMap& mono, const DepthMap& mvs, const BinaryMask& mask,
                                       int knot_count) {
    require_same_shape(mono, mvs, "fit_alignment");
    require_same_shape(mono, mask, "fit_alignment");
    if (knot_count < 2) throw Error(ErrorCode::invalid_argument, "knot_count must be at least 2");
    std::vector<std::pair<double, double>> samples;
    for (std::size_t i = 0; i < mono.size(); ++i)
        if (mask[i] && valid_depth(mono[i]) && valid_depth(mvs[i])) samples.emplace_back(mono[i], mvs[i]);
    const std::size_t needed = std::max<std::size_t>(static_cast<std::size_t>(knot_count) * 8, 64);
    if (samples.size() < needed)
        throw Error(ErrorCode::alignment_failed, "alignment failed: " + std::to_string(samples.size()) +
                                                     " masked pixels, need " + std::to_string(needed));
    std::sort(samples.begin(), samples.end());
    if (samples.front().first == samples.back().first)
        throw Error(ErrorCode::alignment_failed, "alignment failed: monocular depth is constant on the mask");

    const std::size_t n = samples.size();
    std::vector<double> xs;
    for (int k = 0; k < knot_count; ++k) {
        const double pos = static_cast<double>(k) / (knot_count - 1) * static_cast<double>(n - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, n - 1);
        const double t = pos - static_cast<double>(lo);
        const double q = samples[lo].first + t * (samples[hi].first - samples[lo].first);
        if (xs.empty() || q > xs.back()) xs.push_back(q);
    }
    if (xs.size() < 2) throw Error(ErrorCode::alignment_failed, "alignment failed: degenerate knots");
    xs.back() = samples.back().first;

    const auto k = static_cast<Eigen::Index>(xs.size());
    Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
    for (const auto& [x, y] : samples) {
        auto it = std::upper_bound(xs.begin(), xs.end(), x);
        Eigen::Index s = std::clamp<Eigen::Index>(std::distance(xs.begin(), it), 1, k - 1) - 1;
        const double t = (x - xs[s]) / (xs[s + 1] - xs[s]);
        const double a = 1.0 - t, b = t;
        normal(s, s) += a * a;
        normal(s, s + 1) += a * b;
        normal(s + 1, s) += a * b;
        normal(s + 1, s + 1) += b * b;
        rhs[s] += a * y;
        rhs[s + 1] += b * y;
    }
    const double ridge = 1e-12 * normal.diagonal().maxCoeff();
    normal.diagonal().array() += ridge;
    const Eigen::VectorXd sol = normal.ldlt().solve(rhs);
    std::vector<double> ys(sol.data(), sol.data() + sol.size());
    return AlignmentFunction(std::move(xs), detail::isotonic(ys));
}

inline DepthMap apply_alignment(const AlignmentFunction& f, const DepthMap& mono) {
    DepthMap out(mono.width(), mono.height());
    for (std::size_t i = 0; i < mono.size(); ++i)
        out[i] = valid_depth(mono[i]) ? std::max(f(mono[i]), 1e-6) : kInvalidDepth;
    return out;
}

// ------------------------------------------------------------------ blending

struct BlendResult {
    DepthMap depth;
    CgResult solver;
};

/// Largest pixel count solved by sparse factorisation before falling back to PCG.
inline constexpr Eigen::Index kDirectSolveLimit = 1 << 20;

/// Minimises  sum_masked (d - d_anchor)^2 + lambda * sum_edges ((d_q - d_p) - (g_q - g_p))^2
/// over the full grid with forward-difference edges and Neumann borders. Edges touching
/// an invalid guide pixel target a zero difference. The anchor applies only where the
/// mask is set and the anchor depth is valid.
inline BlendResult poisson_blend(const DepthMap& anchor, const DepthMap& guide, const BinaryMask& mask, double lambda,
                                 double tolerance = 1e-8, int max_iterations = 20000) {
    require_same_shape(anchor, guide, "poisson_blend");
    require_same_shape(anchor, mask, "poisson_blend");
    if (!(lambda > 0)) throw Error(ErrorCode::invalid_argument, "lambda must be positive");
    const int w = anchor.width(), h = anchor.height();
    const auto n = static_cast<Eigen::Index>(anchor.size());

    ScreenedLaplacian op;
    op.width = w;
    op.height = h;
    op.lambda = lambda;
    op.data_weight = VecX::Zero(n);
    VecX rhs = VecX::Zero(n);
    double anchor_sum = 0;
    std::size_t anchored = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        if (mask[i] && valid_depth(anchor[i])) {
            op.data_weight[i] = 1.0;
            rhs[i] = anchor[i];
            anchor_sum += anchor[i];
            ++anchored;
        }
    if (anchored == 0)
        throw Error(ErrorCode::unconstrained, "poisson_blend: empty mask leaves the system defined only up to a constant");

    auto edge = [&](std::size_t p, std::size_t q) {
        return (valid_depth(guide[p]) && valid_depth(guide[q])) ? guide[p] - guide[q] : 0.0;
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = anchor.index(x, y);
            double acc = 0;
            if (x + 1 < w) acc += edge(i, i + 1);
            if (x > 0) acc += edge(i, i - 1);
            if (y + 1 < h) acc += edge(i, i + w);
            if (y > 0) acc += edge(i, i - w);
            rhs[static_cast<Eigen::Index>(i)] += lambda * acc;
        }

    const double fallback = anchor_sum / static_cast<double>(anchored);
    VecX x(n);
    for (Eigen::Index i = 0; i < n; ++i)
        x[i] = valid_depth(guide[i]) ? guide[i] : (valid_depth(anchor[i]) ? anchor[i] : fallback);

    BlendResult out;
    // Sparse Cholesky first; PCG polishes (or takes over) when the factorisation is
    // unavailable or its residual misses the tolerance.
    if (n <= kDirectSolveLimit) {
        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(op.matrix());
        if (ldlt.info() == Eigen::Success) {
            const VecX direct = ldlt.solve(rhs);
            VecX ax(n);
            op(direct, ax);
            const double rel = (rhs - ax).norm() / rhs.norm();
            if (direct.allFinite() && rel <= tolerance) {
                out.solver = {0, rel, true};
                x = direct;
            } else if (direct.allFinite()) {
                x = direct;
            }
        }
    }
    if (!out.solver.converged) out.solver = conjugate_gradient(op, op.diagonal(), rhs, x, tolerance, max_iterations);
    if (!out.solver.converged)
        throw FusionError("poisson_blend: solver did not converge (residual " +
                              std::to_string(out.solver.relative_residual) + ")",
                          out.solver.relative_residual, out.solver.iterations);
    out.depth = DepthMap(w, h);
    for (Eigen::Index i = 0; i < n; ++i) out.depth[i] = x[i];
    return out;
}

// ------------------------------------------------------------------ bilateral

/// Joint bilateral filter of the valid depth pixels guided by an RGB image. The
/// spatial kernel spans ceil(3 sigma) pixels; weights are renormalised over valid taps.
inline DepthMap bilateral_sharpen(const DepthMap& depth, const ImageRGB& guide, const BilateralSigmas& sigmas) {
    require_same_shape(depth, guide, "bilateral_sharpen");
    const int w = depth.width(), h = depth.height();
    const int radius = static_cast<int>(std::ceil(3.0 * sigmas.spatial));
    const double inv_s = 1.0 / (2.0 * sigmas.spatial * sigmas.spatial);
    const double inv_r = 1.0 / (2.0 * sigmas.range * sigmas.range);
    std::vector<double> spatial(static_cast<std::size_t>((2 * radius + 1) * (2 * radius + 1)));
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            spatial[static_cast<std::size_t>((dy + radius) * (2 * radius + 1) + dx + radius)] =
                std::exp(-(dx * dx + dy * dy) * inv_s);

    DepthMap out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!valid_depth(depth(x, y))) {
                out(x, y) = depth(x, y);
                continue;
            }
            const Rgb& c0 = guide(x, y);
            double acc = 0, wsum = 0;
            for (int dy = -radius; dy <= radius; ++dy) {
                const int ny = y + dy;
                if (ny < 0 || ny >= h) continue;
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int nx = x + dx;
                    if (nx < 0 || nx >= w) continue;
                    const double d = depth(nx, ny);
                    if (!valid_depth(d)) continue;
                    const Rgb& c = guide(nx, ny);
                    const double r2 = (c[0] - c0[0]) * (c[0] - c0[0]) + (c[1] - c0[1]) * (c[1] - c0[1]) +
                                      (c[2] - c0[2]) * (c[2] - c0[2]);
                    const double wt =
                        spatial[static_cast<std::size_t>((dy + radius) * (2 * radius + 1) + dx + radius)] *
                        std::exp(-r2 * inv_r);
                    acc += wt * d;
                    wsum += wt;
                }
            }
            out(x, y) = acc / wsum;
        }
    return out;
}

// ------------------------------------------------------------------ background

/// Single-linkage clustering of disparities (1/depth) along the sorted axis: adjacent
/// values stay in one cluster while their gap is below tau * (disparity range). The
/// cluster with the smallest mean disparity (farthest) is returned as background.
inline BinaryMask background_mask(const DepthMap& depth, double tau = 0.1) {
    std::vector<std::pair<double, std::size_t>> disp;
    for (std::size_t i = 0; i < depth.size(); ++i)
        if (valid_depth(depth[i])) disp.emplace_back(1.0 / depth[i], i);
    if (disp.empty()) throw Error(ErrorCode::invalid_depth, "background_mask: no valid depth");
    std::sort(disp.begin(), disp.end());
    const double range = disp.back().first - disp.front().first;
    const double gap_limit = tau * range;

    // Clusters as [begin, end) runs of the sorted order; equal values never split.
    std::vector<std::pair<std::size_t, std::size_t>> clusters;
    std::size_t start = 0;
    for (std::size_t k = 1; k <= disp.size(); ++k) {
        const double gap = k < disp.size() ? disp[k].first - disp[k - 1].first : 0.0;
        if (k == disp.size() || (gap > 0.0 && gap >= gap_limit)) {
            clusters.emplace_back(start, k);
            start = k;
        }
    }
    std::size_t best = 0;
    double best_mean = 0;
    for (std::size_t c = 0; c < clusters.size(); ++c) {
        double sum = 0;
        for (std::size_t k = clusters[c].first; k < clusters[c].second; ++k) sum += disp[k].first;
        const double mean = sum / static_cast<double>(clusters[c].second - clusters[c].first);
        if (c == 0 || mean < best_mean) {
            best = c;
            best_mean = mean;
        }
    }
    BinaryMask out(depth.width(), depth.height());
    for (std::size_t k = clusters[best].first; k < clusters[best].second; ++k) out[disp[k].second] = 1;
    return out;
}

// ------------------------------------------------------------------ composition

struct FusedDepth {
    AlignmentFunction alignment;
    DepthMap aligned;  // monocular depth after alignment
    DepthMap blended;  // Poisson solution before bilateral filtering
    DepthMap depth;    // final output
    CgResult solver;
};

inline BinaryMask confidence_mask(const ConfidenceMap& conf, const DepthMap& depth, double threshold) {
    BinaryMask m(conf.width(), conf.height());
    for (std::size_t i = 0; i < conf.size(); ++i) m[i] = (conf[i] >= threshold && valid_depth(depth[i])) ? 1 : 0;
    return m;
}

/// Align -> blend -> bilateral. `anchor` plays the metric role, `mono` the detailed one.
inline FusedDepth fuse_depth(const DepthMap& anchor, const BinaryMask& anchor_mask, const DepthMap& mono,
                             const ImageRGB& guide, const FusionConfig& cfg) {
    FusedDepth out;
    out.alignment = fit_alignment(mono, anchor, anchor_mask, cfg.knot_count);
    out.aligned = apply_alignment(out.alignment, mono);
    auto blend = poisson_blend(anchor, out.aligned, anchor_mask, cfg.lambda, cfg.tolerance, cfg.max_iterations);
    out.blended = std::move(blend.depth);
    out.solver = blend.solver;
    out.depth = bilateral_sharpen(out.blended, guide, cfg.bilateral);
    return out;
}

inline FusedDepth fuse_view(const ViewData& view, const FusionConfig& cfg) {
    const BinaryMask m = confidence_mask(view.confidence, view.depth_mvs, cfg.confidence_threshold);
    return fuse_depth(view.depth_mvs, m, view.depth_mono, view.image, cfg);
}

}  // namespace ri3d
