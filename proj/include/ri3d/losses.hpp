#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ri3d/camera.hpp"
#include "ri3d/error.hpp"
#include "ri3d/image.hpp"
#include "ri3d/renderer.hpp"

namespace ri3d {

// Masks are optional throughout: an empty BinaryMask selects every pixel.

struct LossWeights {
    double l1 = 0.8;
    double ssim = 0.2;
    double perceptual = 0.2;
    double depth_pearson = 0.05;
    double opacity = 1.0;
    double inpaint = 1.0;
};

inline void validate(const LossWeights& w) {
    for (double v : {w.l1, w.ssim, w.perceptual, w.depth_pearson, w.opacity, w.inpaint})
        if (!(v >= 0) || !std::isfinite(v)) throw Error(ErrorCode::invalid_argument, "loss weights must be >= 0");
}

struct ImageLoss {
    double value = 0;
    ImageRGB grad;
};

struct ScalarLoss {
    double value = 0;
    ScalarImage grad;
    bool skipped = false;  // set when the term carried no signal and contributed nothing
};

namespace detail {

inline bool selected(const BinaryMask& m, std::size_t i) { return m.empty() || m[i] != 0; }

inline std::size_t selected_count(const BinaryMask& m, std::size_t n) { return m.empty() ? n : count(m); }

template <class A>
void check_mask(const A& img, const BinaryMask& mask, const char* what) {
    if (!mask.empty()) require_same_shape(img, mask, what);
}

/// Separable 11-tap Gaussian (sigma 1.5), normalised to unit sum.
inline const std::array<double, 11>& ssim_kernel() {
    static const std::array<double, 11> k = [] {
        std::array<double, 11> v{};
        double s = 0;
        for (int i = 0; i < 11; ++i) s += v[static_cast<std::size_t>(i)] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5));
        for (double& x : v) x /= s;
        return v;
    }();
    return k;
}

/// "Same"-size convolution with zero padding. The kernel is symmetric, so this is also
/// its own adjoint.
inline std::vector<double> gauss_conv(const std::vector<double>& in, int w, int h) {
    const auto& k = ssim_kernel();
    std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int t = -5; t <= 5; ++t) {
                const int xx = x + t;
                if (xx >= 0 && xx < w) acc += k[static_cast<std::size_t>(t + 5)] * in[static_cast<std::size_t>(y * w + xx)];
            }
            tmp[static_cast<std::size_t>(y * w + x)] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int t = -5; t <= 5; ++t) {
                const int yy = y + t;
                if (yy >= 0 && yy < h) acc += k[static_cast<std::size_t>(t + 5)] * tmp[static_cast<std::size_t>(yy * w + x)];
            }
            out[static_cast<std::size_t>(y * w + x)] = acc;
        }
    return out;
}

inline constexpr double kC1 = 0.01 * 0.01;
inline constexpr double kC2 = 0.03 * 0.03;

/// Mean SSIM over the selected pixels and all channels, with its gradient w.r.t. `a`.
/// Unselected pixels are zeroed in both images before filtering.
inline double ssim_with_grad(const ImageRGB& a, const ImageRGB& b, const BinaryMask& mask, ImageRGB* grad) {
    const int w = a.width(), h = a.height();
    const std::size_t n = a.size();
    const std::size_t sel = selected_count(mask, n);
    if (sel == 0) throw Error(ErrorCode::invalid_argument, "ssim: empty mask");
    const double norm = 1.0 / (3.0 * static_cast<double>(sel));
    if (grad) *grad = ImageRGB(w, h);
    double total = 0;
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            const bool s = selected(mask, i);
            x[i] = s ? a[i][c] : 0.0;
            y[i] = s ? b[i][c] : 0.0;
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = gauss_conv(x, w, h), my = gauss_conv(y, w, h);
        const auto exx = gauss_conv(xx, w, h), eyy = gauss_conv(yy, w, h), exy = gauss_conv(xy, w, h);
        std::vector<double> g_mx(n, 0.0), g_sxx(n, 0.0), g_sxy(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (!selected(mask, i)) continue;
            const double sxx = exx[i] - mx[i] * mx[i], syy = eyy[i] - my[i] * my[i], sxy = exy[i] - mx[i] * my[i];
            const double a1 = 2 * mx[i] * my[i] + kC1, a2 = 2 * sxy + kC2;
            const double b1 = mx[i] * mx[i] + my[i] * my[i] + kC1, b2 = sxx + syy + kC2;
            const double s = a1 * a2 / (b1 * b2);
            total += s;
            if (!grad) continue;
            g_mx[i] = norm * (2 * my[i] * a2 / (b1 * b2) - s * 2 * mx[i] / b1);
            g_sxx[i] = norm * (-s / b2);
            g_sxy[i] = norm * (2 * a1 / (b1 * b2));
        }
        if (!grad) continue;
        // sxx = E[x^2] - mx^2 and sxy = E[xy] - mx my feed back into the mean path.
        std::vector<double> g_mean(n);
        for (std::size_t i = 0; i < n; ++i) g_mean[i] = g_mx[i] - 2 * mx[i] * g_sxx[i] - my[i] * g_sxy[i];
        const auto t_mean = gauss_conv(g_mean, w, h), t_xx = gauss_conv(g_sxx, w, h), t_xy = gauss_conv(g_sxy, w, h);
        for (std::size_t i = 0; i < n; ++i)
            if (selected(mask, i)) (*grad)[i][c] = t_mean[i] + 2 * x[i] * t_xx[i] + y[i] * t_xy[i];
    }
    return total * norm;
}

}  // namespace detail

/// Mean absolute error over selected pixels and channels.
inline ImageLoss loss_l1(const ImageRGB& pred, const ImageRGB& target, const BinaryMask& mask = {}) {
    require_same_shape(pred, target, "loss_l1");
    detail::check_mask(pred, mask, "loss_l1");
    const std::size_t sel = detail::selected_count(mask, pred.size());
    if (sel == 0) throw Error(ErrorCode::invalid_argument, "loss_l1: empty mask");
    const double norm = 1.0 / (3.0 * static_cast<double>(sel));
    ImageLoss out{0, ImageRGB(pred.width(), pred.height())};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!detail::selected(mask, i)) continue;
        for (int c = 0; c < 3; ++c) {
            const double d = pred[i][c] - target[i][c];
            out.value += std::abs(d);
            out.grad[i][c] = d > 0 ? norm : (d < 0 ? -norm : 0.0);
        }
    }
    out.value *= norm;
    return out;
}

/// 1 - SSIM (11x11 Gaussian window, sigma 1.5, zero padding).
inline ImageLoss loss_ssim(const ImageRGB& pred, const ImageRGB& target, const BinaryMask& mask = {}) {
    require_same_shape(pred, target, "loss_ssim");
    detail::check_mask(pred, mask, "loss_ssim");
    if (pred.width() < 11 || pred.height() < 11)
        throw Error(ErrorCode::invalid_argument, "loss_ssim: image smaller than the 11x11 window");
    ImageLoss out;
    out.value = 1.0 - detail::ssim_with_grad(pred, target, mask, &out.grad);
    for (auto& g : out.grad.values())
        for (double& v : g) v = -v;
    return out;
}

/// Multi-scale gradient-domain L1: at each of `levels` dyadic scales, the mean absolute
/// difference of horizontal and vertical forward differences, averaged over scales. A
/// difference counts only when both of its pixels are selected; a pooled pixel is
/// selected only when all four children are.
inline ImageLoss loss_perceptual_proxy(const ImageRGB& pred, const ImageRGB& target, const BinaryMask& mask = {},
                                       int levels = 3) {
    require_same_shape(pred, target, "loss_perceptual_proxy");
    detail::check_mask(pred, mask, "loss_perceptual_proxy");
    struct Level {
        int w, h;
        ImageRGB p, t;
        BinaryMask m;
    };
    std::vector<Level> pyr;
    pyr.push_back({pred.width(), pred.height(), pred, target, mask.empty() ? full_mask(pred.width(), pred.height()) : mask});
    for (int l = 1; l < levels; ++l) {
        const Level& f = pyr.back();
        const int w = f.w / 2, h = f.h / 2;
        if (w < 2 && h < 2) break;
        Level c{w, h, ImageRGB(w, h), ImageRGB(w, h), BinaryMask(w, h)};
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                bool all = true;
                for (int k = 0; k < 4; ++k) {
                    const int fx = 2 * x + (k & 1), fy = 2 * y + (k >> 1);
                    all = all && f.m(fx, fy);
                    for (int ch = 0; ch < 3; ++ch) {
                        c.p(x, y)[ch] += 0.25 * f.p(fx, fy)[ch];
                        c.t(x, y)[ch] += 0.25 * f.t(fx, fy)[ch];
                    }
                }
                c.m(x, y) = all ? 1 : 0;
            }
        pyr.push_back(std::move(c));
    }

    ImageLoss out{0, ImageRGB(pred.width(), pred.height())};
    std::vector<ImageRGB> grads;
    std::vector<double> terms;
    for (const Level& lv : pyr) {
        ImageRGB g(lv.w, lv.h);
        double sum = 0;
        std::size_t pairs = 0;
        auto diff = [&](int x0, int y0, int x1, int y1) {
            if (!lv.m(x0, y0) || !lv.m(x1, y1)) return;
            ++pairs;
            for (int ch = 0; ch < 3; ++ch) {
                const double d = (lv.p(x1, y1)[ch] - lv.p(x0, y0)[ch]) - (lv.t(x1, y1)[ch] - lv.t(x0, y0)[ch]);
                sum += std::abs(d);
                const double s = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                g(x1, y1)[ch] += s;
                g(x0, y0)[ch] -= s;
            }
        };
        for (int y = 0; y < lv.h; ++y)
            for (int x = 0; x < lv.w; ++x) {
                if (x + 1 < lv.w) diff(x, y, x + 1, y);
                if (y + 1 < lv.h) diff(x, y, x, y + 1);
            }
        if (pairs == 0) {
            terms.push_back(-1);
            grads.push_back(ImageRGB(lv.w, lv.h));
            continue;
        }
        const double norm = 1.0 / (3.0 * static_cast<double>(pairs));
        for (auto& v : g.values())
            for (double& c : v) c *= norm;
        terms.push_back(sum * norm);
        grads.push_back(std::move(g));
    }
    const double active = static_cast<double>(std::count_if(terms.begin(), terms.end(), [](double t) { return t >= 0; }));
    if (active == 0) return out;
    for (double t : terms)
        if (t >= 0) out.value += t / active;
    // Push the per-level gradients back down the pyramid (each pooled pixel averages four).
    ImageRGB carry = grads.back();
    for (auto& v : carry.values())
        for (double& c : v) c = terms.back() >= 0 ? c / active : 0.0;
    for (std::size_t l = pyr.size() - 1; l-- > 0;) {
        ImageRGB here = grads[l];
        for (auto& v : here.values())
            for (double& c : v) c = terms[l] >= 0 ? c / active : 0.0;
        for (int y = 0; y < pyr[l + 1].h; ++y)
            for (int x = 0; x < pyr[l + 1].w; ++x)
                for (int k = 0; k < 4; ++k)
                    for (int ch = 0; ch < 3; ++ch) here(2 * x + (k & 1), 2 * y + (k >> 1))[ch] += 0.25 * carry(x, y)[ch];
        carry = std::move(here);
    }
    out.grad = std::move(carry);
    return out;
}

/// 1 - Pearson correlation between rendered and reference depth over selected pixels
/// where both depths are valid. Skipped (value 0) below 16 samples or at zero variance.
inline ScalarLoss loss_depth_pearson(const DepthMap& rendered, const DepthMap& mono, const BinaryMask& mask = {}) {
    require_same_shape(rendered, mono, "loss_depth_pearson");
    detail::check_mask(rendered, mask, "loss_depth_pearson");
    ScalarLoss out{0, ScalarImage(rendered.width(), rendered.height()), false};
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < rendered.size(); ++i)
        if (detail::selected(mask, i) && valid_depth(rendered[i]) && valid_depth(mono[i])) idx.push_back(i);
    if (idx.size() < 16) {
        out.skipped = true;
        return out;
    }
    const double n = static_cast<double>(idx.size());
    double mx = 0, my = 0;
    for (std::size_t i : idx) {
        mx += rendered[i];
        my += mono[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i : idx) {
        const double dx = rendered[i] - mx, dy = mono[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    // Relative floor: variance this far below the mean's scale is rounding noise.
    if (sxx <= 1e-24 * n * std::max(1.0, mx * mx) || syy <= 1e-24 * n * std::max(1.0, my * my)) {
        out.skipped = true;
        return out;
    }
    const double r = sxy / std::sqrt(sxx * syy);
    out.value = 1.0 - std::clamp(r, -1.0, 1.0);
    const double inv = 1.0 / std::sqrt(sxx * syy);
    for (std::size_t i : idx) {
        const double dx = rendered[i] - mx, dy = mono[i] - my;
        out.grad[i] = -(dy * inv - r * dx / sxx);
    }
    return out;
}

/// Accumulated opacity summed over pixels outside the visibility mask but inside the
/// background mask, divided by the image's pixel count.
inline ScalarLoss opacity_suppression(const ScalarImage& alpha, const BinaryMask& visible, const BinaryMask& background) {
    require_same_shape(alpha, visible, "opacity_suppression");
    require_same_shape(alpha, background, "opacity_suppression");
    ScalarLoss out{0, ScalarImage(alpha.width(), alpha.height()), false};
    if (alpha.size() == 0) return out;
    const double g = 1.0 / static_cast<double>(alpha.size());
    for (std::size_t i = 0; i < alpha.size(); ++i)
        if (!visible[i] && background[i]) {
            out.value += alpha[i];
            out.grad[i] = g;
        }
    out.value *= g;
    return out;
}

/// Median of the pairwise centre distances; 1 when fewer than two distinct cameras exist.
inline double median_pairwise_distance(const std::vector<Camera>& cams) {
    std::vector<double> d;
    for (std::size_t i = 0; i < cams.size(); ++i)
        for (std::size_t j = i + 1; j < cams.size(); ++j) d.push_back((cams[i].center() - cams[j].center()).norm());
    if (d.empty()) return 1.0;
    std::sort(d.begin(), d.end());
    const double m = d.size() % 2 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
    return m > 0 ? m : 1.0;
}

/// exp(-min_i |c_novel - c_i| / tau). A non-positive tau selects the median pairwise
/// input distance.
inline double camera_distance_weight(const Camera& novel, const std::vector<Camera>& inputs, double tau = 0) {
    if (inputs.empty()) throw Error(ErrorCode::invalid_argument, "camera_distance_weight: no input cameras");
    if (!(tau > 0)) tau = median_pairwise_distance(inputs);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : inputs) best = std::min(best, (novel.center() - c.center()).norm());
    return std::exp(-best / tau);
}

/// alpha >= threshold, closed with a disk of `radius` pixels.
inline BinaryMask visibility_mask(const ScalarImage& alpha, double threshold = 0.5, int radius = 3) {
    BinaryMask m(alpha.width(), alpha.height());
    for (std::size_t i = 0; i < alpha.size(); ++i) m[i] = alpha[i] >= threshold ? 1 : 0;
    return close(m, radius);
}

inline constexpr double kPsnrCap = 99.0;

inline double metric_psnr(const ImageRGB& a, const ImageRGB& b) {
    require_same_shape(a, b, "metric_psnr");
    if (a.empty()) throw Error(ErrorCode::invalid_argument, "metric_psnr: empty image");
    long double se = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (int c = 0; c < 3; ++c) se += (long double)(a[i][c] - b[i][c]) * (a[i][c] - b[i][c]);
    const double mse = static_cast<double>(se / (3.0L * a.size()));
    if (mse <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

inline double metric_ssim(const ImageRGB& a, const ImageRGB& b) {
    require_same_shape(a, b, "metric_ssim");
    if (a.width() < 11 || a.height() < 11)
        throw Error(ErrorCode::invalid_argument, "metric_ssim: image smaller than the 11x11 window");
    return detail::ssim_with_grad(a, b, BinaryMask{}, nullptr);
}

// ------------------------------------------------------------------ bundles

struct LossReport {
    double total = 0;
    std::map<std::string, double> terms;  // weighted contributions
    PixelGradients grad;
    bool pearson_skipped = false;
};

namespace detail {

inline void add_scaled(ImageRGB& acc, const ImageRGB& g, double s) {
    if (g.empty() || s == 0) return;
    if (acc.empty()) acc = ImageRGB(g.width(), g.height());
    for (std::size_t i = 0; i < g.size(); ++i)
        for (int c = 0; c < 3; ++c) acc[i][c] += s * g[i][c];
}

inline void add_scaled(ScalarImage& acc, const ScalarImage& g, double s) {
    if (g.empty() || s == 0) return;
    if (acc.empty()) acc = ScalarImage(g.width(), g.height());
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += s * g[i];
}

}  // namespace detail

/// Adds `scale` times another report (terms are prefixed).
inline void accumulate(LossReport& into, const LossReport& r, double scale, const std::string& prefix) {
    into.total += scale * r.total;
    for (const auto& [k, v] : r.terms) into.terms[prefix + k] += scale * v;
    detail::add_scaled(into.grad.color, r.grad.color, scale);
    detail::add_scaled(into.grad.depth, r.grad.depth, scale);
    detail::add_scaled(into.grad.alpha, r.grad.alpha, scale);
    into.pearson_skipped = into.pearson_skipped || r.pearson_skipped;
}

/// L1 + SSIM + perceptual proxy on colour, plus the Pearson depth term when a reference
/// depth is supplied. SSIM is dropped for images smaller than its window.
inline LossReport reconstruction_loss(const RenderOutput& pred, const ImageRGB& target, const BinaryMask& mask,
                                      const DepthMap* reference_depth, const LossWeights& w) {
    LossReport rep;
    auto add_color = [&](const char* name, double weight, const ImageLoss& l) {
        rep.total += weight * l.value;
        rep.terms[name] = weight * l.value;
        detail::add_scaled(rep.grad.color, l.grad, weight);
    };
    if (w.l1 > 0) add_color("l1", w.l1, loss_l1(pred.color, target, mask));
    if (w.ssim > 0 && pred.color.width() >= 11 && pred.color.height() >= 11)
        add_color("ssim", w.ssim, loss_ssim(pred.color, target, mask));
    if (w.perceptual > 0) add_color("perceptual", w.perceptual, loss_perceptual_proxy(pred.color, target, mask));
    if (reference_depth && w.depth_pearson > 0) {
        const auto p = loss_depth_pearson(pred.depth, *reference_depth, mask);
        rep.pearson_skipped = p.skipped;
        rep.total += w.depth_pearson * p.value;
        rep.terms["depth_pearson"] = w.depth_pearson * p.value;
        detail::add_scaled(rep.grad.depth, p.grad, w.depth_pearson);
    }
    return rep;
}

}  // namespace ri3d
