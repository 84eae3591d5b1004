#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include <Eigen/Dense>

#include "ri3d/depth_fusion.hpp"
#include "ri3d/harmonic.hpp"
#include "fusion_oracle.hpp"
#include "test_util.hpp"

using namespace ri3d;
using namespace ri3d::test;

namespace {

DepthMap ramp_8x8() {
    DepthMap m(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) m(x, y) = 1.0 + 0.1 * x;
    return m;
}

BinaryMask left_half(int w, int h) {
    BinaryMask m(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) m(x, y) = 1;
    return m;
}

}  // namespace

// ------------------------------------------------------------------ alignment

TEST(FitAlignment, IdentityWhenMonoEqualsMvs) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(1, 9);
    DepthMap d(16, 16);
    for (auto& v : d.values()) v = u(rng);
    const auto f = fit_alignment(d, d, full_mask(16, 16), 8);
    double worst = 0;
    for (double x = 1; x <= 9; x += 0.01) worst = std::max(worst, std::abs(f(x) - x));
    EXPECT_LT(worst, 1e-6);
}

TEST(FitAlignment, RecoversAffineMapAgainstClosedForm) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.5, 3);
    DepthMap mono(20, 20), mvs(20, 20);
    for (std::size_t i = 0; i < mono.size(); ++i) {
        mono[i] = u(rng);
        mvs[i] = 2.0 * mono[i] + 1.0;
    }
    // Closed-form affine least squares on the same samples.
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(mono.size());
    for (std::size_t i = 0; i < mono.size(); ++i) {
        sx += mono[i];
        sy += mvs[i];
        sxx += mono[i] * mono[i];
        sxy += mono[i] * mvs[i];
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double icpt = (sy - slope * sx) / n;
    const auto f = fit_alignment(mono, mvs, full_mask(20, 20), 8);
    ASSERT_EQ(f.knots_x().size(), 8u);
    for (std::size_t k = 0; k < f.knots_x().size(); ++k)
        EXPECT_NEAR(f.knots_y()[k], slope * f.knots_x()[k] + icpt, 1e-6);
    EXPECT_NEAR(f(10.0), 21.0, 1e-6);  // extrapolation continues the end segment
}

TEST(FitAlignment, TooFewMaskedPixels) {
    DepthMap d(8, 8, 1.0);
    BinaryMask m(8, 8);
    m[0] = m[1] = m[2] = 1;
    try {
        fit_alignment(d, d, m, 8);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::alignment_failed);
    }
}

TEST(FitAlignment, ConstantMonoRejected) {
    DepthMap mono(16, 16, 2.0), mvs(16, 16, 3.0);
    try {
        fit_alignment(mono, mvs, full_mask(16, 16), 8);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::alignment_failed);
    }
}

TEST(FitAlignment, AlwaysMonotone) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.5, 3), noise(-2, 2);
    for (int trial = 0; trial < 20; ++trial) {
        DepthMap mono(16, 16), mvs(16, 16);
        for (std::size_t i = 0; i < mono.size(); ++i) {
            mono[i] = u(rng);
            // Decreasing trend plus noise: the unconstrained fit would not be monotone.
            mvs[i] = std::max(0.1, 6.0 - mono[i] * (trial % 3) + noise(rng));
        }
        const auto f = fit_alignment(mono, mvs, full_mask(16, 16), 8);
        double prev = -1e300;
        for (double x = -2; x <= 6; x += 0.003) {
            const double y = f(x);
            ASSERT_GE(y, prev - 1e-12);
            prev = y;
        }
    }
}

TEST(ApplyAlignment, IdentityIsBitwise) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.01, 100);
    DepthMap d(10, 10);
    for (auto& v : d.values()) v = u(rng);
    d[3] = kInvalidDepth;
    const AlignmentFunction id({0.5, 2.0, 50.0}, {0.5, 2.0, 50.0});
    const auto out = apply_alignment(id, d);
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(out[i], d[i]);
}

TEST(ApplyAlignment, InterpolatesAndExtrapolates) {
    const AlignmentFunction f({1, 2}, {2, 4});
    DepthMap d(3, 1);
    d[0] = 1.5;
    d[1] = 3.0;
    d[2] = -1.0;
    const auto out = apply_alignment(f, d);
    EXPECT_NEAR(out[0], 3.0, 1e-12);
    EXPECT_NEAR(out[1], 6.0, 1e-12);
    EXPECT_FALSE(valid_depth(out[2]));
}

TEST(ApplyAlignment, OutputClampedPositive) {
    const AlignmentFunction f({1, 2}, {-5, 4});
    DepthMap d(1, 1, 1.0);
    EXPECT_EQ(apply_alignment(f, d)[0], 1e-6);
}

// ------------------------------------------------------------------ blending

TEST(PoissonBlend, ConstantInputsAreFixedPoint) {
    const DepthMap c(9, 7, 3.25);
    const auto out = poisson_blend(c, c, full_mask(9, 7), 10.0);
    for (double v : out.depth.values()) EXPECT_NEAR(v, 3.25, 1e-8);
}

TEST(PoissonBlend, TinyLambdaFollowsAnchor) {
    DepthMap a(12, 12), g(12, 12);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            a(x, y) = 2.0 + std::sin(0.3 * x) * std::cos(0.2 * y);
            g(x, y) = 1.0 + 0.05 * x * y;
        }
    const auto out = poisson_blend(a, g, full_mask(12, 12), 1e-8);
    EXPECT_LT(max_abs_diff(out.depth, a), 1e-4);
}

TEST(PoissonBlend, EightByEightMatchesDenseSolve) {
    const DepthMap anchor(8, 8, 1.0);
    const DepthMap guide = ramp_8x8();
    const BinaryMask mask = left_half(8, 8);
    const auto out = poisson_blend(anchor, guide, mask, 10.0);
    const auto ref = dense_blend(anchor, guide, mask, 10.0);
    EXPECT_LT(max_abs_diff(out.depth, ref), 1e-8);
    EXPECT_LE(out.solver.relative_residual, 1e-8);
}

TEST(PoissonBlend, EmptyMaskIsUnconstrained) {
    try {
        poisson_blend(DepthMap(4, 4, 1.0), DepthMap(4, 4, 1.0), BinaryMask(4, 4), 10.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::unconstrained);
    }
}

TEST(PoissonBlend, NonConvergenceReportsResidual) {
    try {
        poisson_blend(DepthMap(8, 8, 1.0), ramp_8x8(), left_half(8, 8), 10.0, 1e-30, 1);
        FAIL();
    } catch (const FusionError& e) {
        EXPECT_GT(e.residual(), 0.0);
        EXPECT_EQ(e.code(), ErrorCode::fusion);
    }
}

TEST(PoissonBlend, InvariantToGuideOffset) {
    std::mt19937_64 rng(21);
    for (int t = 0; t < 5; ++t) {
        auto f = random_fixture(rng);
        auto shifted = f.guide;
        for (auto& v : shifted.values()) v += 7.5;
        const auto a = poisson_blend(f.anchor, f.guide, f.mask, f.lambda, 1e-12).depth;
        const auto b = poisson_blend(f.anchor, shifted, f.mask, f.lambda, 1e-12).depth;
        EXPECT_LT(max_abs_diff(a, b), 1e-8);
    }
}

TEST(PoissonBlend, RandomFixturesMatchDenseSolve) {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 10; ++t) {
        const auto f = random_fixture(rng);
        const auto out = poisson_blend(f.anchor, f.guide, f.mask, f.lambda);
        EXPECT_LT(max_abs_diff(out.depth, dense_blend(f.anchor, f.guide, f.mask, f.lambda)), 1e-8);
    }
}

TEST(PoissonBlend, SolutionIsStrictMinimizer) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    for (int t = 0; t < 10; ++t) {
        const auto f = random_fixture(rng);
        const auto d = poisson_blend(f.anchor, f.guide, f.mask, f.lambda).depth;
        const double e0 = blend_objective(d, f.anchor, f.guide, f.mask, f.lambda);
        for (int k = 0; k < 100; ++k) {
            DepthMap p = d;
            Eigen::VectorXd dir(static_cast<Eigen::Index>(d.size()));
            for (auto& v : dir) v = n(rng);
            dir *= 1e-3 / dir.norm();
            for (std::size_t i = 0; i < d.size(); ++i) p[i] += dir[static_cast<Eigen::Index>(i)];
            EXPECT_GT(blend_objective(p, f.anchor, f.guide, f.mask, f.lambda), e0);
        }
    }
}

// ------------------------------------------------------------------ bilateral

TEST(Bilateral, ConstantDepthUnchanged) {
    std::mt19937_64 rng(2);
    const DepthMap d(20, 15, 4.5);
    const auto out = bilateral_sharpen(d, test::random_image(20, 15, rng), {});
    for (double v : out.values()) EXPECT_NEAR(v, 4.5, 1e-6);
}

TEST(Bilateral, ConstantGuideIsGaussianBlur) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(1, 3);
    DepthMap d(17, 13);
    for (auto& v : d.values()) v = u(rng);
    d(4, 4) = kInvalidDepth;
    const ImageRGB guide(17, 13, Rgb{0.3, 0.3, 0.3});
    const BilateralSigmas s{2.0, 0.1};
    const auto out = bilateral_sharpen(d, guide, s);
    // Direct normalised Gaussian convolution over valid pixels.
    for (int y = 0; y < 13; ++y)
        for (int x = 0; x < 17; ++x) {
            if (!valid_depth(d(x, y))) {
                EXPECT_FALSE(valid_depth(out(x, y)));
                continue;
            }
            double acc = 0, ws = 0;
            for (int yy = 0; yy < 13; ++yy)
                for (int xx = 0; xx < 17; ++xx) {
                    if (std::abs(xx - x) > 6 || std::abs(yy - y) > 6 || !valid_depth(d(xx, yy))) continue;
                    const double w = std::exp(-((xx - x) * (xx - x) + (yy - y) * (yy - y)) / (2 * s.spatial * s.spatial));
                    acc += w * d(xx, yy);
                    ws += w;
                }
            EXPECT_NEAR(out(x, y), acc / ws, 1e-6);
        }
}

TEST(Bilateral, StepEdgeDoesNotWiden) {
    const int w = 32, h = 5;
    DepthMap d(w, h);
    ImageRGB g(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            d(x, y) = x < 16 ? 1.0 : 2.0;
            g(x, y) = x < 16 ? Rgb{0, 0, 0} : Rgb{1, 1, 1};
        }
    auto width_10_90 = [&](const DepthMap& m) {
        int count = 0;
        for (int x = 0; x < w; ++x) {
            const double v = m(x, 2);
            if (v > 1.1 && v < 1.9) ++count;
        }
        return count;
    };
    const auto out = bilateral_sharpen(d, g, {});
    EXPECT_LE(width_10_90(out), width_10_90(d));
    // Plain smoothing would smear the step over several pixels.
    const auto blurred = bilateral_sharpen(d, ImageRGB(w, h, Rgb{0, 0, 0}), {});
    EXPECT_GT(width_10_90(blurred), width_10_90(d));
}

// ------------------------------------------------------------------ background

namespace {

/// Brute-force agglomeration: repeatedly merge the closest adjacent pair of clusters
/// while that gap is below the threshold.
std::vector<std::vector<double>> brute_force_clusters(std::vector<double> values, double tau) {
    std::sort(values.begin(), values.end());
    const double limit = tau * (values.back() - values.front());
    std::vector<std::vector<double>> clusters;
    for (double v : values) clusters.push_back({v});
    while (clusters.size() > 1) {
        std::size_t best = 0;
        double gap = 1e300;
        for (std::size_t c = 0; c + 1 < clusters.size(); ++c) {
            const double g = clusters[c + 1].front() - clusters[c].back();
            if (g < gap) {
                gap = g;
                best = c;
            }
        }
        if (!(gap < limit || gap == 0.0)) break;
        clusters[best].insert(clusters[best].end(), clusters[best + 1].begin(), clusters[best + 1].end());
        clusters.erase(clusters.begin() + static_cast<long>(best) + 1);
    }
    return clusters;
}

}  // namespace

TEST(BackgroundMask, Bimodal) {
    DepthMap d(10, 10);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) d(x, y) = x < 4 ? 1.0 : 10.0;
    const auto m = background_mask(d);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) EXPECT_EQ(m(x, y), x < 4 ? 0 : 1);
}

TEST(BackgroundMask, ConstantDepthIsAllBackground) {
    const auto m = background_mask(DepthMap(6, 6, 3.0));
    EXPECT_EQ(count(m), 36u);
}

TEST(BackgroundMask, ThreePlanesAgainstBruteForce) {
    DepthMap d(9, 4);
    std::vector<double> disp;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 9; ++x) {
            d(x, y) = x < 3 ? 1.0 : (x < 6 ? 2.0 : 20.0);
            disp.push_back(1.0 / d(x, y));
        }
    const auto clusters = brute_force_clusters(disp, 0.1);
    ASSERT_EQ(clusters.size(), 3u);
    const double far_disp = clusters.front().front();  // smallest disparity cluster
    const auto m = background_mask(d, 0.1);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 9; ++x) EXPECT_EQ(m(x, y), (1.0 / d(x, y) == far_disp) ? 1 : 0);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 9; ++x) EXPECT_EQ(m(x, y), x >= 6 ? 1 : 0);
}

TEST(BackgroundMask, RandomSceneAgainstBruteForce) {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 20; ++t) {
        DepthMap d(8, 8);
        std::vector<double> disp;
        for (auto& v : d.values()) {
            v = u(rng) < 0.5 ? 1.0 + 0.3 * u(rng) : 5.0 + 3 * u(rng);
            disp.push_back(1.0 / v);
        }
        const auto clusters = brute_force_clusters(disp, 0.1);
        double best_mean = 1e300;
        std::vector<double> best;
        for (const auto& c : clusters) {
            double s = 0;
            for (double v : c) s += v;
            if (s / c.size() < best_mean) {
                best_mean = s / c.size();
                best = c;
            }
        }
        const auto m = background_mask(d);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double v = 1.0 / d[i];
            const bool in = std::find(best.begin(), best.end(), v) != best.end();
            EXPECT_EQ(m[i] != 0, in);
        }
    }
}

TEST(BackgroundMask, ScaleInvariant) {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0, 1);
    DepthMap d(12, 12);
    for (auto& v : d.values()) v = u(rng) < 0.3 ? 1.0 + u(rng) : 8.0 + u(rng);
    const auto m = background_mask(d);
    for (double k : {0.25, 3.0, 1000.0}) {
        DepthMap s = d;
        for (auto& v : s.values()) v *= k;
        EXPECT_EQ(background_mask(s), m);
    }
}

TEST(BackgroundMask, AllInvalidRejected) { EXPECT_THROW(background_mask(DepthMap(3, 3)), Error); }

// ------------------------------------------------------------------ composition

TEST(FuseView, IdenticalConfidentInputsPassThrough) {
    ViewData v;
    v.camera = look_at(Vec3(0, 0, -3), Vec3(0, 0, 0), Vec3(0, -1, 0), 20, 20, 16, 16);
    v.image = ImageRGB(16, 16, Rgb{0.5, 0.5, 0.5});
    v.depth_mvs = DepthMap(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) v.depth_mvs(x, y) = 3.0 + 0.02 * x + 0.01 * y;
    v.depth_mono = v.depth_mvs;
    v.confidence = ConfidenceMap(16, 16, 1.0);
    const auto fused = fuse_view(v, FusionConfig{});
    EXPECT_LT(max_abs_diff(fused.blended, v.depth_mvs), 1e-6);
}

TEST(FuseView, OffsetSquareReanchoredToPlane) {
    const int w = 24, h = 24;
    ViewData v;
    v.camera = look_at(Vec3(0, 0, -5), Vec3(0, 0, 0), Vec3(0, -1, 0), 30, 30, w, h);
    v.image = ImageRGB(w, h, Rgb{0.4, 0.4, 0.4});
    v.depth_mvs = DepthMap(w, h);
    v.depth_mono = DepthMap(w, h);
    v.confidence = ConfidenceMap(w, h);
    DepthMap truth(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double plane = 5.0 + 0.05 * x + 0.02 * y;
            const bool square = x >= 8 && x < 16 && y >= 8 && y < 16;
            truth(x, y) = square ? plane - 1.0 : plane;
            v.depth_mvs(x, y) = plane;  // MVS misses the square...
            v.confidence(x, y) = square ? 0.0 : 1.0;  // ...and knows it
            v.depth_mono(x, y) = 0.5 * truth(x, y) + 0.2;
        }
    const FusionConfig cfg;
    const auto fused = fuse_view(v, cfg);
    const BinaryMask m = confidence_mask(v.confidence, v.depth_mvs, cfg.confidence_threshold);
    const auto ref = dense_blend(v.depth_mvs, fused.aligned, m, cfg.lambda);
    EXPECT_LT(max_abs_diff(fused.blended, ref), 1e-6);
    for (int y = 8; y < 16; ++y)
        for (int x = 8; x < 16; ++x) EXPECT_NEAR(fused.blended(x, y), truth(x, y), 0.02 * truth(x, y));
}

TEST(FuseView, CompositionMatchesStepwise) {
    ViewData v;
    v.camera = look_at(Vec3(0, 0, -3), Vec3(0, 0, 0), Vec3(0, -1, 0), 20, 20, 16, 16);
    std::mt19937_64 rng(6);
    v.image = test::random_image(16, 16, rng);
    v.depth_mvs = DepthMap(16, 16, 1.0);
    v.depth_mono = DepthMap(16, 16);
    v.confidence = ConfidenceMap(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            v.depth_mono(x, y) = 1.0 + 0.1 * x + 0.01 * y;
            v.confidence(x, y) = x < 8 ? 1.0 : 0.0;
        }
    FusionConfig cfg;
    cfg.lambda = 10;
    const auto fused = fuse_view(v, cfg);
    const BinaryMask m = left_half(16, 16);
    const auto f = fit_alignment(v.depth_mono, v.depth_mvs, m, cfg.knot_count);
    const auto aligned = apply_alignment(f, v.depth_mono);
    const auto blended = poisson_blend(v.depth_mvs, aligned, m, 10.0).depth;
    EXPECT_EQ(fused.blended, blended);
    EXPECT_EQ(fused.depth, bilateral_sharpen(blended, v.image, cfg.bilateral));
    EXPECT_EQ(fuse_view(v, cfg).depth, fused.depth);  // deterministic
}

// ------------------------------------------------------------------ harmonic fill

TEST(HarmonicFill, AffineFieldRecovered) {
    ScalarImage f(20, 14);
    for (int y = 0; y < 14; ++y)
        for (int x = 0; x < 20; ++x) f(x, y) = 0.3 + 0.02 * x - 0.01 * y;
    BinaryMask hole(20, 14);
    for (int y = 4; y < 10; ++y)
        for (int x = 5; x < 13; ++x) hole(x, y) = 1;
    auto damaged = f;
    for (std::size_t i = 0; i < f.size(); ++i)
        if (hole[i]) damaged[i] = 0.0;
    const auto out = harmonic_fill(damaged, hole);
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(out[i], f[i], 1e-9);
}

TEST(HarmonicFill, IsolatedComponentGetsKnownMean) {
    ScalarImage f(4, 1);
    f[0] = 1.0;
    f[1] = 3.0;
    BinaryMask hole(4, 1);
    hole[2] = hole[3] = 1;
    const auto out = harmonic_fill(f, hole);
    EXPECT_NEAR(out[2], 3.0, 1e-12);  // connected to the known pixel at x=1
    EXPECT_NEAR(out[3], 3.0, 1e-12);
}

TEST(PoissonBlend, SixteenBySixteenUnderOneSecond) {
    std::mt19937_64 rng(30);
    DepthMap a(16, 16), g(16, 16);
    std::uniform_real_distribution<double> u(1, 4);
    for (auto& v : a.values()) v = u(rng);
    for (auto& v : g.values()) v = u(rng);
    const auto t0 = std::chrono::steady_clock::now();
    poisson_blend(a, g, test::random_mask(16, 16, 0.3, rng), 10.0);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_LT(secs, 1.0);
}
