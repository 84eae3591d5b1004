// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>

#include "fusion_oracle.hpp"
#include "gradient_check.hpp"
#include "render_oracle.hpp"
#include "ri3d/checkpoint.hpp"
#include "ri3d/depth_fusion.hpp"
#include "ri3d/losses.hpp"
#include "ri3d/optimizer.hpp"
#include "ri3d/oracle.hpp"
#include "ri3d/renderer.hpp"
#include "ri3d/synthetic.hpp"
#include "test_util.hpp"

using namespace ri3d;

namespace {

int failures = 0;

void report(bool ok, const char* name, const std::string& detail) {
    std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void poisson_fusion() {
    std::mt19937_64 rng(2024);
    double worst = 0, slowest = 0;
    int fixtures = 0;
    for (int t = 0; t < 40; ++t, ++fixtures) {
        auto f = test::random_fixture(rng);
        if (t == 0) {  // always include the largest admissible size
            std::mt19937_64 r2(1);
            std::uniform_real_distribution<double> u(0.5, 5.0);
            f = {DepthMap(16, 16), DepthMap(16, 16), test::random_mask(16, 16, 0.4, r2), 3.0};
            for (auto& v : f.anchor.values()) v = u(r2);
            for (auto& v : f.guide.values()) v = u(r2);
            f.mask[0] = 1;
        }
        const auto t0 = std::chrono::steady_clock::now();
        const auto d = poisson_blend(f.anchor, f.guide, f.mask, f.lambda).depth;
        slowest = std::max(slowest, seconds_since(t0));
        worst = std::max(worst, test::max_abs_diff(d, test::dense_blend(f.anchor, f.guide, f.mask, f.lambda)));
    }
    report(worst <= 1e-8 && slowest < 1.0, "poisson_fusion",
           fmt("%.0f fixtures, max abs error %.3g (tol 1e-8), slowest %.4f s (limit 1 s)", fixtures, worst, slowest));
}

void blend_minimizer() {
    std::mt19937_64 rng(77);
    std::normal_distribution<double> n;
    int increased = 0, total = 0;
    double smallest_gain = INFINITY;
    for (int t = 0; t < 10; ++t) {
        const auto f = test::random_fixture(rng);
        const auto d = poisson_blend(f.anchor, f.guide, f.mask, f.lambda).depth;
        const double e0 = test::blend_objective(d, f.anchor, f.guide, f.mask, f.lambda);
        for (int k = 0; k < 100; ++k, ++total) {
            Eigen::VectorXd dir(static_cast<Eigen::Index>(d.size()));
            for (auto& v : dir) v = n(rng);
            dir *= 1e-3 / dir.norm();
            DepthMap p = d;
            for (std::size_t i = 0; i < d.size(); ++i) p[i] += dir[static_cast<Eigen::Index>(i)];
            const double gain = test::blend_objective(p, f.anchor, f.guide, f.mask, f.lambda) - e0;
            smallest_gain = std::min(smallest_gain, gain);
            if (gain > 0) ++increased;
        }
    }
    report(increased == total, "blend_minimizer",
           fmt("%.0f/%.0f perturbations increase the objective, smallest increase %.3g", increased, total,
               smallest_gain));
}

void renderer_equivalence() {
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<int> count(1, 50);
    std::uniform_real_distribution<double> u(0, 1);
    double worst = 0;
    bool permutation_ok = true;
    for (int scene = 0; scene < 20; ++scene) {
        const auto cloud = test::random_cloud(static_cast<std::size_t>(count(rng)), rng, 0.99);
        const auto cam = test::test_camera(32, 24, 28);
        const Rgb bg{u(rng), u(rng), u(rng)};
        const auto out = render(cloud, cam, bg);
        const auto ref = test::brute_force_render(cloud, cam, bg);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            worst = std::max(worst, std::abs(out.color[i][0] - static_cast<double>(ref[i].r)));
            worst = std::max(worst, std::abs(out.color[i][1] - static_cast<double>(ref[i].g)));
            worst = std::max(worst, std::abs(out.color[i][2] - static_cast<double>(ref[i].b)));
            worst = std::max(worst, std::abs(out.alpha[i] - static_cast<double>(ref[i].alpha)));
        }
        std::vector<std::size_t> order(cloud.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const auto shuffled = render(test::permuted(cloud, order), cam, bg);
        permutation_ok = permutation_ok && shuffled.color == out.color && shuffled.depth == out.depth &&
                         shuffled.alpha == out.alpha;
    }
    report(worst <= 1e-6 && permutation_ok, "renderer_equivalence",
           fmt("20 scenes, max channel error %.3g (tol 1e-6), permutation ", worst) +
               (permutation_ok ? "bitwise identical" : "differs"));
}

void gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(404);
    double render_worst = 0;
    int checked = 0;
    for (int trial = 0; trial < 4; ++trial) {
        const auto cloud = test::random_cloud(8, rng);
        const auto cam = test::test_camera(24, 20, 24);
        const auto rep = test::check_render_gradients(cloud, cam, {0.2, 0.3, 0.1}, test::random_upstream(24, 20, rng));
        render_worst = std::max(render_worst, rep.worst_relative);
        checked += rep.checked;
    }

    const auto a = test::random_image(16, 16, rng), b = test::random_image(16, 16, rng);
    const auto m = test::random_mask(16, 16, 0.7, rng);
    const double l1 = test::fd_image_check(a, loss_l1(a, b, m).grad,
                                           [&](const ImageRGB& x) { return loss_l1(x, b, m).value; }, true);
    const double ssim = std::max(
        test::fd_image_check(a, loss_ssim(a, b).grad, [&](const ImageRGB& x) { return loss_ssim(x, b).value; }),
        test::fd_image_check(a, loss_ssim(a, b, m).grad, [&](const ImageRGB& x) { return loss_ssim(x, b, m).value; }));
    const double perceptual =
        test::fd_image_check(a, loss_perceptual_proxy(a, b, m).grad,
                             [&](const ImageRGB& x) { return loss_perceptual_proxy(x, b, m).value; }, true);

    std::uniform_real_distribution<double> du(1.0, 5.0);
    DepthMap r(16, 16), mono(16, 16);
    for (auto& v : r.values()) v = du(rng);
    for (auto& v : mono.values()) v = du(rng);
    const auto as_depth = [](const ScalarImage& x) {
        DepthMap d(x.width(), x.height());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i];
        return d;
    };
    ScalarImage x0(16, 16), g(16, 16);
    const auto pl = loss_depth_pearson(r, mono, m);
    for (std::size_t i = 0; i < r.size(); ++i) {
        x0[i] = r[i];
        g[i] = pl.grad[i];
    }
    const double pearson = test::fd_scalar_check(
        x0, g, [&](const ScalarImage& x) { return loss_depth_pearson(as_depth(x), mono, m).value; });

    ScalarImage alpha(16, 16);
    std::uniform_real_distribution<double> u01(0, 1);
    for (auto& v : alpha.values()) v = u01(rng);
    const auto vis = test::random_mask(16, 16, 0.5, rng), bg = test::random_mask(16, 16, 0.5, rng);
    const double opacity = test::fd_scalar_check(alpha, opacity_suppression(alpha, vis, bg).grad,
                                                 [&](const ScalarImage& x) { return opacity_suppression(x, vis, bg).value; });

    const double elapsed = seconds_since(t0);
    const double worst = std::max({render_worst, l1, ssim, perceptual, pearson, opacity});
    report(worst <= 1e-3 && elapsed < 60.0, "gradient_suite",
           fmt("render %.3g over %.0f params, l1 %.3g, ssim %.3g", render_worst, checked, l1, ssim) +
               fmt(", perceptual %.3g, pearson %.3g, opacity %.3g", perceptual, pearson, opacity) +
               fmt(" (tol 1e-3), %.1f s (limit 60 s)", elapsed));
}

void pearson_affine() {
    std::mt19937_64 rng(55);
    std::uniform_real_distribution<double> la(std::log(1e-3), std::log(1e3)), u01(0, 1), du(1.0, 5.0);
    DepthMap d(24, 24);
    for (auto& v : d.values()) v = du(rng);
    double worst = 0;
    int skipped = 0;
    for (int t = 0; t < 50; ++t) {
        // b >= -0.9a keeps every depth positive, hence valid.
        const double a = std::exp(la(rng)), b = -0.9 * a + u01(rng) * (5 + 0.9 * a);
        DepthMap ad = d;
        for (auto& v : ad.values()) v = a * v + b;
        const auto l = loss_depth_pearson(ad, d);
        skipped += l.skipped;
        worst = std::max(worst, l.value);
    }
    report(worst < 1e-8 && skipped == 0, "pearson_affine_invariance",
           fmt("50 draws, max loss %.3g (tol 1e-8), %.0f skipped", worst, skipped));
}

double mean_held_out_psnr(const SyntheticScene& scene, const GaussianCloud& cloud, std::vector<double>* per_view) {
    double sum = 0;
    for (const auto& cam : scene.held_out) {
        const double p = metric_psnr(render(cloud, cam, {0, 0, 0}).color, render(scene.truth, cam, {0, 0, 0}).color);
        if (per_view) per_view->push_back(p);
        sum += p;
    }
    return sum / static_cast<double>(scene.held_out.size());
}

std::string list(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : " ") + fmt("%.2f", x);
    return s;
}

BinaryMask hole_of(const RenderOutput& r, const RunOptions& o) {
    return mask_and(mask_not(visibility_mask(r.alpha, o.visibility_threshold, o.closing_radius)),
                    detail::background_of(r.depth, o.background_tau));
}

void end_to_end() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto scene = make_synthetic_scene();
    const FusionConfig fc;
    const auto fused = fuse_all(scene.dataset, fc);
    std::vector<DepthMap> depth;
    for (const auto& f : fused) depth.push_back(f.depth);
    const auto init = initialize_cloud(scene.dataset, depth);
    const auto cams = scene.dataset.cameras();
    const auto pts = foreground_points(scene.dataset, fused, fc);

    Schedule s;
    s.stage1_iters = 500;
    s.stage1_refresh = 100;
    s.stage2_iters = 500;
    s.stage2_cycle = 100;
    s.inpaint_stop_iter = std::min(s.inpaint_stop_iter, 500);
    const auto novel1 = fit_novel_cameras(cams, pts, s.stage1_views);
    const auto novel2 = fit_novel_cameras(cams, pts, s.stage2_views);
    RunOptions o;
    o.steps.position_extent = scene_extent(cams);
    auto oracle = make_stub_client("stub:identity+harmonic");

    std::vector<double> init_views, final_views;
    const double before = mean_held_out_psnr(scene, init, &init_views);
    OptimState st = run_stage1(make_state(init, 0), scene.dataset, novel1, *oracle, s, {}, o);

    std::vector<BinaryMask> holes;
    std::size_t hole_px = 0;
    for (const auto& v : novel2.views) {
        holes.push_back(hole_of(render(st.cloud, v.camera, o.background), o));
        hole_px += count(holes.back());
    }
    st = run_stage2(std::move(st), scene.dataset, novel2, *oracle, s, {}, o);
    std::size_t covered = 0;
    for (std::size_t j = 0; j < novel2.views.size(); ++j) {
        const auto r = render(st.cloud, novel2.views[j].camera, o.background);
        for (std::size_t i = 0; i < r.alpha.size(); ++i)
            if (holes[j][i] && r.alpha[i] >= 0.5) ++covered;
    }
    const double after = mean_held_out_psnr(scene, st.cloud, &final_views);
    const double coverage = hole_px ? static_cast<double>(covered) / static_cast<double>(hole_px) : 1.0;
    const double elapsed = seconds_since(t0);
    report(after >= before + 5.0 && coverage >= 0.95 && elapsed < 300.0, "synthetic_end_to_end",
           fmt("held-out PSNR %.2f -> %.2f dB (need +5), hole coverage %.4f over %.0f px (need 0.95)", before, after,
               coverage, static_cast<double>(hole_px)) +
               fmt(", %.1f s (limit 300 s); init views [", elapsed) + list(init_views) + "], final views [" +
               list(final_views) + "]");
}

void determinism() {
    SyntheticConfig c;
    c.width = c.height = 32;
    c.focal = 28;
    const auto scene = make_synthetic_scene(c);
    const FusionConfig fc;
    const auto fused = fuse_all(scene.dataset, fc);
    std::vector<DepthMap> depth;
    for (const auto& f : fused) depth.push_back(f.depth);
    const auto init = initialize_cloud(scene.dataset, depth);
    const auto pts = foreground_points(scene.dataset, fused, fc);

    Schedule s;
    s.stage1_iters = 60;
    s.stage1_refresh = 20;
    s.stage1_views = 4;
    s.stage2_iters = 60;
    s.stage2_cycle = 20;
    s.stage2_views = 4;
    s.inpaint_stride = 2;
    s.inpaint_stop_iter = 60;
    const auto n1 = fit_novel_cameras(scene.dataset.cameras(), pts, s.stage1_views);
    const auto n2 = fit_novel_cameras(scene.dataset.cameras(), pts, s.stage2_views);
    RunOptions o;
    o.steps.position_extent = scene_extent(scene.dataset.cameras());

    auto straight = [&] {
        auto oracle = make_stub_client("stub:identity+harmonic");
        OptimState st = run_stage1(make_state(init, 9), scene.dataset, n1, *oracle, s, {}, o);
        return run_stage2(std::move(st), scene.dataset, n2, *oracle, s, {}, o);
    };
    const OptimState a = straight(), b = straight();
    const bool same_runs = serialize_state(a) == serialize_state(b) && loss_csv(a.history) == loss_csv(b.history);

    test::TempDir dir("ri3d_accept");
    RunOptions paused = o;
    paused.stop_at = 30;
    auto oracle = make_stub_client("stub:identity+harmonic");
    save_checkpoint(dir.path() / "a.ckpt", run_stage1(make_state(init, 9), scene.dataset, n1, *oracle, s, {}, paused));
    auto fresh = make_stub_client("stub:identity+harmonic");
    OptimState st = run_stage1(load_checkpoint(dir.path() / "a.ckpt"), scene.dataset, n1, *fresh, s, {}, o);
    paused.stop_at = 35;
    save_checkpoint(dir.path() / "b.ckpt", run_stage2(std::move(st), scene.dataset, n2, *fresh, s, {}, paused));
    auto third = make_stub_client("stub:identity+harmonic");
    st = run_stage2(load_checkpoint(dir.path() / "b.ckpt"), scene.dataset, n2, *third, s, {}, o);
    const bool resume_ok = serialize_state(st) == serialize_state(a) && loss_csv(st.history) == loss_csv(a.history);

    report(same_runs && resume_ok, "determinism",
           std::string("repeat run ") + (same_runs ? "bitwise identical" : "differs") + ", resume at 30/35 " +
               (resume_ok ? "bitwise identical" : "differs") + " to the straight run");
}

void loo_pairs() {
    const auto scene = make_synthetic_scene();
    const auto fused = fuse_all(scene.dataset, FusionConfig{});
    std::vector<DepthMap> depth;
    for (const auto& f : fused) depth.push_back(f.depth);
    Schedule s;
    s.loo_pretrain_iters = 100;
    s.loo_total_iters = 300;
    s.snapshot_iters = {100, 200, 300};
    RunOptions o;
    o.steps.position_extent = scene_extent(scene.dataset.cameras());
    const LooResult r = generate_loo_pairs(scene.dataset, depth, s, {}, 0, o);

    bool clean_ok = true, monotone = true;
    std::string psnr;
    std::vector<double> last(scene.dataset.views.size(), -INFINITY);
    for (const auto& p : r.pairs) {
        const auto v = static_cast<std::size_t>(p.view);
        clean_ok = clean_ok && p.clean == scene.dataset.views[v].image;
        const double q = metric_psnr(p.corrupt, p.clean);
        monotone = monotone && q >= last[v];
        last[v] = q;
        psnr += fmt(" v%.0f@%.0f=%.2f", p.view, p.iteration, q);
    }
    std::size_t before = 0, leaks = 0, reintroduced = 0;
    for (const auto& e : r.audit) {
        if (e.iteration < s.loo_pretrain_iters) {
            ++before;
            if (e.view == e.held_out) ++leaks;
        } else if (e.view == e.held_out) {
            ++reintroduced;
        }
    }
    const std::size_t expected_before = scene.dataset.views.size() * static_cast<std::size_t>(s.loo_pretrain_iters);
    const bool audit_ok = leaks == 0 && before == expected_before && reintroduced > 0;
    report(r.pairs.size() == 9 && clean_ok && audit_ok && monotone, "loo_pairs",
           fmt("%.0f pairs (need 9), audit: %.0f pre-reintroduction steps, %.0f held-out leaks, %.0f reintroduced steps",
               r.pairs.size(), before, leaks, reintroduced) +
               (monotone ? ", PSNR non-decreasing:" : ", PSNR decreases:") + psnr);
}

}  // namespace

int main() {
    const auto t0 = std::chrono::steady_clock::now();
    poisson_fusion();
    blend_minimizer();
    renderer_equivalence();
    gradient_suite();
    pearson_affine();
    end_to_end();
    determinism();
    loo_pairs();
    std::printf("%d criteria failed, %.1f s\n", failures, seconds_since(t0));
    return failures ? 1 : 0;
}
