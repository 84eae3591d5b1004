// Command-line driver for the sparse-view reconstruction pipeline.
//
//   ri3d synth      write a synthetic scene (dataset + held-out cameras and images)
//   ri3d fuse       fused depth and background masks per view
//   ri3d init       Gaussian cloud from the fused depth
//   ri3d optimize   stage 1 (repair) or stage 2 (inpaint)
//   ri3d render     render a checkpoint along the fitted path or given cameras
//   ri3d eval       PSNR / SSIM of a render directory against a reference directory
//   ri3d loo-pairs  leave-one-out corrupted/clean training pairs for the repair oracle

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ri3d/ri3d.hpp"

namespace fs = std::filesystem;
using namespace ri3d;

namespace {

enum Exit { ok = 0, usage = 1, ingestion = 2, pipeline_order = 3, evaluation = 4, oracle = 5 };

int exit_code(ErrorCode c) {
    switch (c) {
        case ErrorCode::load:
        case ErrorCode::invalid_depth:
        case ErrorCode::checkpoint:
        case ErrorCode::alignment_failed:
        case ErrorCode::unconstrained:
        case ErrorCode::fusion:
            return ingestion;
        case ErrorCode::pipeline_order:
            return pipeline_order;
        case ErrorCode::evaluation:
            return evaluation;
        case ErrorCode::oracle_transport:
        case ErrorCode::oracle_protocol:
            return oracle;
        default:
            return usage;
    }
}

struct Globals {
    std::string config;
    std::string dataset;
    std::string out;
    std::string oracle;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    bool force = false;
};

RunConfig effective_config(const Globals& g) {
    RunConfig c = g.config.empty() ? RunConfig{} : load_config(g.config);
    for (const auto& kv : g.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw Error(ErrorCode::invalid_argument, "--set expects section.key=value: " + kv);
        set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!g.dataset.empty()) c.dataset = g.dataset;
    if (!g.out.empty()) c.out = g.out;
    if (!g.oracle.empty()) c.oracle = g.oracle;
    if (g.seed) c.seed = *g.seed;
    validate(c);
    return c;
}

SceneDataset dataset_of(const RunConfig& c) {
    if (c.dataset.empty()) throw Error(ErrorCode::invalid_argument, "no dataset given (--dataset or run.dataset)");
    return load_dataset(c.dataset);
}

void refuse_overwrite(const fs::path& p, bool force) {
    if (fs::exists(p) && !force)
        throw Error(ErrorCode::invalid_argument, p.string() + " already exists; pass --force to overwrite");
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error(ErrorCode::invalid_argument, "cannot write " + p.string());
    f << text;
}

fs::path fused_path(const RunConfig& c, int i) { return c.out / io::view_name("depth_fused/view_%03d.pfm", i); }
fs::path mask_path(const RunConfig& c, int i) { return c.out / io::view_name("mask_bg/view_%03d.png", i); }

/// Fused depth and background masks written by `fuse`.
void read_fused(const RunConfig& c, const SceneDataset& ds, std::vector<DepthMap>& depth,
                std::vector<BinaryMask>& bg) {
    for (int i = 0; i < static_cast<int>(ds.size()); ++i) {
        if (!fs::exists(fused_path(c, i)) || !fs::exists(mask_path(c, i)))
            throw Error(ErrorCode::pipeline_order, "fused depth required: run `ri3d fuse` first");
        depth.push_back(io::read_pfm<DepthTag>(fused_path(c, i)));
        bg.push_back(io::read_png_mask(mask_path(c, i)));
        const auto& cam = ds.views[static_cast<std::size_t>(i)].camera;
        if (depth.back().width() != cam.width || depth.back().height() != cam.height ||
            bg.back().width() != cam.width || bg.back().height() != cam.height)
            throw LoadError(fused_path(c, i).string(), "depth_fused", "size does not match the view");
    }
}

std::vector<Vec3> foreground_of(const RunConfig& c, const SceneDataset& ds) {
    std::vector<DepthMap> depth;
    std::vector<BinaryMask> bg;
    read_fused(c, ds, depth, bg);
    return foreground_points(ds, depth, bg, c.fusion);
}

OptimState require_checkpoint(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw Error(ErrorCode::pipeline_order, what + " required: " + p.string() + " not found");
    return load_checkpoint(p);
}

// ------------------------------------------------------------------ synth

int cmd_synth(const Globals& g, SyntheticConfig sc) {
    const fs::path root = g.out.empty() ? fs::path("synthetic") : fs::path(g.out);
    refuse_overwrite(root / "cameras.json", g.force);
    if (g.seed) sc.seed = *g.seed;
    const SyntheticScene scene = make_synthetic_scene(sc);
    write_dataset(root, scene.dataset);
    fs::create_directories(root / "held_out/images");
    write_cameras(root / "held_out/cameras.json", scene.held_out);
    for (std::size_t i = 0; i < scene.held_out.size(); ++i)
        io::write_png(root / "held_out" / io::view_name("images/view_%03d.png", static_cast<int>(i)),
                      render(scene.truth, scene.held_out[i], {0, 0, 0}).color);
    std::printf("wrote %zu views and %zu held-out views to %s\n", scene.dataset.size(), scene.held_out.size(),
                root.string().c_str());
    return ok;
}

// ------------------------------------------------------------------ fuse

int cmd_fuse(const Globals& g) {
    const RunConfig c = effective_config(g);
    const SceneDataset ds = dataset_of(c);
    refuse_overwrite(c.out / "depth_fused", g.force);
    refuse_overwrite(c.out / "mask_bg", g.force);
    fs::create_directories(c.out / "depth_fused");
    fs::create_directories(c.out / "mask_bg");
    for (int i = 0; i < static_cast<int>(ds.size()); ++i) {
        const FusedDepth f = fuse_view(ds.views[static_cast<std::size_t>(i)], c.fusion);
        io::write_pfm(fused_path(c, i), f.depth);
        const BinaryMask bg = fused_background(f, c.fusion);
        io::write_png(mask_path(c, i), bg);
        std::printf("view %03d: solver iterations %d, residual %.3e, background %zu px\n", i, f.solver.iterations,
                    f.solver.relative_residual, count(bg));
    }
    write_text(c.out / "config.ini", dump_config(c));
    return ok;
}

// ------------------------------------------------------------------ init

int cmd_init(const Globals& g) {
    const RunConfig c = effective_config(g);
    const SceneDataset ds = dataset_of(c);
    refuse_overwrite(c.out / "init.ckpt", g.force);
    std::vector<DepthMap> depth;
    std::vector<BinaryMask> bg;
    read_fused(c, ds, depth, bg);
    const OptimState st = make_state(initialize_cloud(ds, depth), c.seed);
    save_checkpoint(c.out / "init.ckpt", st);
    std::printf("initialised %zu Gaussians from %zu views\n", st.cloud.size(), ds.size());
    return ok;
}

// ------------------------------------------------------------------ optimize

int cmd_optimize(const Globals& g, int stage, int stop_at) {
    const RunConfig c = effective_config(g);
    const SceneDataset ds = dataset_of(c);
    const fs::path target = c.out / ("stage" + std::to_string(stage) + ".ckpt");
    const fs::path source = stage == 1 ? c.out / "init.ckpt" : c.out / "stage1.ckpt";

    std::optional<OptimState> resumed;
    if (fs::exists(target) && !g.force) {
        OptimState s = load_checkpoint(target);
        if (s.stage == stage && s.stage_done)
            throw Error(ErrorCode::invalid_argument,
                        target.string() + " is already complete; pass --force to rerun the stage");
        resumed = std::move(s);
    }
    OptimState st;
    if (resumed) {
        st = std::move(*resumed);
    } else if (stage == 1) {
        st = require_checkpoint(source, "init checkpoint");
    } else {
        if (!fs::exists(source)) throw Error(ErrorCode::pipeline_order, "stage 1 checkpoint required");
        st = load_checkpoint(source);
        if (st.stage != 1 || !st.stage_done) throw Error(ErrorCode::pipeline_order, "stage 1 checkpoint required");
    }

    auto oracle_client = make_oracle_client(c.oracle, c.oracle_client);
    RunOptions o = run_options(c, ds.cameras());
    o.stop_at = stop_at;
    o.on_warning = [](const std::string& m) { std::fprintf(stderr, "warning: %s\n", m.c_str()); };
    o.on_abort = [&](const OptimState& s) {
        save_checkpoint(c.out / ("stage" + std::to_string(stage) + "_abort.ckpt"), s);
    };
    fs::create_directories(c.out / "preview");
    o.on_iteration = [&](const OptimState& s) {
        if (c.preview_every <= 0 || s.iteration % c.preview_every) return;
        char name[64];
        std::snprintf(name, sizeof name, "stage%d_%06d", stage, s.iteration);
        io::write_png(c.out / "preview" / (std::string(name) + "_input.png"),
                      render(s.cloud, ds.views.front().camera, o.background, o.render).color);
        if (!s.novel.views.empty())
            io::write_png(c.out / "preview" / (std::string(name) + "_novel.png"),
                          render(s.cloud, s.novel.views.front().camera, o.background, o.render).color);
    };

    NovelCameraSet novel;
    const bool fresh = st.stage == stage - 1;
    if (fresh)
        novel = fit_novel_cameras(ds.cameras(), foreground_of(c, ds),
                                  stage == 1 ? c.schedule.stage1_views : c.schedule.stage2_views);
    st = stage == 1 ? run_stage1(std::move(st), ds, novel, *oracle_client, c.schedule, c.weights, o)
                    : run_stage2(std::move(st), ds, novel, *oracle_client, c.schedule, c.weights, o);

    save_checkpoint(target, st);
    std::vector<LossRecord> rows;
    for (const auto& r : st.history)
        if (r.stage == stage) rows.push_back(r);
    write_text(c.out / ("loss_stage" + std::to_string(stage) + ".csv"), loss_csv(rows));
    write_text(c.out / "config.ini", dump_config(c));
    std::printf("stage %d: %s at iteration %d, %zu Gaussians", stage, st.stage_done ? "done" : "paused",
                st.iteration, st.cloud.size());
    if (!rows.empty()) std::printf(", last loss %.6f", rows.back().total);
    std::printf("\n");
    if (stage == 2)
        for (const auto& cy : st.cycles)
            std::printf("  cycle at %d: %zu hole px, %zu spawned\n", cy.iteration, cy.hole_pixels, cy.spawned);
    return ok;
}

// ------------------------------------------------------------------ render

int cmd_render(const Globals& g, std::string checkpoint, std::string cameras) {
    const RunConfig c = effective_config(g);
    if (checkpoint.empty()) {
        for (const char* name : {"stage2.ckpt", "stage1.ckpt", "init.ckpt"})
            if (fs::exists(c.out / name)) {
                checkpoint = (c.out / name).string();
                break;
            }
        if (checkpoint.empty()) throw Error(ErrorCode::pipeline_order, "no checkpoint found in " + c.out.string());
    }
    const OptimState st = load_checkpoint(checkpoint);
    if (cameras.empty()) cameras = c.render_cameras.string();

    std::vector<Camera> cams;
    if (!cameras.empty()) {
        cams = read_cameras(cameras);
    } else {
        const SceneDataset ds = dataset_of(c);
        const auto fg = foreground_of(c, ds);
        Vec3 target = Vec3::Zero();
        for (const auto& p : fg) target += p;
        target /= static_cast<double>(fg.size());
        cams = sample_path(fit_camera_path(ds.cameras()), c.render_frames, target, ds.views.front().camera);
    }
    const fs::path dir = c.out / "renders";
    refuse_overwrite(dir, g.force);
    fs::create_directories(dir / "images");
    write_cameras(dir / "cameras.json", cams);
    for (std::size_t i = 0; i < cams.size(); ++i)
        io::write_png(dir / io::view_name("images/view_%03d.png", static_cast<int>(i)),
                      render(st.cloud, cams[i], {0, 0, 0}).color);
    std::printf("rendered %zu views of %zu Gaussians to %s\n", cams.size(), st.cloud.size(), dir.string().c_str());
    return ok;
}

// ------------------------------------------------------------------ eval

std::map<std::string, fs::path> png_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error(ErrorCode::evaluation, "not a directory: " + dir.string());
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out[e.path().filename().string()] = e.path();
    return out;
}

int cmd_eval(const Globals& g, const std::string& renders, const std::string& reference) {
    const auto a = png_files(renders), b = png_files(reference);
    std::set<std::string> only;
    for (const auto& [k, _] : a)
        if (!b.count(k)) only.insert(k);
    for (const auto& [k, _] : b)
        if (!a.count(k)) only.insert(k);
    if (!only.empty()) throw Error(ErrorCode::evaluation, "render and reference sets differ at " + *only.begin());
    if (a.empty()) throw Error(ErrorCode::evaluation, "no PNG images to evaluate in " + renders);

    std::string csv = "view,psnr,ssim\n";
    double sp = 0, ss = 0;
    char line[256];
    for (const auto& [name, path] : a) {
        const ImageRGB x = io::read_png_rgb(path), y = io::read_png_rgb(b.at(name));
        if (x.width() != y.width() || x.height() != y.height())
            throw Error(ErrorCode::evaluation, "size mismatch for " + name);
        const double p = metric_psnr(x, y), s = metric_ssim(x, y);
        sp += p;
        ss += s;
        std::snprintf(line, sizeof line, "%s,%.4f,%.6f\n", name.c_str(), p, s);
        csv += line;
        std::printf("%-24s psnr %6.2f  ssim %.4f\n", name.c_str(), p, s);
    }
    const double n = static_cast<double>(a.size());
    std::snprintf(line, sizeof line, "mean,%.4f,%.6f\n", sp / n, ss / n);
    csv += line;
    std::printf("%-24s psnr %6.2f  ssim %.4f\n", "mean", sp / n, ss / n);
    const fs::path out = g.out.empty() ? fs::path(renders) / "metrics.csv" : fs::path(g.out) / "metrics.csv";
    fs::create_directories(out.parent_path());
    write_text(out, csv);
    return ok;
}

// ------------------------------------------------------------------ loo-pairs

int cmd_loo(const Globals& g) {
    const RunConfig c = effective_config(g);
    const SceneDataset ds = dataset_of(c);
    std::vector<DepthMap> depth;
    std::vector<BinaryMask> bg;
    read_fused(c, ds, depth, bg);
    const fs::path dir = c.out / "loo";
    refuse_overwrite(dir, g.force);
    RunOptions o = run_options(c, ds.cameras());
    o.on_warning = [](const std::string& m) { std::fprintf(stderr, "warning: %s\n", m.c_str()); };
    const LooResult r = generate_loo_pairs(ds, depth, c.schedule, c.weights, c.seed, o);
    fs::create_directories(dir);
    for (const auto& p : r.pairs) {
        char name[64];
        std::snprintf(name, sizeof name, "pair_v%03d_t%06d.json", p.view, p.iteration);
        const nlohmann::json j = {{"view", p.view},
                                  {"iteration", p.iteration},
                                  {"corrupt_png", codec::base64_encode(io::encode_png(p.corrupt))},
                                  {"clean_png", codec::base64_encode(io::encode_png(p.clean))}};
        write_text(dir / name, j.dump() + "\n");
        std::printf("view %03d iteration %6d: psnr %.2f\n", p.view, p.iteration, metric_psnr(p.corrupt, p.clean));
    }
    std::string audit = "held_out,iteration,view\n";
    for (const auto& e : r.audit)
        audit += std::to_string(e.held_out) + "," + std::to_string(e.iteration) + "," + std::to_string(e.view) + "\n";
    write_text(dir / "audit.csv", audit);
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RI3D sparse-view Gaussian splatting pipeline"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "INI configuration file")->check(CLI::ExistingFile);
    app.add_option("--dataset", g.dataset, "dataset root (overrides run.dataset)");
    app.add_option("--out", g.out, "output directory (overrides run.out)");
    app.add_option("--oracle", g.oracle, "oracle spec: stub:<repair>+<inpaint> or an http(s) URL");
    app.add_option("--seed", g.seed, "random seed");
    app.add_option("--set", g.overrides, "override a config field, section.key=value");
    app.add_flag("--force", g.force, "overwrite existing outputs");

    SyntheticConfig sc;
    auto* synth = app.add_subcommand("synth", "write a synthetic scene");
    synth->add_option("--views", sc.views, "input views")->check(CLI::Range(2, 64));
    synth->add_option("--width", sc.width)->check(CLI::Range(8, 4096));
    synth->add_option("--height", sc.height)->check(CLI::Range(8, 4096));
    synth->add_option("--focal", sc.focal, "focal length in pixels")->check(CLI::PositiveNumber);

    app.add_subcommand("fuse", "fuse MVS and monocular depth per view");
    app.add_subcommand("init", "initialise the Gaussian cloud from fused depth");

    int stage = 1, stop_at = -1;
    auto* opt = app.add_subcommand("optimize", "run an optimisation stage");
    opt->add_option("--stage", stage, "1 = repair, 2 = inpaint")->required()->check(CLI::IsMember({1, 2}));
    opt->add_option("--stop-at", stop_at, "pause at this iteration; rerunning resumes");

    std::string checkpoint, cameras;
    auto* rend = app.add_subcommand("render", "render a checkpoint");
    rend->add_option("--checkpoint", checkpoint, "checkpoint (default: latest in --out)");
    rend->add_option("--cameras", cameras, "cameras.json (default: the fitted path)");

    std::string renders, reference;
    auto* ev = app.add_subcommand("eval", "compare rendered images with references");
    ev->add_option("--renders", renders)->required();
    ev->add_option("--reference", reference)->required();

    app.add_subcommand("loo-pairs", "generate leave-one-out repair pairs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? ok : usage;
    }

    try {
        if (*synth) return cmd_synth(g, sc);
        if (app.got_subcommand("fuse")) return cmd_fuse(g);
        if (app.got_subcommand("init")) return cmd_init(g);
        if (*opt) return cmd_optimize(g, stage, stop_at);
        if (*rend) return cmd_render(g, checkpoint, cameras);
        if (*ev) return cmd_eval(g, renders, reference);
        if (app.got_subcommand("loo-pairs")) return cmd_loo(g);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return usage;
    }
    return usage;
}
