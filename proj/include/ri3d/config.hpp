#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ri3d/depth_fusion.hpp"
#include "ri3d/losses.hpp"
#include "ri3d/optimizer.hpp"
#include "ri3d/oracle.hpp"

namespace ri3d {

/// Everything a pipeline run depends on. Read from an INI file of `[section]` blocks
/// with `key = value` lines; command-line flags override individual fields afterwards.
struct RunConfig {
    std::filesystem::path dataset;
    std::filesystem::path out = "ri3d_out";
    std::string oracle = "stub:identity+harmonic";
    std::uint64_t seed = 0;
    FusionConfig fusion;
    LossWeights weights;
    Schedule schedule;
    OracleConfig oracle_client;
    StepSizes steps;  // position_extent is derived from the cameras unless set
    bool fixed_extent = false;
    double visibility_threshold = 0.5;
    int closing_radius = 3;
    int anchor_band = 4;
    int preview_every = 500;
    std::filesystem::path render_cameras;  // empty: sample the fitted path
    int render_frames = 30;
};

namespace detail {

// One table drives parsing and dumping so the two cannot drift apart.
struct ConfigField {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
T parse_value(const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        T v{};
        if constexpr (std::is_same_v<T, int>) v = std::stoi(text, &used);
        else if constexpr (std::is_same_v<T, std::uint64_t>) v = std::stoull(text, &used);
        else v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorCode::invalid_argument, "config: bad value for " + key + ": '" + text + "'");
    }
}

/// Shortest text that parses back to the same double.
inline std::string format_value(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

template <class T>
ConfigField number_field(const std::string& key, T RunConfig::*member) {
    return {[key, member](RunConfig& c, const std::string& s) { c.*member = parse_value<T>(key, s); },
            [member](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>) return format_value(c.*member);
                else return std::to_string(c.*member);
            }};
}

template <class S, class T>
ConfigField nested_field(const std::string& key, S RunConfig::*outer, T S::*inner) {
    return {[key, outer, inner](RunConfig& c, const std::string& s) { (c.*outer).*inner = parse_value<T>(key, s); },
            [outer, inner](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>) return format_value((c.*outer).*inner);
                else return std::to_string((c.*outer).*inner);
            }};
}

inline ConfigField path_field(std::filesystem::path RunConfig::*member) {
    return {[member](RunConfig& c, const std::string& s) { c.*member = s; },
            [member](const RunConfig& c) { return (c.*member).string(); }};
}

inline const std::map<std::string, ConfigField>& config_fields() {
    static const std::map<std::string, ConfigField> fields = [] {
        std::map<std::string, ConfigField> f;
        f["run.dataset"] = path_field(&RunConfig::dataset);
        f["run.out"] = path_field(&RunConfig::out);
        f["run.oracle"] = {[](RunConfig& c, const std::string& s) { c.oracle = s; },
                           [](const RunConfig& c) { return c.oracle; }};
        f["run.seed"] = number_field("run.seed", &RunConfig::seed);

        f["fusion.lambda"] = nested_field("fusion.lambda", &RunConfig::fusion, &FusionConfig::lambda);
        f["fusion.confidence_threshold"] =
            nested_field("fusion.confidence_threshold", &RunConfig::fusion, &FusionConfig::confidence_threshold);
        f["fusion.knot_count"] = nested_field("fusion.knot_count", &RunConfig::fusion, &FusionConfig::knot_count);
        f["fusion.tolerance"] = nested_field("fusion.tolerance", &RunConfig::fusion, &FusionConfig::tolerance);
        f["fusion.max_iterations"] =
            nested_field("fusion.max_iterations", &RunConfig::fusion, &FusionConfig::max_iterations);
        f["fusion.background_tau"] =
            nested_field("fusion.background_tau", &RunConfig::fusion, &FusionConfig::background_tau);
        f["fusion.bilateral_spatial"] = {
            [](RunConfig& c, const std::string& s) {
                c.fusion.bilateral.spatial = parse_value<double>("fusion.bilateral_spatial", s);
            },
            [](const RunConfig& c) { return format_value(c.fusion.bilateral.spatial); }};
        f["fusion.bilateral_range"] = {
            [](RunConfig& c, const std::string& s) {
                c.fusion.bilateral.range = parse_value<double>("fusion.bilateral_range", s);
            },
            [](const RunConfig& c) { return format_value(c.fusion.bilateral.range); }};

        f["weights.l1"] = nested_field("weights.l1", &RunConfig::weights, &LossWeights::l1);
        f["weights.ssim"] = nested_field("weights.ssim", &RunConfig::weights, &LossWeights::ssim);
        f["weights.perceptual"] = nested_field("weights.perceptual", &RunConfig::weights, &LossWeights::perceptual);
        f["weights.depth_pearson"] =
            nested_field("weights.depth_pearson", &RunConfig::weights, &LossWeights::depth_pearson);
        f["weights.opacity"] = nested_field("weights.opacity", &RunConfig::weights, &LossWeights::opacity);
        f["weights.inpaint"] = nested_field("weights.inpaint", &RunConfig::weights, &LossWeights::inpaint);

        using S = Schedule;
        f["schedule.stage1_iters"] = nested_field("schedule.stage1_iters", &RunConfig::schedule, &S::stage1_iters);
        f["schedule.stage1_refresh"] =
            nested_field("schedule.stage1_refresh", &RunConfig::schedule, &S::stage1_refresh);
        f["schedule.stage1_views"] = nested_field("schedule.stage1_views", &RunConfig::schedule, &S::stage1_views);
        f["schedule.stage2_iters"] = nested_field("schedule.stage2_iters", &RunConfig::schedule, &S::stage2_iters);
        f["schedule.stage2_cycle"] = nested_field("schedule.stage2_cycle", &RunConfig::schedule, &S::stage2_cycle);
        f["schedule.stage2_views"] = nested_field("schedule.stage2_views", &RunConfig::schedule, &S::stage2_views);
        f["schedule.inpaint_stride"] =
            nested_field("schedule.inpaint_stride", &RunConfig::schedule, &S::inpaint_stride);
        f["schedule.inpaint_stop_iter"] =
            nested_field("schedule.inpaint_stop_iter", &RunConfig::schedule, &S::inpaint_stop_iter);
        f["schedule.loo_pretrain_iters"] =
            nested_field("schedule.loo_pretrain_iters", &RunConfig::schedule, &S::loo_pretrain_iters);
        f["schedule.loo_total_iters"] =
            nested_field("schedule.loo_total_iters", &RunConfig::schedule, &S::loo_total_iters);
        f["schedule.snapshot_iters"] = {
            [](RunConfig& c, const std::string& s) {
                c.schedule.snapshot_iters.clear();
                std::size_t start = 0;
                while (start <= s.size()) {
                    const std::size_t comma = std::min(s.find(',', start), s.size());
                    std::string item = s.substr(start, comma - start);
                    item.erase(0, item.find_first_not_of(' '));
                    item.erase(item.find_last_not_of(' ') + 1);
                    if (!item.empty()) c.schedule.snapshot_iters.push_back(parse_value<int>("schedule.snapshot_iters", item));
                    start = comma + 1;
                }
            },
            [](const RunConfig& c) {
                std::string out;
                for (int t : c.schedule.snapshot_iters) out += (out.empty() ? "" : ",") + std::to_string(t);
                return out;
            }};

        f["optimizer.position_init"] =
            nested_field("optimizer.position_init", &RunConfig::steps, &StepSizes::position_init);
        f["optimizer.position_final"] =
            nested_field("optimizer.position_final", &RunConfig::steps, &StepSizes::position_final);
        f["optimizer.position_extent"] = {
            [](RunConfig& c, const std::string& s) {
                c.steps.position_extent = parse_value<double>("optimizer.position_extent", s);
                c.fixed_extent = true;
            },
            [](const RunConfig& c) { return c.fixed_extent ? format_value(c.steps.position_extent) : "auto"; }};
        f["optimizer.opacity"] = nested_field("optimizer.opacity", &RunConfig::steps, &StepSizes::opacity);
        f["optimizer.scale"] = nested_field("optimizer.scale", &RunConfig::steps, &StepSizes::scale);
        f["optimizer.rotation"] = nested_field("optimizer.rotation", &RunConfig::steps, &StepSizes::rotation);
        f["optimizer.color"] = nested_field("optimizer.color", &RunConfig::steps, &StepSizes::color);
        f["optimizer.visibility_threshold"] =
            number_field("optimizer.visibility_threshold", &RunConfig::visibility_threshold);
        f["optimizer.closing_radius"] = number_field("optimizer.closing_radius", &RunConfig::closing_radius);
        f["optimizer.anchor_band"] = number_field("optimizer.anchor_band", &RunConfig::anchor_band);
        f["optimizer.preview_every"] = number_field("optimizer.preview_every", &RunConfig::preview_every);

        f["oracle.retries"] = nested_field("oracle.retries", &RunConfig::oracle_client, &OracleConfig::retries);
        f["oracle.timeout_s"] = nested_field("oracle.timeout_s", &RunConfig::oracle_client, &OracleConfig::timeout_s);
        f["oracle.scene_id"] = {[](RunConfig& c, const std::string& s) { c.oracle_client.scene_id = s; },
                                [](const RunConfig& c) { return c.oracle_client.scene_id; }};

        f["render.cameras"] = path_field(&RunConfig::render_cameras);
        f["render.frames"] = number_field("render.frames", &RunConfig::render_frames);
        return f;
    }();
    return fields;
}

}  // namespace detail

/// Sets one `section.key` field from its text form.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
    const auto& fields = detail::config_fields();
    const auto it = fields.find(key);
    if (it == fields.end()) throw Error(ErrorCode::invalid_argument, "config: unknown key " + key);
    it->second.set(c, value);
}

inline void validate(const RunConfig& c) {
    validate(c.schedule);
    validate(c.weights);
    if (c.render_frames < 1) throw Error(ErrorCode::invalid_argument, "config: render.frames must be >= 1");
    if (c.preview_every < 0) throw Error(ErrorCode::invalid_argument, "config: optimizer.preview_every must be >= 0");
    if (c.closing_radius < 0 || c.anchor_band < 0)
        throw Error(ErrorCode::invalid_argument, "config: radii must be >= 0");
    if (!(c.visibility_threshold > 0 && c.visibility_threshold < 1))
        throw Error(ErrorCode::invalid_argument, "config: visibility_threshold must be in (0, 1)");
}

/// Parses INI text. Relative dataset/output paths are resolved against `base`.
inline RunConfig parse_config(const std::string& text, const std::filesystem::path& base = {}) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw Error(ErrorCode::invalid_argument, std::string("config: ") + e.what());
    }
    RunConfig c;
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw Error(ErrorCode::invalid_argument, "config: key outside a section: " + section);
        for (const auto& [key, value] : body) set_config_value(c, section + "." + key, value.data());
    }
    for (auto* p : {&c.dataset, &c.out, &c.render_cameras})
        if (!p->empty() && p->is_relative() && !base.empty()) *p = base / *p;
    validate(c);
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::invalid_argument, "config: cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path.parent_path());
}

/// INI text that parses back to the same configuration.
inline std::string dump_config(const RunConfig& c) {
    std::string out, section;
    for (const auto& [key, field] : detail::config_fields()) {
        const std::string s = key.substr(0, key.find('.'));
        if (s != section) {
            out += (out.empty() ? "[" : "\n[") + s + "]\n";
            section = s;
        }
        const std::string v = field.get(c);
        if (key == "optimizer.position_extent" && v == "auto") continue;
        out += key.substr(key.find('.') + 1) + " = " + v + "\n";
    }
    return out;
}

/// Options for the optimisation stages derived from the configuration.
inline RunOptions run_options(const RunConfig& c, const std::vector<Camera>& cams) {
    RunOptions o;
    o.steps = c.steps;
    if (!c.fixed_extent) o.steps.position_extent = scene_extent(cams);
    o.visibility_threshold = c.visibility_threshold;
    o.closing_radius = c.closing_radius;
    o.background_tau = c.fusion.background_tau;
    o.fusion = c.fusion;
    o.anchor_band = c.anchor_band;
    return o;
}

}  // namespace ri3d
