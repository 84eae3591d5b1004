#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ri3d/camera.hpp"
#include "ri3d/image.hpp"
#include "ri3d/io.hpp"

namespace ri3d {

/// One input view with every raster resampled to the camera's resolution.
struct ViewData {
    Camera camera;
    ImageRGB image;
    DepthMap depth_mvs;
    ConfidenceMap confidence;
    DepthMap depth_mono;
};

struct SceneDataset {
    std::vector<ViewData> views;
    std::size_t size() const { return views.size(); }
    std::vector<Camera> cameras() const {
        std::vector<Camera> out;
        for (const auto& v : views) out.push_back(v.camera);
        return out;
    }
};

namespace detail {

inline nlohmann::json camera_to_json(const Camera& c) {
    nlohmann::json j;
    j["fx"] = c.fx;
    j["fy"] = c.fy;
    j["cx"] = c.cx;
    j["cy"] = c.cy;
    j["width"] = c.width;
    j["height"] = c.height;
    std::vector<double> r(9), t(3);
    for (int i = 0; i < 9; ++i) r[i] = c.rotation(i / 3, i % 3);
    for (int i = 0; i < 3; ++i) t[i] = c.translation[i];
    j["R"] = r;
    j["t"] = t;
    return j;
}

inline Camera camera_from_json(const nlohmann::json& j, const std::string& file, int index) {
    const std::string at = "cameras[" + std::to_string(index) + "].";
    auto need = [&](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) throw LoadError(file, at + key, "missing");
        return j.at(key);
    };
    Camera c;
    try {
        c.fx = need("fx").get<double>();
        c.fy = need("fy").get<double>();
        c.cx = need("cx").get<double>();
        c.cy = need("cy").get<double>();
        c.width = need("width").get<int>();
        c.height = need("height").get<int>();
        const auto r = need("R").get<std::vector<double>>();
        const auto t = need("t").get<std::vector<double>>();
        if (r.size() != 9) throw LoadError(file, at + "R", "expected 9 values");
        if (t.size() != 3) throw LoadError(file, at + "t", "expected 3 values");
        for (int i = 0; i < 9; ++i) c.rotation(i / 3, i % 3) = r[i];
        for (int i = 0; i < 3; ++i) c.translation[i] = t[i];
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(file, at, e.what());
    }
    try {
        validate(c);
    } catch (const Error& e) {
        throw LoadError(file, at + (std::string(e.what()).find("rotation") != std::string::npos ? "R" : "intrinsics"),
                        e.what());
    }
    return c;
}

/// Smaller rasters with the image's exact aspect ratio are upsampled; anything else is a mismatch.
template <class Tag>
Raster<double, Tag> conform(const Raster<double, Tag>& r, const Camera& cam, const std::string& file,
                            const std::string& field) {
    if (r.width() == cam.width && r.height() == cam.height) return r;
    const bool same_aspect = static_cast<long>(r.width()) * cam.height == static_cast<long>(r.height()) * cam.width;
    if (!same_aspect || r.width() > cam.width)
        throw LoadError(file, field,
                        "dimension mismatch: raster " + std::to_string(r.width()) + "x" + std::to_string(r.height()) +
                            " vs image " + std::to_string(cam.width) + "x" + std::to_string(cam.height));
    if constexpr (std::is_same_v<Tag, DepthTag>) {
        return resize_depth(r, cam.width, cam.height);
    } else {
        return resize_bilinear(r, cam.width, cam.height);
    }
}

}  // namespace detail

inline std::vector<Camera> read_cameras(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw LoadError(file.string(), "file", "missing");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(file.string(), "json", e.what());
    }
    if (!j.is_array()) throw LoadError(file.string(), "cameras", "expected a JSON array");
    std::vector<Camera> cams;
    for (std::size_t i = 0; i < j.size(); ++i) cams.push_back(detail::camera_from_json(j[i], file.string(), static_cast<int>(i)));
    return cams;
}

inline void write_cameras(const std::filesystem::path& file, const std::vector<Camera>& cams) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& c : cams) j.push_back(detail::camera_to_json(c));
    std::ofstream out(file);
    out << j.dump(2) << "\n";
}

inline SceneDataset load_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    const auto cams = read_cameras(root / "cameras.json");
    if (cams.size() < 2)
        throw LoadError((root / "cameras.json").string(), "cameras", "at least 2 views are required");
    SceneDataset ds;
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const int idx = static_cast<int>(i);
        const fs::path img = root / io::view_name("images/view_%03d.png", idx);
        const fs::path dm = root / io::view_name("depth_mvs/view_%03d.pfm", idx);
        const fs::path cf = root / io::view_name("conf_mvs/view_%03d.pfm", idx);
        const fs::path mo = root / io::view_name("depth_mono/view_%03d.pfm", idx);
        for (const auto& p : {img, dm, cf, mo})
            if (!fs::exists(p)) throw LoadError(p.string(), "file", "missing");

        ViewData v;
        v.camera = cams[i];
        v.image = io::read_png_rgb(img);
        if (v.image.width() != v.camera.width || v.image.height() != v.camera.height)
            throw LoadError(img.string(), "image", "dimension mismatch with cameras.json for view " + std::to_string(idx));
        v.depth_mvs = detail::conform(io::read_pfm<DepthTag>(dm), v.camera, dm.string(),
                                      "depth_mvs (view " + std::to_string(idx) + ")");
        v.confidence = detail::conform(io::read_pfm<ConfidenceTag>(cf), v.camera, cf.string(),
                                       "conf_mvs (view " + std::to_string(idx) + ")");
        v.depth_mono = detail::conform(io::read_pfm<DepthTag>(mo), v.camera, mo.string(),
                                       "depth_mono (view " + std::to_string(idx) + ")");
        for (std::size_t k = 0; k < v.confidence.size(); ++k)
            if (!(v.confidence[k] >= 0.0 && v.confidence[k] <= 1.0))
                throw LoadError(cf.string(), "confidence", "value outside [0,1] at pixel " + std::to_string(k));
        for (const DepthMap* d : {&v.depth_mvs, &v.depth_mono}) {
            std::size_t valid = 0;
            for (double z : d->values()) {
                if (std::isnan(z) || std::isinf(z))
                    throw LoadError((d == &v.depth_mvs ? dm : mo).string(), "depth", "non-finite depth value");
                valid += valid_depth(z) ? 1 : 0;
            }
            if (valid == 0)
                throw LoadError((d == &v.depth_mvs ? dm : mo).string(), "depth", "no positive depth values");
        }
        ds.views.push_back(std::move(v));
    }
    return ds;
}

/// Writes the dataset in the on-disk layout read by load_dataset.
inline void write_dataset(const std::filesystem::path& root, const SceneDataset& ds) {
    namespace fs = std::filesystem;
    for (const char* sub : {"images", "depth_mvs", "conf_mvs", "depth_mono"}) fs::create_directories(root / sub);
    write_cameras(root / "cameras.json", ds.cameras());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int idx = static_cast<int>(i);
        const auto& v = ds.views[i];
        io::write_png(root / io::view_name("images/view_%03d.png", idx), v.image);
        io::write_pfm(root / io::view_name("depth_mvs/view_%03d.pfm", idx), v.depth_mvs);
        io::write_pfm(root / io::view_name("conf_mvs/view_%03d.pfm", idx), v.confidence);
        io::write_pfm(root / io::view_name("depth_mono/view_%03d.pfm", idx), v.depth_mono);
    }
}

}  // namespace ri3d
