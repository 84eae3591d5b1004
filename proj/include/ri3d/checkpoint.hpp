#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "ri3d/codec.hpp"
#include "ri3d/optimizer.hpp"

namespace ri3d {

// Layout: "RI3D" u32-version payload sha256(payload). Little-endian host order for all
// scalars; everything needed to continue a run bitwise is stored, including the novel
// view caches and the random engine.
inline constexpr char kCheckpointMagic[4] = {'R', 'I', '3', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class Writer {
public:
    template <class T>
    void put(T v) {
        static_assert(std::is_arithmetic_v<T>);
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.append(p, sizeof(T));
    }
    void put_size(std::size_t n) { put(static_cast<std::uint64_t>(n)); }
    void put(const std::string& s) {
        put_size(s.size());
        buf_.append(s);
    }
    void put(const Vec3& v) {
        for (int k = 0; k < 3; ++k) put(v[k]);
    }
    void put(const Vec2& v) {
        put(v.x());
        put(v.y());
    }
    template <class T, class Tag>
    void put(const Raster<T, Tag>& r) {
        put(static_cast<std::int32_t>(r.width()));
        put(static_cast<std::int32_t>(r.height()));
        for (const auto& v : r.values()) {
            if constexpr (std::is_same_v<T, Rgb>) {
                for (double c : v) put(c);
            } else {
                put(v);
            }
        }
    }
    void put(const Camera& c) {
        for (double v : {c.fx, c.fy, c.cx, c.cy}) put(v);
        put(static_cast<std::int32_t>(c.width));
        put(static_cast<std::int32_t>(c.height));
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) put(c.rotation(i, j));
        put(c.translation);
    }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string_view bytes) : data_(bytes) {}
    template <class T>
    T get() {
        static_assert(std::is_arithmetic_v<T>);
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::size_t get_size(std::size_t limit) {
        const auto n = get<std::uint64_t>();
        if (n > limit) fail("implausible element count");
        return static_cast<std::size_t>(n);
    }
    std::string get_string() {
        const std::size_t n = get_size(remaining());
        need(n);
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    Vec3 get_vec3() {
        Vec3 v;
        for (int k = 0; k < 3; ++k) v[k] = get<double>();
        return v;
    }
    Vec2 get_vec2() {
        const double x = get<double>();
        return Vec2(x, get<double>());
    }
    template <class R>
    R get_raster() {
        using T = typename R::value_type;
        const int w = get<std::int32_t>(), h = get<std::int32_t>();
        if (w < 0 || h < 0 || static_cast<std::size_t>(w) * static_cast<std::size_t>(h) > remaining())
            fail("bad raster size");
        R r(w, h);
        for (auto& v : r.values()) {
            if constexpr (std::is_same_v<T, Rgb>) {
                for (double& c : v) c = get<double>();
            } else {
                v = get<T>();
            }
        }
        return r;
    }
    Camera get_camera() {
        Camera c;
        c.fx = get<double>();
        c.fy = get<double>();
        c.cx = get<double>();
        c.cy = get<double>();
        c.width = get<std::int32_t>();
        c.height = get<std::int32_t>();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) c.rotation(i, j) = get<double>();
        c.translation = get_vec3();
        return c;
    }
    std::size_t remaining() const { return data_.size() - pos_; }
    [[noreturn]] static void fail(const std::string& why) {
        throw Error(ErrorCode::checkpoint, "corrupt checkpoint: " + why);
    }

private:
    void need(std::size_t n) const {
        if (remaining() < n) fail("truncated");
    }
    std::string_view data_;
    std::size_t pos_ = 0;
};

inline void put_cloud(Writer& w, const GaussianCloud& g) {
    w.put_size(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        w.put(g.position[i]);
        w.put(g.opacity_logit[i]);
        w.put(g.scale[i]);
        for (int k = 0; k < 4; ++k) w.put(g.rotation[i][k]);
        for (double c : g.color[i]) w.put(c);
        w.put(static_cast<std::uint8_t>(g.source[i].kind));
        w.put(g.source[i].view);
        w.put(g.source[i].pixel);
    }
}

inline GaussianCloud get_cloud(Reader& r) {
    GaussianCloud g;
    const std::size_t n = r.get_size(r.remaining());
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 p = r.get_vec3();
        const double logit = r.get<double>();
        const Vec3 s = r.get_vec3();
        Quat q;
        for (int k = 0; k < 4; ++k) q[k] = r.get<double>();
        Rgb c;
        for (double& v : c) v = r.get<double>();
        SourceTag tag;
        const auto kind = r.get<std::uint8_t>();
        if (kind > static_cast<std::uint8_t>(GaussianSource::inpaint_spawned)) Reader::fail("bad source tag");
        tag.kind = static_cast<GaussianSource>(kind);
        tag.view = r.get<std::int32_t>();
        tag.pixel = r.get<std::int32_t>();
        g.position.push_back(p);
        g.opacity_logit.push_back(logit);
        g.scale.push_back(s);
        g.rotation.push_back(q);
        g.color.push_back(c);
        g.source.push_back(tag);
    }
    return g;
}

inline void put_path(Writer& w, const CameraPath& p) {
    for (const Vec3* v : {&p.origin, &p.u, &p.v, &p.normal, &p.up}) w.put(*v);
    for (const Vec2* v : {&p.center, &p.e1, &p.e2}) w.put(*v);
    w.put(p.a);
    w.put(p.b);
    w.put(p.phase);
    w.put(static_cast<std::uint8_t>(p.circle));
}

inline CameraPath get_path(Reader& r) {
    CameraPath p;
    for (Vec3* v : {&p.origin, &p.u, &p.v, &p.normal, &p.up}) *v = r.get_vec3();
    for (Vec2* v : {&p.center, &p.e1, &p.e2}) *v = r.get_vec2();
    p.a = r.get<double>();
    p.b = r.get<double>();
    p.phase = r.get<double>();
    p.circle = r.get<std::uint8_t>() != 0;
    return p;
}

}  // namespace detail

inline std::string serialize_state(const OptimState& s) {
    detail::Writer w;
    w.put(s.seed);
    w.put(static_cast<std::int32_t>(s.stage));
    w.put(static_cast<std::int32_t>(s.iteration));
    w.put(static_cast<std::uint8_t>(s.stage_done));
    std::ostringstream rng;
    rng << s.rng;
    w.put(rng.str());

    detail::put_cloud(w, s.cloud);
    w.put_size(s.moments.m.size());
    for (std::size_t i = 0; i < s.moments.m.size(); ++i) {
        for (double v : s.moments.m[i]) w.put(v);
        for (double v : s.moments.v[i]) w.put(v);
        w.put(s.moments.steps[i]);
    }

    w.put_size(s.history.size());
    for (const auto& h : s.history) {
        w.put(static_cast<std::int32_t>(h.stage));
        w.put(static_cast<std::int32_t>(h.iteration));
        w.put(h.total);
        w.put_size(h.terms.size());
        for (const auto& [k, v] : h.terms) {
            w.put(k);
            w.put(v);
        }
    }

    detail::put_path(w, s.novel.path);
    w.put_size(s.novel.views.size());
    for (const auto& v : s.novel.views) {
        w.put(v.camera);
        w.put(v.weight);
        w.put(v.target);
        w.put(v.visible);
        w.put(v.background);
        w.put(v.mono);
        w.put(v.inpainted);
        w.put(v.hole);
    }

    w.put_size(s.cycles.size());
    for (const auto& c : s.cycles) {
        w.put(static_cast<std::int32_t>(c.iteration));
        w.put_size(c.hole_pixels);
        w.put_size(c.spawned);
        w.put_size(c.inpainted.size());
        for (int k : c.inpainted) w.put(static_cast<std::int32_t>(k));
    }

    std::string out(kCheckpointMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    out.append(reinterpret_cast<const char*>(&version), sizeof version);
    out += w.bytes();
    out += codec::sha256_hex(w.bytes());
    return out;
}

inline OptimState deserialize_state(std::string_view bytes) {
    constexpr std::size_t head = 4 + sizeof(std::uint32_t), tail = 64;
    if (bytes.size() < head + tail || bytes.substr(0, 4) != std::string_view(kCheckpointMagic, 4))
        throw Error(ErrorCode::checkpoint, "not an ri3d checkpoint");
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, sizeof version);
    if (version != kCheckpointVersion)
        throw Error(ErrorCode::checkpoint, "unsupported checkpoint version " + std::to_string(version));
    const std::string_view payload = bytes.substr(head, bytes.size() - head - tail);
    if (codec::sha256_hex(payload.data(), payload.size()) != bytes.substr(bytes.size() - tail))
        throw Error(ErrorCode::checkpoint, "checkpoint checksum mismatch");

    detail::Reader r(payload);
    OptimState s;
    s.seed = r.get<std::uint64_t>();
    s.stage = r.get<std::int32_t>();
    s.iteration = r.get<std::int32_t>();
    s.stage_done = r.get<std::uint8_t>() != 0;
    std::istringstream rng(r.get_string());
    rng >> s.rng;
    if (!rng) detail::Reader::fail("bad random engine state");

    s.cloud = detail::get_cloud(r);
    const std::size_t nm = r.get_size(r.remaining());
    s.moments.resize(nm);
    for (std::size_t i = 0; i < nm; ++i) {
        for (double& v : s.moments.m[i]) v = r.get<double>();
        for (double& v : s.moments.v[i]) v = r.get<double>();
        s.moments.steps[i] = r.get<std::int64_t>();
    }

    const std::size_t nh = r.get_size(r.remaining());
    for (std::size_t i = 0; i < nh; ++i) {
        LossRecord h;
        h.stage = r.get<std::int32_t>();
        h.iteration = r.get<std::int32_t>();
        h.total = r.get<double>();
        const std::size_t nt = r.get_size(r.remaining());
        for (std::size_t k = 0; k < nt; ++k) {
            std::string key = r.get_string();
            h.terms[std::move(key)] = r.get<double>();
        }
        s.history.push_back(std::move(h));
    }

    s.novel.path = detail::get_path(r);
    const std::size_t nv = r.get_size(r.remaining());
    for (std::size_t i = 0; i < nv; ++i) {
        NovelView v;
        v.camera = r.get_camera();
        v.weight = r.get<double>();
        v.target = r.get_raster<ImageRGB>();
        v.visible = r.get_raster<BinaryMask>();
        v.background = r.get_raster<BinaryMask>();
        v.mono = r.get_raster<DepthMap>();
        v.inpainted = r.get_raster<ImageRGB>();
        v.hole = r.get_raster<BinaryMask>();
        s.novel.views.push_back(std::move(v));
    }

    const std::size_t nc = r.get_size(r.remaining());
    for (std::size_t i = 0; i < nc; ++i) {
        CycleRecord c;
        c.iteration = r.get<std::int32_t>();
        c.hole_pixels = r.get<std::uint64_t>();
        c.spawned = r.get<std::uint64_t>();
        const std::size_t nk = r.get_size(r.remaining());
        for (std::size_t k = 0; k < nk; ++k) c.inpainted.push_back(r.get<std::int32_t>());
        s.cycles.push_back(std::move(c));
    }
    if (r.remaining() != 0) detail::Reader::fail("trailing bytes");
    if (s.moments.m.size() != s.cloud.size()) detail::Reader::fail("moment count does not match cloud");
    validate(s.cloud);
    return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const OptimState& s) {
    const std::string bytes = serialize_state(s);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw Error(ErrorCode::checkpoint, "cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline OptimState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::checkpoint, "cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return deserialize_state(ss.str());
    } catch (const Error& e) {
        throw Error(ErrorCode::checkpoint, path.string() + ": " + e.what());
    }
}

/// Loss history as CSV: stage, iteration, total, then one column per term name (sorted;
/// empty where a step had no such term). Values use %.17g so the text round-trips.
inline std::string loss_csv(const std::vector<LossRecord>& history) {
    std::set<std::string> names;
    for (const auto& h : history)
        for (const auto& [k, v] : h.terms) names.insert(k);
    std::string out = "stage,iteration,total";
    for (const auto& n : names) out += "," + n;
    out += "\n";
    char buf[64];
    for (const auto& h : history) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.17g", h.stage, h.iteration, h.total);
        out += buf;
        for (const auto& n : names) {
            out += ",";
            if (auto it = h.terms.find(n); it != h.terms.end()) {
                std::snprintf(buf, sizeof buf, "%.17g", it->second);
                out += buf;
            }
        }
        out += "\n";
    }
    return out;
}

}  // namespace ri3d
