#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ri3d/codec.hpp"
#include "ri3d/error.hpp"
#include "ri3d/harmonic.hpp"
#include "ri3d/image.hpp"

namespace ri3d {

enum class OracleKind { repair, inpaint };

inline const char* to_string(OracleKind k) { return k == OracleKind::repair ? "repair" : "inpaint"; }

struct OracleRequest {
    OracleKind kind = OracleKind::repair;
    ImageRGB image;
    BinaryMask mask;  // inpaint only, 1 = hole
    std::uint64_t seed = 0;
    std::string scene_id;
};

struct OracleResponse {
    ImageRGB image;
    double latency_ms = 0;
    std::string model_fingerprint;
};

/// One oracle implementation. Transport problems are reported as
/// ErrorCode::oracle_transport (retried by the client); malformed answers as
/// ErrorCode::oracle_protocol (never retried).
class OracleBackend {
public:
    virtual ~OracleBackend() = default;
    virtual OracleResponse dispatch(const OracleRequest& req) = 0;
    virtual std::string fingerprint() const = 0;
    /// Monocular depth of an image, when the backend offers it.
    virtual std::optional<DepthMap> mono_depth(const ImageRGB&, std::uint64_t /*seed*/, const std::string& /*scene*/) {
        return std::nullopt;
    }
};

// ------------------------------------------------------------------ stubs

namespace detail {

/// Gaussian blur with weights renormalised over in-bounds taps.
inline ImageRGB gaussian_blur(const ImageRGB& img, double sigma) {
    const int r = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    for (int i = -r; i <= r; ++i) k[static_cast<std::size_t>(i + r)] = std::exp(-i * i / (2 * sigma * sigma));
    auto pass = [&](const ImageRGB& in, int ax, int ay) {
        ImageRGB out(in.width(), in.height());
        for (int y = 0; y < in.height(); ++y)
            for (int x = 0; x < in.width(); ++x) {
                Rgb acc{0, 0, 0};
                double ws = 0;
                for (int i = -r; i <= r; ++i) {
                    const int nx = x + i * ax, ny = y + i * ay;
                    if (!in.contains(nx, ny)) continue;
                    const double wt = k[static_cast<std::size_t>(i + r)];
                    ws += wt;
                    for (int c = 0; c < 3; ++c) acc[c] += wt * in(nx, ny)[c];
                }
                for (int c = 0; c < 3; ++c) out(x, y)[c] = acc[c] / ws;
            }
        return out;
    };
    return pass(pass(img, 1, 0), 0, 1);
}

}  // namespace detail

class IdentityRepairStub : public OracleBackend {
public:
    OracleResponse dispatch(const OracleRequest& req) override { return {req.image, 0, fingerprint()}; }
    std::string fingerprint() const override { return "stub:identity"; }
};

class BlurRepairStub : public OracleBackend {
public:
    explicit BlurRepairStub(double sigma = 1.0) : sigma_(sigma) {}
    OracleResponse dispatch(const OracleRequest& req) override {
        return {detail::gaussian_blur(req.image, sigma_), 0, fingerprint()};
    }
    std::string fingerprint() const override { return "stub:blur"; }

private:
    double sigma_;
};

/// Fills the hole with the per-channel harmonic interpolant of its boundary.
class HarmonicInpaintStub : public OracleBackend {
public:
    OracleResponse dispatch(const OracleRequest& req) override {
        ImageRGB out = req.image;
        for (int c = 0; c < 3; ++c) {
            ScalarImage ch(out.width(), out.height());
            for (std::size_t i = 0; i < ch.size(); ++i) ch[i] = out[i][c];
            const auto filled = harmonic_fill(ch, req.mask, 0.5);
            for (std::size_t i = 0; i < ch.size(); ++i)
                if (req.mask[i]) out[i][c] = std::clamp(filled[i], 0.0, 1.0);
        }
        return {out, 0, fingerprint()};
    }
    std::string fingerprint() const override { return "stub:harmonic"; }
};

class ConstantInpaintStub : public OracleBackend {
public:
    explicit ConstantInpaintStub(double value = 0.5) : value_(value) {}
    OracleResponse dispatch(const OracleRequest& req) override {
        ImageRGB out = req.image;
        for (std::size_t i = 0; i < out.size(); ++i)
            if (req.mask[i]) out[i] = {value_, value_, value_};
        return {out, 0, fingerprint()};
    }
    std::string fingerprint() const override { return "stub:constant"; }

private:
    double value_;
};

/// Stub backend by name: identity, blur, harmonic, constant.
inline std::shared_ptr<OracleBackend> make_stub(const std::string& name) {
    if (name == "identity") return std::make_shared<IdentityRepairStub>();
    if (name == "blur") return std::make_shared<BlurRepairStub>(1.0);
    if (name == "harmonic") return std::make_shared<HarmonicInpaintStub>();
    if (name == "constant") return std::make_shared<ConstantInpaintStub>(0.5);
    throw Error(ErrorCode::invalid_argument, "unknown stub oracle '" + name + "'");
}

// ------------------------------------------------------------------ resizing

struct ResizePlan {
    int native_width = 0, native_height = 0;
    int dispatch_width = 0, dispatch_height = 0;
    bool identity() const { return native_width == dispatch_width && native_height == dispatch_height; }
};

inline constexpr int kOracleShortSide = 512;

inline ResizePlan plan_resize(int width, int height, int short_side = kOracleShortSide) {
    if (std::min(width, height) < 64)
        throw Error(ErrorCode::invalid_argument, "oracle input too small: smallest dimension must be >= 64");
    ResizePlan p{width, height, width, height};
    const double s = static_cast<double>(short_side) / std::min(width, height);
    if (width <= height) {
        p.dispatch_width = short_side;
        p.dispatch_height = static_cast<int>(std::lround(height * s));
    } else {
        p.dispatch_height = short_side;
        p.dispatch_width = static_cast<int>(std::lround(width * s));
    }
    return p;
}

struct ResizedImage {
    ImageRGB image;
    ResizePlan plan;
};

/// Bilinear resize to the dispatch resolution (short side 512); `restore` maps an
/// oracle answer back to native resolution.
inline ResizedImage resize_roundtrip(const ImageRGB& image, int short_side = kOracleShortSide) {
    const auto plan = plan_resize(image.width(), image.height(), short_side);
    if (plan.identity()) return {image, plan};
    return {resize_bilinear(image, plan.dispatch_width, plan.dispatch_height), plan};
}

inline ImageRGB restore(const ImageRGB& dispatched, const ResizePlan& plan) {
    if (plan.identity()) return dispatched;
    return resize_bilinear(dispatched, plan.native_width, plan.native_height);
}

/// Nearest-pixel footprint of a hole at another resolution: a target pixel is a hole
/// if any source hole pixel overlaps it.
inline BinaryMask resize_mask(const BinaryMask& m, int width, int height) {
    if (m.width() == width && m.height() == height) return m;
    BinaryMask out(width, height);
    const double sx = static_cast<double>(m.width()) / width, sy = static_cast<double>(m.height()) / height;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const int x0 = static_cast<int>(std::floor(x * sx)), x1 = std::min(m.width() - 1, static_cast<int>(std::ceil((x + 1) * sx)) - 1);
            const int y0 = static_cast<int>(std::floor(y * sy)), y1 = std::min(m.height() - 1, static_cast<int>(std::ceil((y + 1) * sy)) - 1);
            bool any = false;
            for (int yy = y0; yy <= std::max(y0, y1) && !any; ++yy)
                for (int xx = x0; xx <= std::max(x0, x1) && !any; ++xx) any = m(xx, yy) != 0;
            out(x, y) = any ? 1 : 0;
        }
    return out;
}

/// Checks an answer against its request: same size, finite channels in [0,1], and for
/// inpainting every pixel outside the hole within 1/255 of the request.
inline void validate_response(const OracleRequest& req, const ImageRGB& answer) {
    if (!answer.same_shape(req.image))
        throw Error(ErrorCode::oracle_protocol, std::string(to_string(req.kind)) + " response has wrong dimensions");
    for (const auto& p : answer.values())
        for (double v : p)
            if (!(v >= -1e-9 && v <= 1 + 1e-9))
                throw Error(ErrorCode::oracle_protocol, std::string(to_string(req.kind)) + " response outside [0,1]");
    if (req.kind == OracleKind::inpaint)
        for (std::size_t i = 0; i < answer.size(); ++i) {
            if (req.mask[i]) continue;
            for (int c = 0; c < 3; ++c)
                if (std::abs(answer[i][c] - req.image[i][c]) > 1.0 / 255 + 1e-9)
                    throw Error(ErrorCode::oracle_protocol, "inpaint response modified pixels outside the hole");
        }
}

// ------------------------------------------------------------------ client

struct OracleConfig {
    int retries = 2;
    double timeout_s = 120;
    std::string scene_id = "scene";
};

struct JournalEntry {
    OracleKind kind;
    std::string request_hash;
    std::uint64_t seed;
    std::string response_hash;  // empty when the fallback was used
    bool cached = false;
    bool fallback = false;
    int attempts = 0;
};

/// Front end used by the optimizer: caching, journaling, retries and fallback on top
/// of a repair backend and an inpaint backend.
class OracleClient {
public:
    OracleClient(std::shared_ptr<OracleBackend> repair, std::shared_ptr<OracleBackend> inpaint, OracleConfig cfg = {})
        : repair_(std::move(repair)), inpaint_(std::move(inpaint)), cfg_(std::move(cfg)) {}

    ImageRGB repair(const ImageRGB& image, std::uint64_t seed) {
        OracleRequest req{OracleKind::repair, image, {}, seed, cfg_.scene_id};
        return run(*repair_, req);
    }

    /// Empty holes are a no-op (with a warning).
    ImageRGB inpaint(const ImageRGB& image, const BinaryMask& hole, std::uint64_t seed) {
        require_same_shape(image, hole, "inpaint");
        if (count(hole) == 0) {
            warn("inpaint called with an empty hole; returning the input");
            return image;
        }
        OracleRequest req{OracleKind::inpaint, image, hole, seed, cfg_.scene_id};
        return run(*inpaint_, req);
    }

    std::optional<DepthMap> mono_depth(const ImageRGB& image, std::uint64_t seed) {
        try {
            return inpaint_->mono_depth(image, seed, cfg_.scene_id);
        } catch (const Error& e) {
            warn(std::string("mono_depth unavailable: ") + e.what());
            return std::nullopt;
        }
    }

    const std::vector<JournalEntry>& journal() const { return journal_; }
    const std::vector<std::string>& warnings() const { return warnings_; }
    std::size_t fallback_count() const { return fallbacks_; }
    void clear_cache() {
        std::lock_guard lock(mutex_);
        cache_.clear();
    }
    void set_warning_sink(std::function<void(const std::string&)> sink) { sink_ = std::move(sink); }
    const OracleConfig& config() const { return cfg_; }

    static std::string request_hash(const OracleRequest& req, const std::string& fingerprint) {
        codec::Sha256 h;
        h.update(to_string(req.kind)).update(req.scene_id).update(fingerprint).update_pod(req.seed);
        h.update_pod(req.image.width()).update_pod(req.image.height());
        h.update(req.image.values().data(), req.image.size() * sizeof(Rgb));
        if (!req.mask.empty()) h.update(req.mask.values().data(), req.mask.size());
        return h.hex();
    }

    static std::string image_hash(const ImageRGB& img) {
        return codec::sha256_hex(img.values().data(), img.size() * sizeof(Rgb));
    }

private:
    ImageRGB run(OracleBackend& backend, const OracleRequest& req) {
        const std::string key = request_hash(req, backend.fingerprint());
        {
            std::lock_guard lock(mutex_);
            if (auto it = cache_.find(key); it != cache_.end()) {
                journal_.push_back({req.kind, key, req.seed, image_hash(it->second), true, false, 0});
                return it->second;
            }
        }
        std::string last_error;
        for (int attempt = 0; attempt <= std::max(0, cfg_.retries); ++attempt) {
            try {
                const auto t0 = std::chrono::steady_clock::now();
                OracleResponse res = backend.dispatch(req);
                res.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                validate_response(req, res.image);
                std::lock_guard lock(mutex_);
                cache_[key] = res.image;
                journal_.push_back({req.kind, key, req.seed, image_hash(res.image), false, false, attempt + 1});
                return res.image;
            } catch (const Error& e) {
                if (e.code() != ErrorCode::oracle_transport) throw;
                last_error = e.what();
            }
        }
        ++fallbacks_;
        warn(std::string(to_string(req.kind)) + " oracle failed after " + std::to_string(cfg_.retries + 1) +
             " attempt(s) (" + last_error + "); using the unmodified render");
        std::lock_guard lock(mutex_);
        journal_.push_back({req.kind, key, req.seed, "", false, true, cfg_.retries + 1});
        return req.image;
    }

    void warn(const std::string& msg) {
        std::lock_guard lock(mutex_);
        warnings_.push_back(msg);
        if (sink_) sink_(msg);
    }

    std::shared_ptr<OracleBackend> repair_, inpaint_;
    OracleConfig cfg_;
    std::map<std::string, ImageRGB> cache_;
    std::vector<JournalEntry> journal_;
    std::vector<std::string> warnings_;
    std::size_t fallbacks_ = 0;
    std::function<void(const std::string&)> sink_;
    std::mutex mutex_;
};

/// "stub:<repair>[+<inpaint>]" with defaults identity and harmonic. HTTP endpoints are
/// handled by make_oracle_client in oracle_http.hpp.
inline std::unique_ptr<OracleClient> make_stub_client(const std::string& spec, OracleConfig cfg = {}) {
    std::string body = spec.rfind("stub:", 0) == 0 ? spec.substr(5) : spec;
    std::string repair = body.empty() ? "identity" : body, inpaint = "harmonic";
    if (auto plus = body.find('+'); plus != std::string::npos) {
        repair = body.substr(0, plus);
        inpaint = body.substr(plus + 1);
    } else if (body == "harmonic" || body == "constant") {
        repair = "identity";
        inpaint = body;
    }
    return std::make_unique<OracleClient>(make_stub(repair), make_stub(inpaint), std::move(cfg));
}

}  // namespace ri3d
