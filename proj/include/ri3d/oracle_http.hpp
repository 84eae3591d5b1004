#pragma once

// HTTP transport for the oracle protocol:
//   POST {base}/v1/repair      {scene_id, seed, image_png_b64}
//   POST {base}/v1/inpaint     {scene_id, seed, image_png_b64, mask_png_b64}
//   POST {base}/v1/mono_depth  {scene_id, seed, image_png_b64}  (optional, answers depth_pfm_b64)
// Answers are {image_png_b64, model_fingerprint}; failures carry an HTTP status and
// {code, message}.

#include <cstdlib>
#include <memory>
#include <optional>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "ri3d/codec.hpp"
#include "ri3d/io.hpp"
#include "ri3d/oracle.hpp"

namespace ri3d {

inline constexpr const char* kOracleUrlEnv = "RI3D_ORACLE_URL";

class HttpOracle : public OracleBackend {
public:
    explicit HttpOracle(const std::string& url, double timeout_s = 120) : timeout_s_(timeout_s) {
        const auto scheme = url.find("://");
        if (scheme == std::string::npos) throw Error(ErrorCode::invalid_argument, "oracle url needs a scheme: " + url);
        const auto slash = url.find('/', scheme + 3);
        origin_ = url.substr(0, slash);
        base_ = slash == std::string::npos ? "" : url.substr(slash);
        while (!base_.empty() && base_.back() == '/') base_.pop_back();
    }

    OracleResponse dispatch(const OracleRequest& req) override {
        // Oracles run at a 512-pixel short side; the answer is mapped back afterwards.
        const auto sent = resize_roundtrip(req.image);
        OracleRequest wire = req;
        wire.image = sent.image;
        if (req.kind == OracleKind::inpaint)
            wire.mask = resize_mask(req.mask, sent.plan.dispatch_width, sent.plan.dispatch_height);

        nlohmann::json body{{"scene_id", req.scene_id},
                            {"seed", req.seed},
                            {"image_png_b64", codec::base64_encode(io::encode_png(wire.image))}};
        if (req.kind == OracleKind::inpaint) body["mask_png_b64"] = codec::base64_encode(io::encode_png(wire.mask));
        const auto reply = post(std::string("/v1/") + to_string(req.kind), body);

        if (!reply.contains("image_png_b64") || !reply["image_png_b64"].is_string())
            throw Error(ErrorCode::oracle_protocol, "oracle reply lacks image_png_b64");
        const ImageRGB answer = io::decode_png_rgb(codec::base64_decode(reply["image_png_b64"].get<std::string>()), "oracle reply");
        // 8-bit quantisation of the request itself is within the 1/255 tolerance.
        OracleRequest quantised = wire;
        quantised.image = io::decode_png_rgb(io::encode_png(wire.image));
        validate_response(quantised, answer);

        OracleResponse res;
        res.model_fingerprint = reply.value("model_fingerprint", std::string("unknown"));
        res.image = restore(answer, sent.plan);
        if (req.kind == OracleKind::inpaint)
            for (std::size_t i = 0; i < res.image.size(); ++i)
                if (!req.mask[i]) res.image[i] = req.image[i];
        for (auto& p : res.image.values())
            for (double& v : p) v = std::clamp(v, 0.0, 1.0);
        return res;
    }

    std::optional<DepthMap> mono_depth(const ImageRGB& image, std::uint64_t seed, const std::string& scene) override {
        if (mono_unsupported_) return std::nullopt;
        const auto sent = resize_roundtrip(image);
        nlohmann::json body{{"scene_id", scene}, {"seed", seed}, {"image_png_b64", codec::base64_encode(io::encode_png(sent.image))}};
        nlohmann::json reply;
        try {
            reply = post("/v1/mono_depth", body);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::oracle_protocol) mono_unsupported_ = true;
            throw;
        }
        if (!reply.contains("depth_pfm_b64")) throw Error(ErrorCode::oracle_protocol, "mono_depth reply lacks depth_pfm_b64");
        const auto bytes = codec::base64_decode(reply["depth_pfm_b64"].get<std::string>());
        const DepthMap d = io::decode_pfm<DepthTag>(bytes, "mono_depth reply");
        return resize_depth(d, image.width(), image.height());
    }

    std::string fingerprint() const override { return "http:" + origin_ + base_; }

private:
    nlohmann::json post(const std::string& path, const nlohmann::json& body) {
        httplib::Client cli(origin_);
        const auto secs = static_cast<time_t>(timeout_s_);
        const auto usecs = static_cast<time_t>((timeout_s_ - static_cast<double>(secs)) * 1e6);
        cli.set_connection_timeout(secs, usecs);
        cli.set_read_timeout(secs, usecs);
        cli.set_write_timeout(secs, usecs);
        auto res = cli.Post(base_ + path, body.dump(), "application/json");
        if (!res) throw Error(ErrorCode::oracle_transport, "oracle " + path + ": " + httplib::to_string(res.error()));
        if (res->status != 200) {
            std::string msg = "HTTP " + std::to_string(res->status);
            try {
                const auto j = nlohmann::json::parse(res->body);
                msg += " " + j.value("code", std::string()) + ": " + j.value("message", std::string());
            } catch (const nlohmann::json::exception&) {
            }
            // Server-side failures may be transient; client-side ones will not improve.
            throw Error(res->status >= 500 ? ErrorCode::oracle_transport : ErrorCode::oracle_protocol,
                        "oracle " + path + ": " + msg);
        }
        try {
            return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::oracle_protocol, "oracle " + path + ": malformed JSON: " + e.what());
        }
    }

    std::string origin_, base_;
    double timeout_s_;
    bool mono_unsupported_ = false;
};

/// Builds a client from "stub:<repair>[+<inpaint>]" or an http(s) URL. The
/// RI3D_ORACLE_URL environment variable overrides the URL of non-stub specs, and is
/// used when the spec is empty.
inline std::unique_ptr<OracleClient> make_oracle_client(const std::string& spec, OracleConfig cfg = {}) {
    const char* env = std::getenv(kOracleUrlEnv);
    if (spec.rfind("stub:", 0) == 0) return make_stub_client(spec, std::move(cfg));
    std::string url = (env && *env) ? env : spec;
    if (url.empty()) throw Error(ErrorCode::invalid_argument, "no oracle configured (use --oracle or RI3D_ORACLE_URL)");
    auto http = std::make_shared<HttpOracle>(url, cfg.timeout_s);
    return std::make_unique<OracleClient>(http, http, std::move(cfg));
}

}  // namespace ri3d
