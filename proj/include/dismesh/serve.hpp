#pragma once

#include <charconv>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "model.hpp"
#include "tasks.hpp"

// After Eigen: glibc's resolv.h, pulled in by httplib, defines a `_res`
// macro that collides with Eigen parameter names.
#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

namespace dismesh {

inline constexpr int kApiVersion = 1;
inline constexpr std::size_t kDefaultMaxBody = 8u << 20;
inline constexpr std::size_t kMaxSamplesPerRequest = 256;

struct ServeOptions {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t max_body = kDefaultMaxBody;
    std::vector<std::string> cors_origins{"*"};
};

struct ApiResponse {
    int status = 200;
    std::string body;
};

/// Request handling independent of the transport. Every response body is a
/// JSON object carrying `model_hash`; errors add `error` and, for bad input,
/// the offending `field`.
class InferenceApi {
public:
    InferenceApi(std::shared_ptr<const TrainedModel> model, std::size_t max_body = kDefaultMaxBody)
        : model_(std::move(model)), hash_(model_->model_hash()), max_body_(max_body) {}

    const std::string& model_hash() const { return hash_; }
    std::size_t max_body() const { return max_body_; }

    ApiResponse handle(std::string_view method, std::string_view path, std::string_view body,
                       const std::map<std::string, std::string>& query = {}) const {
        try {
            if (body.size() > max_body_)
                return error(413, "payload of " + std::to_string(body.size()) + " bytes exceeds the cap of " +
                                      std::to_string(max_body_));
            if (path == "/meta") return method == "GET" ? meta() : not_allowed("GET");
            if (path == "/sample") return method == "GET" ? sample(query) : not_allowed("GET");
            if (path == "/encode") return method == "POST" ? encode(parse(body)) : not_allowed("POST");
            if (path == "/decode") return method == "POST" ? decode(parse(body)) : not_allowed("POST");
            if (path == "/transfer") return method == "POST" ? transfer(parse(body)) : not_allowed("POST");
            return error(404, "no endpoint " + std::string(path));
        } catch (const FieldError& e) {
            return error(400, e.what(), e.field);
        } catch (const ValidationError& e) {
            return error(400, e.what());
        } catch (const std::exception& e) {
            spdlog::error("request {} {} failed: {}", method, path, e.what());
            return error(500, "internal error");
        }
    }

    ApiResponse meta() const {
        auto j = stamp();
        nlohmann::json faces = nlohmann::json::array();
        for (const auto& f : model_->template_mesh().faces) faces.push_back({f[0], f[1], f[2]});
        j["faces"] = std::move(faces);
        j["N"] = model_->template_mesh().vertex_count();
        j["d_s"] = model_->config().d_shape;
        j["d_p"] = model_->config().d_pose;
        j["version"] = kApiVersion;
        return {200, j.dump()};
    }

private:
    struct FieldError : ValidationError {
        FieldError(std::string f, const std::string& msg) : ValidationError(msg), field(std::move(f)) {}
        std::string field;
    };

    nlohmann::json stamp() const { return {{"model_hash", hash_}}; }

    ApiResponse error(int status, const std::string& message, const std::string& field = {}) const {
        auto j = stamp();
        j["error"] = message;
        if (!field.empty()) j["field"] = field;
        return {status, j.dump()};
    }

    ApiResponse not_allowed(const char* allowed) const { return error(405, std::string("method not allowed; use ") + allowed); }

    static nlohmann::json parse(std::string_view body) {
        auto j = nlohmann::json::parse(body, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded()) throw FieldError("body", "body is not valid JSON");
        if (!j.is_object()) throw FieldError("body", "body must be a JSON object");
        return j;
    }

    static void only_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed) {
        for (const auto& [key, _] : j.items())
            if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
                throw FieldError(key, "unknown field '" + key + "'");
    }

    static std::vector<double> numbers(const nlohmann::json& j, const std::string& field) {
        if (!j.contains(field)) throw FieldError(field, "missing field '" + field + "'");
        const auto& v = j.at(field);
        if (!v.is_array()) throw FieldError(field, "'" + field + "' must be an array of numbers");
        std::vector<double> out;
        out.reserve(v.size());
        for (const auto& x : v) {
            if (!x.is_number()) throw FieldError(field, "'" + field + "' must contain only numbers");
            out.push_back(x.get<double>());
        }
        return out;
    }

    TriangleMesh wire_mesh(const nlohmann::json& j, const std::string& field) const {
        const auto flat = numbers(j, field);
        const auto n = model_->template_mesh().vertex_count();
        if (flat.size() != 3 * n)
            throw FieldError(field, "'" + field + "' has " + std::to_string(flat.size()) + " values, expected " +
                                        std::to_string(3 * n) + " (3 x " + std::to_string(n) + " vertices)");
        TriangleMesh m{std::vector<Vec3>(n), model_->template_mesh().faces};
        for (std::size_t i = 0; i < n; ++i) m.vertices[i] = {flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]};
        return m;
    }

    static nlohmann::json to_wire(const TriangleMesh& m) {
        std::vector<double> flat;
        flat.reserve(3 * m.vertex_count());
        for (const auto& v : m.vertices) flat.insert(flat.end(), v.begin(), v.end());
        return flat;
    }

    ApiResponse encode(const nlohmann::json& j) const {
        only_keys(j, {"vertices", "model_hash"});
        const auto [mu, logvar] = model_->posterior(wire_mesh(j, "vertices"));
        auto out = stamp();
        out["mu"] = mu;
        out["logvar"] = logvar;
        return {200, out.dump()};
    }

    ApiResponse decode(const nlohmann::json& j) const {
        only_keys(j, {"z_shape", "z_pose", "model_hash"});
        LatentCode z{numbers(j, "z_shape"), numbers(j, "z_pose")};
        if (z.z_shape.size() != model_->config().d_shape)
            throw FieldError("z_shape", "'z_shape' has length " + std::to_string(z.z_shape.size()) + ", expected " +
                                            std::to_string(model_->config().d_shape));
        if (z.z_pose.size() != model_->config().d_pose)
            throw FieldError("z_pose", "'z_pose' has length " + std::to_string(z.z_pose.size()) + ", expected " +
                                           std::to_string(model_->config().d_pose));
        auto out = stamp();
        out["vertices"] = to_wire(model_->decode(z));
        return {200, out.dump()};
    }

    ApiResponse transfer(const nlohmann::json& j) const {
        only_keys(j, {"shape_from", "pose_from", "model_hash"});
        const auto shape = wire_mesh(j, "shape_from");
        const auto pose = wire_mesh(j, "pose_from");
        auto out = stamp();
        out["vertices"] = to_wire(dismesh::transfer(*model_, shape, pose));
        return {200, out.dump()};
    }

    static std::uint64_t query_uint(const std::map<std::string, std::string>& q, const std::string& key,
                                    std::uint64_t fallback) {
        auto it = q.find(key);
        if (it == q.end()) return fallback;
        std::uint64_t v = 0;
        const auto& s = it->second;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
            throw FieldError(key, "query parameter '" + key + "' must be a non-negative integer");
        return v;
    }

    ApiResponse sample(const std::map<std::string, std::string>& q) const {
        const auto n = query_uint(q, "n", 1);
        const auto seed = query_uint(q, "seed", 0);
        if (n < 1 || n > kMaxSamplesPerRequest)
            throw FieldError("n", "query parameter 'n' must be in [1, " + std::to_string(kMaxSamplesPerRequest) + "]");
        auto out = stamp();
        nlohmann::json samples = nlohmann::json::array();
        for (std::size_t k = 0; k < n; ++k) samples.push_back(to_wire(model_->decode(prior_code(model_->config(), seed, k))));
        out["samples"] = std::move(samples);
        out["seed"] = seed;
        return {200, out.dump()};
    }

    std::shared_ptr<const TrainedModel> model_;
    std::string hash_;
    std::size_t max_body_;
};

/// Routes every endpoint of `api` on `server`, with CORS and a JSON body for
/// transport-level errors (oversized payloads, unknown paths).
inline void mount(httplib::Server& server, std::shared_ptr<const InferenceApi> api, const ServeOptions& opt) {
    server.set_payload_max_length(opt.max_body);
    auto allow_origin = [origins = opt.cors_origins](const httplib::Request& req, httplib::Response& res) {
        const auto origin = req.get_header_value("Origin");
        for (const auto& o : origins)
            if (o == "*" || o == origin) {
                res.set_header("Access-Control-Allow-Origin", o == "*" ? "*" : origin);
                if (o != "*") res.set_header("Vary", "Origin");
                return;
            }
    };
    auto route = [api, allow_origin](const httplib::Request& req, httplib::Response& res) {
        std::map<std::string, std::string> query;
        for (const auto& [k, v] : req.params) query[k] = v;
        const auto r = api->handle(req.method, req.path, req.body, query);
        res.status = r.status;
        res.set_content(r.body, "application/json");
        allow_origin(req, res);
    };
    for (const char* path : {"/meta", "/sample"}) server.Get(path, route);
    for (const char* path : {"/encode", "/decode", "/transfer"}) server.Post(path, route);
    server.Options(R"(/.*)", [allow_origin](const httplib::Request& req, httplib::Response& res) {
        allow_origin(req, res);
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });
    server.set_error_handler([api, allow_origin](const httplib::Request& req, httplib::Response& res) {
        if (!res.body.empty()) return;
        std::string message = "request failed";
        if (res.status == 413) message = "payload exceeds the cap of " + std::to_string(api->max_body()) + " bytes";
        else if (res.status == 404) message = "no endpoint " + req.path;
        else if (res.status == 405) message = "method not allowed";
        nlohmann::json j{{"model_hash", api->model_hash()}, {"error", message}};
        res.set_content(j.dump(), "application/json");
        allow_origin(req, res);
    });
    server.set_exception_handler([api](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
        nlohmann::json j{{"model_hash", api->model_hash()}, {"error", "internal error"}};
        res.status = 500;
        res.set_content(j.dump(), "application/json");
    });
}

}  // namespace dismesh
