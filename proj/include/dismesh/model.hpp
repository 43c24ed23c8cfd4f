#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "binary_io.hpp"
#include "hierarchy.hpp"
#include "mesh.hpp"
#include "vae.hpp"

namespace dismesh {

/// Maps mesh coordinates to model coordinates: (p - center) / scale.
struct Normalizer {
    Vec3 center{0.0, 0.0, 0.0};
    double scale = 1.0;

    std::vector<float> normalize(const TriangleMesh& mesh) const {
        std::vector<float> out;
        out.reserve(mesh.vertices.size() * 3);
        for (const auto& v : mesh.vertices)
            for (int c = 0; c < 3; ++c) out.push_back(static_cast<float>((v[c] - center[c]) / scale));
        return out;
    }

    std::vector<Vec3> denormalize(std::span<const float> values) const {
        std::vector<Vec3> out(values.size() / 3);
        for (std::size_t i = 0; i < out.size(); ++i)
            for (int c = 0; c < 3; ++c) out[i][c] = static_cast<double>(values[3 * i + c]) * scale + center[c];
        return out;
    }

    /// Centered on the template centroid, scaled by the RMS distance of the
    /// given meshes' vertices from that centroid.
    static Normalizer fit(const TriangleMesh& tmpl, const std::vector<const TriangleMesh*>& meshes) {
        Normalizer n;
        for (const auto& v : tmpl.vertices) n.center = n.center + v;
        n.center = (1.0 / static_cast<double>(tmpl.vertices.size())) * n.center;
        double acc = 0.0;
        std::size_t count = 0;
        for (const auto* m : meshes)
            for (const auto& v : m->vertices) {
                const auto d = v - n.center;
                acc += dot(d, d);
                ++count;
            }
        if (count == 0) throw ValidationError("normalizer: no training vertices");
        n.scale = std::sqrt(acc / static_cast<double>(count));
        if (!(n.scale > 0.0)) throw ValidationError("normalizer: degenerate (zero-extent) training meshes");
        return n;
    }

    nlohmann::json to_json() const { return {{"center", center}, {"scale", scale}}; }
    static Normalizer from_json(const nlohmann::json& j) {
        reject_unknown_keys(j, {"center", "scale"}, "normalization");
        Normalizer n;
        n.center = j.at("center").get<Vec3>();
        n.scale = j.at("scale").get<double>();
        if (!(n.scale > 0.0)) throw ValidationError("normalization.scale must be positive");
        return n;
    }
};

/// A float32 VAE bundled with everything needed to map meshes in and out:
/// template, hierarchy and normalization. Inference runs one mesh at a time
/// so a mesh's result never depends on what it was batched with.
class TrainedModel {
public:
    TrainedModel(ModelConfig config, TriangleMesh tmpl, std::shared_ptr<const MeshHierarchy> hierarchy,
                 Normalizer normalizer, std::uint64_t init_seed)
        : template_(std::move(tmpl)),
          normalizer_(normalizer),
          vae_(std::move(config), std::move(hierarchy), init_seed) {
        template_.validate();
        if (template_.vertex_count() != vae_.vertex_count())
            throw ValidationError("template has " + std::to_string(template_.vertex_count()) +
                                  " vertices but the hierarchy's finest level has " + std::to_string(vae_.vertex_count()));
    }

    const MeshVAE<float>& vae() const { return vae_; }
    const ModelConfig& config() const { return vae_.config(); }
    const TriangleMesh& template_mesh() const { return template_; }
    const Normalizer& normalizer() const { return normalizer_; }
    std::string hierarchy_hash() const { return vae_.hierarchy().fingerprint(); }

    ag::Tensor<float> to_input(const TriangleMesh& mesh) const {
        require_template(mesh, template_, "input mesh");
        return ag::Tensor<float>::from_values(mesh.vertex_count(), 3, normalizer_.normalize(mesh));
    }

    /// Posterior mean and log-variance of one mesh.
    std::pair<std::vector<double>, std::vector<double>> posterior(const TriangleMesh& mesh) const {
        ag::NoGradGuard guard;
        auto post = vae_.encode(to_input(mesh));
        return {std::vector<double>(post.mu.value().begin(), post.mu.value().end()),
                std::vector<double>(post.logvar.value().begin(), post.logvar.value().end())};
    }

    LatentCode encode_mean(const TriangleMesh& mesh) const {
        return LatentCode::split(posterior(mesh).first, config().d_shape);
    }

    std::vector<LatentCode> encode_means(const std::vector<TriangleMesh>& meshes) const {
        std::vector<LatentCode> out;
        out.reserve(meshes.size());
        for (const auto& m : meshes) out.push_back(encode_mean(m));
        return out;
    }

    TriangleMesh decode(const LatentCode& code) const {
        if (code.z_shape.size() != config().d_shape)
            throw ValidationError("z_shape has length " + std::to_string(code.z_shape.size()) + ", expected " +
                                  std::to_string(config().d_shape));
        if (code.z_pose.size() != config().d_pose)
            throw ValidationError("z_pose has length " + std::to_string(code.z_pose.size()) + ", expected " +
                                  std::to_string(config().d_pose));
        ag::NoGradGuard guard;
        std::vector<float> z;
        for (double v : code.concat()) z.push_back(static_cast<float>(v));
        const auto width = z.size();
        auto out = vae_.decode(ag::Tensor<float>::from_values(1, width, std::move(z)));
        TriangleMesh mesh{normalizer_.denormalize(out.value()), template_.faces};
        return mesh;
    }

    TriangleMesh reconstruct(const TriangleMesh& mesh) const { return decode(encode_mean(mesh)); }

    /// Stable identifier of the weights, normalization and architecture.
    std::string model_hash() const {
        io::Fnv1a h;
        h.update(config().to_json().dump());
        h.update(normalizer_.to_json().dump());
        h.update(hierarchy_hash());
        for (const auto& [name, p] : vae_.parameters()) {
            h.update(name);
            for (float v : p.value()) h.update_u64(std::bit_cast<std::uint32_t>(v));
        }
        return h.hex();
    }

private:
    TriangleMesh template_;
    Normalizer normalizer_;
    MeshVAE<float> vae_;
};

/// Mean over meshes of the per-vertex RMSE of their reconstructions.
inline double reconstruction_rmse(const TrainedModel& model, const std::vector<const TriangleMesh*>& meshes) {
    if (meshes.empty()) throw ValidationError("reconstruction_rmse: no meshes");
    double acc = 0.0;
    for (const auto* m : meshes) acc += vertex_rmse(model.reconstruct(*m).vertices, m->vertices);
    return acc / static_cast<double>(meshes.size());
}

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

/// First and second moments per parameter, keyed by parameter order.
template <typename T>
struct AdamState {
    AdamConfig hyper;
    std::uint64_t t = 0;
    std::vector<std::vector<T>> m, v;
};

/// Training-time metadata stored alongside the weights.
struct CheckpointInfo {
    std::size_t epoch = 0;
    std::uint64_t seed = 0;
    std::optional<AdamState<float>> optimizer;
};

namespace detail {

inline constexpr const char* kCheckpointFormat = "dismesh-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline void append_blob(std::string& data, nlohmann::json& index, const std::string& name, std::size_t rows,
                        std::size_t cols, std::span<const float> values) {
    index[name] = {{"offset", data.size()}, {"shape", {rows, cols}}};
    for (float v : values) io::put_f32(data, v);
}

}  // namespace detail

/// Writes config.json, tensors.bin, hierarchy.hash, template.obj and the
/// hierarchy operators into `dir`.
inline void save_checkpoint(const TrainedModel& model, const CheckpointInfo& info, const std::filesystem::path& dir) {
    io::ensure_directory(dir);
    nlohmann::json index = nlohmann::json::object();
    std::string data;
    const auto params = model.vae().parameters();
    for (const auto& [name, p] : params) detail::append_blob(data, index, name, p.rows(), p.cols(), p.value());
    if (info.optimizer) {
        const auto& opt = *info.optimizer;
        if (opt.m.size() != params.size() || opt.v.size() != params.size())
            throw ValidationError("save_checkpoint: optimizer state does not match the parameter list");
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& [name, p] = params[i];
            if (opt.m[i].size() != p.size() || opt.v[i].size() != p.size())
                throw ValidationError("save_checkpoint: optimizer moment size mismatch for " + name);
            detail::append_blob(data, index, "adam.m." + name, p.rows(), p.cols(), opt.m[i]);
            detail::append_blob(data, index, "adam.v." + name, p.rows(), p.cols(), opt.v[i]);
        }
    }
    std::string blob;
    const auto index_text = index.dump();
    io::put_u64(blob, index_text.size());
    blob += index_text;
    blob += data;
    io::write_file(dir / "tensors.bin", blob);

    nlohmann::json cfg;
    cfg["format"] = detail::kCheckpointFormat;
    cfg["version"] = detail::kCheckpointVersion;
    cfg["model"] = model.config().to_json();
    cfg["normalization"] = model.normalizer().to_json();
    cfg["epoch"] = info.epoch;
    cfg["prng"] = {{"seed", info.seed}, {"epoch", info.epoch}};
    cfg["hierarchy_hash"] = model.hierarchy_hash();
    if (info.optimizer) {
        const auto& h = info.optimizer->hyper;
        cfg["optimizer"] = {{"t", info.optimizer->t},
                            {"learning_rate", h.learning_rate},
                            {"beta1", h.beta1},
                            {"beta2", h.beta2},
                            {"eps", h.eps}};
    } else {
        cfg["optimizer"] = nullptr;
    }
    io::write_file(dir / "config.json", cfg.dump(2) + "\n");
    io::write_file(dir / "hierarchy.hash", model.hierarchy_hash() + "\n");
    save_obj(model.template_mesh(), dir / "template.obj");
    save_hierarchy(model.vae().hierarchy(), dir / "hierarchy");
}

struct LoadedCheckpoint {
    std::shared_ptr<TrainedModel> model;
    CheckpointInfo info;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("checkpoint directory not found: " + dir.string());
    nlohmann::json cfg;
    try {
        cfg = nlohmann::json::parse(io::read_file(dir / "config.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("checkpoint config.json: " + std::string(e.what()));
    }
    if (cfg.value("format", std::string{}) != detail::kCheckpointFormat || cfg.value("version", 0) != detail::kCheckpointVersion)
        throw ValidationError("checkpoint config.json: unsupported format or version");

    auto hierarchy = std::make_shared<const MeshHierarchy>(load_hierarchy(dir / "hierarchy"));
    auto recorded = io::read_file(dir / "hierarchy.hash");
    while (!recorded.empty() && (recorded.back() == '\n' || recorded.back() == '\r')) recorded.pop_back();
    const auto expected = cfg.at("hierarchy_hash").get<std::string>();
    if (recorded != expected || hierarchy->fingerprint() != expected)
        throw ValidationError("checkpoint hierarchy hash mismatch: recorded " + expected + ", hierarchy.hash " + recorded +
                              ", operators " + hierarchy->fingerprint());

    LoadedCheckpoint out;
    out.info.epoch = cfg.at("epoch").get<std::size_t>();
    out.info.seed = cfg.at("prng").at("seed").get<std::uint64_t>();
    out.model = std::make_shared<TrainedModel>(ModelConfig::from_json(cfg.at("model")), load_obj(dir / "template.obj"),
                                               hierarchy, Normalizer::from_json(cfg.at("normalization")), 0);

    const auto blob = io::read_file(dir / "tensors.bin");
    io::Reader reader(blob);
    const auto index_len = reader.u64();
    nlohmann::json index;
    try {
        index = nlohmann::json::parse(reader.take(index_len));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("tensors.bin index: " + std::string(e.what()));
    }
    const std::string_view data = std::string_view(blob).substr(reader.position());
    auto read_into = [&](const std::string& name, std::size_t rows, std::size_t cols, std::span<float> dst) {
        if (!index.contains(name)) throw ValidationError("tensors.bin: missing tensor " + name);
        const auto& e = index[name];
        const auto shape = e.at("shape").get<std::vector<std::size_t>>();
        if (shape != std::vector<std::size_t>{rows, cols})
            throw ValidationError("tensors.bin: tensor " + name + " has the wrong shape for this config");
        const auto offset = e.at("offset").get<std::size_t>();
        if (offset + 4 * dst.size() > data.size()) throw ValidationError("tensors.bin: tensor " + name + " truncated");
        io::Reader r(data.substr(offset, 4 * dst.size()));
        for (auto& v : dst) v = r.f32();
    };
    auto params = out.model->vae().parameters();
    for (auto& [name, p] : params) read_into(name, p.rows(), p.cols(), p.mutable_value());

    if (cfg.contains("optimizer") && !cfg["optimizer"].is_null()) {
        const auto& o = cfg["optimizer"];
        AdamState<float> st;
        st.t = o.at("t").get<std::uint64_t>();
        st.hyper = {o.at("learning_rate").get<double>(), o.at("beta1").get<double>(), o.at("beta2").get<double>(),
                    o.at("eps").get<double>()};
        for (auto& [name, p] : params) {
            st.m.emplace_back(p.size());
            st.v.emplace_back(p.size());
            read_into("adam.m." + name, p.rows(), p.cols(), st.m.back());
            read_into("adam.v." + name, p.rows(), p.cols(), st.v.back());
        }
        out.info.optimizer = std::move(st);
    }
    return out;
}

}  // namespace dismesh
