#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "model.hpp"
#include "prng.hpp"
#include "synth.hpp"
#include "vae.hpp"

namespace dismesh {

template <typename T>
AdamState<T> make_adam_state(const NamedParams<T>& params, AdamConfig hyper = {}) {
    AdamState<T> s;
    s.hyper = hyper;
    for (const auto& [name, p] : params) {
        s.m.emplace_back(p.size(), T(0));
        s.v.emplace_back(p.size(), T(0));
    }
    return s;
}

/// One Adam update of every parameter from its accumulated gradient
/// (a parameter the backward pass never reached counts as zero gradient).
/// All gradients are checked before anything is modified.
template <typename T>
void adam_step(const NamedParams<T>& params, AdamState<T>& state) {
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw ValidationError("adam_step: state has " + std::to_string(state.m.size()) + " slots for " +
                              std::to_string(params.size()) + " parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, p] = params[i];
        if (state.m[i].size() != p.size() || state.v[i].size() != p.size())
            throw ValidationError("adam_step: state shape mismatch for " + name);
        const auto g = p.grad();
        if (!g.empty() && g.size() != p.size()) throw ValidationError("adam_step: gradient shape mismatch for " + name);
        for (T x : g)
            if (!std::isfinite(x)) throw NonFiniteError("adam_step: non-finite gradient for parameter " + name);
    }
    const auto& h = state.hyper;
    state.t += 1;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].second;
        const auto g = p.grad();
        auto values = p.mutable_value();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double gk = g.empty() ? 0.0 : static_cast<double>(g[k]);
            const double mk = h.beta1 * static_cast<double>(m[k]) + (1.0 - h.beta1) * gk;
            const double vk = h.beta2 * static_cast<double>(v[k]) + (1.0 - h.beta2) * gk * gk;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            const double step = h.learning_rate * (mk / c1) / (std::sqrt(vk / c2) + h.eps);
            values[k] = static_cast<T>(static_cast<double>(values[k]) - step);
        }
    }
}

/// Keeps freed activation buffers in the heap instead of returning them to
/// the kernel after every step; with glibc defaults each training step pays
/// for fresh zeroed pages. Process-wide, so binaries opt in from main().
inline void keep_freed_memory() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
#endif
}

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 16;
    AdamConfig adam;
    /// Wall time makes metrics.jsonl differ between otherwise identical
    /// runs; when false the field is written as null.
    bool record_wall_time = true;

    void validate() const {
        if (epochs == 0) throw ValidationError("trainer.epochs must be >= 1");
        if (batch_size == 0) throw ValidationError("trainer.batch_size must be >= 1");
        if (!(adam.learning_rate > 0.0)) throw ValidationError("trainer.learning_rate must be positive");
        if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
            throw ValidationError("trainer.beta1 and trainer.beta2 must be in [0, 1)");
        if (!(adam.eps > 0.0)) throw ValidationError("trainer.eps must be positive");
    }

    nlohmann::json to_json() const {
        return {{"epochs", epochs},          {"batch_size", batch_size}, {"learning_rate", adam.learning_rate},
                {"beta1", adam.beta1},       {"beta2", adam.beta2},      {"eps", adam.eps},
                {"record_wall_time", record_wall_time}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        constexpr std::string_view ctx = "trainer";
        reject_unknown_keys(j, {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "eps", "record_wall_time"}, ctx);
        TrainConfig c;
        read_optional(j, "epochs", c.epochs, ctx);
        read_optional(j, "batch_size", c.batch_size, ctx);
        read_optional(j, "learning_rate", c.adam.learning_rate, ctx);
        read_optional(j, "beta1", c.adam.beta1, ctx);
        read_optional(j, "beta2", c.adam.beta2, ctx);
        read_optional(j, "eps", c.adam.eps, ctx);
        read_optional(j, "record_wall_time", c.record_wall_time, ctx);
        c.validate();
        return c;
    }
};

struct TrainSummary {
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_val_rmse = 0.0;
    double final_val_rmse = 0.0;
    double baseline_rmse = 0.0;
    std::string validation_split;  // "val", or "train" when the val split is empty
    std::shared_ptr<TrainedModel> model;  // state after the final epoch

    nlohmann::json to_json() const {
        return {{"epochs_run", epochs_run},
                {"best_epoch", best_epoch},
                {"best_val_recon_rmse", best_val_rmse},
                {"final_val_recon_rmse", final_val_rmse},
                {"mean_mesh_baseline_rmse", baseline_rmse},
                {"validation_split", validation_split}};
    }
};

/// Per-vertex RMSE of always predicting `mean`, averaged over `meshes`.
inline double mean_mesh_baseline(const std::vector<Vec3>& mean, const std::vector<const TriangleMesh*>& meshes) {
    double acc = 0.0;
    for (const auto* m : meshes) acc += vertex_rmse(mean, m->vertices);
    return acc / static_cast<double>(meshes.size());
}

inline std::vector<Vec3> mean_vertices(const std::vector<const TriangleMesh*>& meshes) {
    std::vector<Vec3> mean(meshes.front()->vertices.size(), Vec3{0, 0, 0});
    for (const auto* m : meshes)
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = mean[i] + m->vertices[i];
    for (auto& v : mean) v = (1.0 / static_cast<double>(meshes.size())) * v;
    return mean;
}

namespace detail {

inline constexpr std::uint64_t kOrderStream = 0x10;
inline constexpr std::uint64_t kPairingStream = 0x11;
inline constexpr std::uint64_t kNoiseStream = 0x12;

/// Uniform draw over the generator's shape ranges, for synthetic partners.
inline ShapeParams random_shape(CounterRng& rng) {
    ShapeParams s;
    s.subject_id = -1;
    for (std::size_t i = 0; i < tube::kSegments; ++i) s.segment_radii.push_back(rng.uniform(tube::kRadiusMin, tube::kRadiusMax));
    for (std::size_t i = 0; i < tube::kSegments; ++i) s.segment_lengths.push_back(rng.uniform(tube::kLengthMin, tube::kLengthMax));
    return s;
}

struct TrainingItem {
    std::vector<float> vertices;  // normalized, N*3
    std::vector<double> shape_target;
    std::vector<double> pose_target;
};

}  // namespace detail

/// Builds the three-part batch for `anchors`: the anchors, a same-subject
/// partner of each, and a freshly generated mesh in each anchor's pose with
/// a random shape.
inline PairedBatch<float> make_training_batch(const std::vector<std::size_t>& anchors,
                                              const std::vector<detail::TrainingItem>& items,
                                              const std::vector<PoseParams>& poses,
                                              const std::map<int, std::vector<std::size_t>>& by_subject,
                                              const std::vector<int>& subject_of, const Normalizer& normalizer,
                                              CounterRng& rng) {
    const std::size_t b = anchors.size();
    std::vector<const detail::TrainingItem*> rows(3 * b);
    std::vector<detail::TrainingItem> synthetic(b);
    for (std::size_t k = 0; k < b; ++k) {
        const auto a = anchors[k];
        rows[k] = &items[a];
        const auto& same = by_subject.at(subject_of[a]);
        std::size_t partner = a;
        if (same.size() > 1) {
            do partner = same[rng.below(same.size())];
            while (partner == a);
        }
        rows[b + k] = &items[partner];
        const auto shape = detail::random_shape(rng);
        auto& syn = synthetic[k];
        syn.vertices = normalizer.normalize(generate_mesh(shape, poses[a]));
        syn.shape_target = shape.normalized();
        syn.pose_target = items[a].pose_target;
        rows[2 * b + k] = &syn;
    }
    std::vector<float> verts, shape_t, pose_t;
    for (const auto* r : rows) {
        verts.insert(verts.end(), r->vertices.begin(), r->vertices.end());
        for (double v : r->shape_target) shape_t.push_back(static_cast<float>(v));
        for (double v : r->pose_target) pose_t.push_back(static_cast<float>(v));
    }
    PairedBatch<float> batch;
    const auto n = rows.front()->vertices.size() / 3;
    batch.vertices = ag::Tensor<float>::from_values(3 * b * n, 3, std::move(verts));
    batch.shape_targets = ag::Tensor<float>::from_values(3 * b, kShapeFactorDim, std::move(shape_t));
    batch.pose_targets = ag::Tensor<float>::from_values(3 * b, kPoseFactorDim, std::move(pose_t));
    for (std::size_t k = 0; k < b; ++k) {
        batch.same_subject.push_back({k, b + k});
        batch.same_pose.push_back({k, 2 * b + k});
    }
    return batch;
}

/// Trains on the manifest's train split and writes run_dir/{metrics.jsonl,
/// summary.json, best/, last/}. Every random choice (initialization, batch
/// order, partners, synthetic shapes, reparameterization noise) is drawn
/// from counter streams keyed by `seed`.
inline TrainSummary train(const DatasetManifest& manifest, const ModelConfig& config, const TrainConfig& tc,
                          const std::filesystem::path& run_dir, std::uint64_t seed) {
    config.validate();
    tc.validate();
    const auto train_ids = manifest.samples_in(Split::Train);
    if (train_ids.empty()) throw ValidationError("train: the train split is empty");
    auto val_ids = manifest.samples_in(Split::Val);
    TrainSummary summary;
    summary.validation_split = "val";
    if (val_ids.empty()) {
        spdlog::warn("validation split is empty; selecting checkpoints by train-split reconstruction");
        val_ids = train_ids;
        summary.validation_split = "train";
    }

    const auto tmpl = tube_template();
    if (tmpl.topology_hash() != manifest.template_topology_hash)
        throw ValidationError("train: dataset topology does not match the generator template");
    const auto meshes = load_dataset_meshes(manifest);
    std::vector<const TriangleMesh*> train_meshes, val_meshes;
    for (auto i : train_ids) train_meshes.push_back(&meshes[i]);
    for (auto i : val_ids) val_meshes.push_back(&meshes[i]);

    const auto normalizer = Normalizer::fit(tmpl, train_meshes);
    summary.baseline_rmse = mean_mesh_baseline(mean_vertices(train_meshes), val_meshes);
    auto hierarchy = std::make_shared<const MeshHierarchy>(build_hierarchy(tmpl, config.ratios));
    auto model = std::make_shared<TrainedModel>(config, tmpl, hierarchy, normalizer, seed);
    const auto params = model->vae().parameters();
    auto adam = make_adam_state(params, tc.adam);
    spdlog::info("training {} meshes ({} validation), {} epochs, baseline RMSE {:.6f}", train_ids.size(), val_ids.size(),
                 tc.epochs, summary.baseline_rmse);

    std::vector<detail::TrainingItem> items(meshes.size());
    std::vector<PoseParams> poses(meshes.size());
    std::vector<int> subject_of(meshes.size());
    std::map<int, std::vector<std::size_t>> by_subject;
    for (auto i : train_ids) {
        const auto& labels = manifest.samples[i].labels;
        items[i] = {normalizer.normalize(meshes[i]), labels.shape.normalized(), labels.pose.normalized()};
        poses[i] = labels.pose;
        subject_of[i] = labels.subject_id;
        by_subject[labels.subject_id].push_back(i);
    }

    io::ensure_directory(run_dir);
    std::ofstream log(run_dir / "metrics.jsonl", std::ios::trunc);
    if (!log) throw IoError("cannot write " + (run_dir / "metrics.jsonl").string());

    const auto d = config.latent_dim();
    summary.best_val_rmse = std::numeric_limits<double>::infinity();
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        auto order = train_ids;
        CounterRng order_rng(seed, {detail::kOrderStream, epoch});
        order_rng.shuffle(order);
        double sums[6] = {0, 0, 0, 0, 0, 0};
        std::size_t steps = 0;
        double beta = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += tc.batch_size, ++steps) {
            const std::vector<std::size_t> anchors(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), begin + tc.batch_size)));
            CounterRng pair_rng(seed, {detail::kPairingStream, epoch, steps});
            auto batch = make_training_batch(anchors, items, poses, by_subject, subject_of, normalizer, pair_rng);
            CounterRng noise_rng(seed, {detail::kNoiseStream, epoch, steps});
            std::vector<float> eps(batch.size() * d);
            for (auto& e : eps) e = static_cast<float>(noise_rng.normal());
            auto noise = ag::Tensor<float>::from_values(batch.size(), d, std::move(eps));

            for (auto& [name, p] : params) p.zero_grad();
            auto loss = total_loss(batch, model->vae(), epoch, tc.epochs, noise);
            loss.total.backward();
            adam_step(params, adam);
            const double terms[6] = {loss.total_value(), loss.recon, loss.kl, loss.swap, loss.reg, loss.xcov};
            for (int t = 0; t < 6; ++t) sums[t] += terms[t];
            beta = loss.beta;
        }
        const double val_rmse = reconstruction_rmse(*model, val_meshes);
        if (!std::isfinite(val_rmse)) throw NonFiniteError("validation reconstruction RMSE is not finite");
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        const auto inv = 1.0 / static_cast<double>(steps);
        nlohmann::json rec = {{"epoch", epoch + 1},        {"loss", sums[0] * inv}, {"recon", sums[1] * inv},
                              {"kl", sums[2] * inv},       {"swap", sums[3] * inv}, {"reg", sums[4] * inv},
                              {"xcov", sums[5] * inv},     {"beta", beta},          {"val_recon_rmse", val_rmse},
                              {"wall_time_s", nullptr}};
        if (tc.record_wall_time) rec["wall_time_s"] = seconds;
        log << rec.dump() << '\n';
        log.flush();
        spdlog::info("epoch {}/{} loss {:.6f} recon {:.6f} val_rmse {:.6f} ({:.2f}s)", epoch + 1, tc.epochs, sums[0] * inv,
                     sums[1] * inv, val_rmse, seconds);

        CheckpointInfo info{epoch + 1, seed, adam};
        if (val_rmse < summary.best_val_rmse) {
            summary.best_val_rmse = val_rmse;
            summary.best_epoch = epoch + 1;
            save_checkpoint(*model, info, run_dir / "best");
        }
        save_checkpoint(*model, info, run_dir / "last");
        summary.final_val_rmse = val_rmse;
        summary.epochs_run = epoch + 1;
    }
    io::write_file(run_dir / "summary.json", summary.to_json().dump(2) + "\n");
    summary.model = model;
    return summary;
}

}  // namespace dismesh
