#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "synth.hpp"
#include "tasks.hpp"

namespace dismesh {

/// Closed-form ridge without intercept: W = (X^T X + lambda I)^{-1} X^T Y.
inline Eigen::MatrixXd ridge_fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda) {
    if (x.rows() != y.rows()) throw ValidationError("ridge_fit: row mismatch");
    Eigen::MatrixXd gram = x.transpose() * x;
    gram.diagonal().array() += lambda;
    return gram.ldlt().solve(x.transpose() * y);
}

inline Eigen::MatrixXd with_bias_column(const Eigen::MatrixXd& x) {
    Eigen::MatrixXd out(x.rows(), x.cols() + 1);
    out << x, Eigen::VectorXd::Ones(x.rows());
    return out;
}

/// Pooled coefficient of determination over all output columns. Empty when
/// the targets have no variance.
inline std::optional<double> r_squared(const Eigen::MatrixXd& y, const Eigen::MatrixXd& pred) {
    const Eigen::RowVectorXd mean = y.colwise().mean();
    const double ss_tot = (y.rowwise() - mean).squaredNorm();
    if (!(ss_tot > 0.0)) return std::nullopt;
    return 1.0 - (y - pred).squaredNorm() / ss_tot;
}

/// Accuracy of assigning each query to the nearest class centroid.
inline double nearest_centroid_accuracy(const Eigen::MatrixXd& fit_x, const std::vector<int>& fit_labels,
                                        const Eigen::MatrixXd& query_x, const std::vector<int>& query_labels) {
    std::map<int, std::pair<Eigen::RowVectorXd, int>> sums;
    for (Eigen::Index i = 0; i < fit_x.rows(); ++i) {
        auto [it, fresh] = sums.try_emplace(fit_labels[static_cast<std::size_t>(i)], Eigen::RowVectorXd::Zero(fit_x.cols()), 0);
        it->second.first += fit_x.row(i);
        it->second.second += 1;
    }
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < query_x.rows(); ++i) {
        int best_label = 0;
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [label, acc] : sums) {
            const double d = (query_x.row(i) - acc.first / acc.second).squaredNorm();
            if (d < best) best = d, best_label = label;
        }
        hits += best_label == query_labels[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(hits) / static_cast<double>(query_x.rows());
}

struct ProbeSet {
    std::vector<LatentCode> codes;
    std::vector<FactorLabels> labels;
};

struct ProbeScores {
    std::optional<double> pose_r2_from_pose, pose_r2_from_shape;
    std::optional<double> subject_acc_from_shape, subject_acc_from_pose;
    std::map<std::string, std::string> null_reasons;
};

inline constexpr double kProbeRidge = 1e-3;

namespace detail {

inline Eigen::MatrixXd stack(const std::vector<LatentCode>& codes, bool shape) {
    const auto& first = shape ? codes.at(0).z_shape : codes.at(0).z_pose;
    Eigen::MatrixXd x(static_cast<Eigen::Index>(codes.size()), static_cast<Eigen::Index>(first.size()));
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const auto& v = shape ? codes[i].z_shape : codes[i].z_pose;
        for (std::size_t j = 0; j < v.size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
    }
    return x;
}

inline Eigen::MatrixXd pose_targets(const std::vector<FactorLabels>& labels) {
    Eigen::MatrixXd y(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(kPoseFactorDim));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto v = labels[i].pose.normalized();
        for (std::size_t j = 0; j < v.size(); ++j) y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
    }
    return y;
}

inline Eigen::MatrixXd select(const Eigen::MatrixXd& x, const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

}  // namespace detail

/// Pose probes: ridge regression fit on `fit`, R^2 on `score`.
/// Subject probes: subjects are disjoint across splits, so nearest-centroid
/// is fit on the even-indexed samples of each `score` subject and scored on
/// the odd-indexed ones.
inline ProbeScores probe_subspaces(const ProbeSet& fit, const ProbeSet& score) {
    if (fit.codes.size() != fit.labels.size() || score.codes.size() != score.labels.size())
        throw ValidationError("probe_subspaces: codes and labels differ in length");
    if (fit.codes.size() < 10) throw ValidationError("probe_subspaces: need at least 10 fit samples");
    if (score.codes.empty()) throw ValidationError("probe_subspaces: empty score set");
    ProbeScores out;
    const auto y_fit = detail::pose_targets(fit.labels);
    const auto y_score = detail::pose_targets(score.labels);
    for (bool shape : {false, true}) {
        const auto w = ridge_fit(with_bias_column(detail::stack(fit.codes, shape)), y_fit, kProbeRidge);
        auto r2 = r_squared(y_score, with_bias_column(detail::stack(score.codes, shape)) * w);
        const char* key = shape ? "pose_probe_r2_from_shape" : "pose_probe_r2_from_pose";
        if (!r2) out.null_reasons[key] = "pose labels have zero variance on the scored split";
        (shape ? out.pose_r2_from_shape : out.pose_r2_from_pose) = r2;
    }

    std::map<int, std::size_t> seen;
    std::vector<std::size_t> fit_rows, query_rows;
    for (std::size_t i = 0; i < score.labels.size(); ++i)
        (seen[score.labels[i].subject_id]++ % 2 == 0 ? fit_rows : query_rows).push_back(i);
    if (seen.size() < 2 || query_rows.empty()) {
        const std::string reason = "need at least 2 subjects with 2 samples each on the scored split";
        out.null_reasons["subject_probe_acc_from_shape"] = reason;
        out.null_reasons["subject_probe_acc_from_pose"] = reason;
        return out;
    }
    auto labels_of = [&](const std::vector<std::size_t>& rows) {
        std::vector<int> l;
        for (auto r : rows) l.push_back(score.labels[r].subject_id);
        return l;
    };
    for (bool shape : {true, false}) {
        const auto x = detail::stack(score.codes, shape);
        const double acc = nearest_centroid_accuracy(detail::select(x, fit_rows), labels_of(fit_rows),
                                                     detail::select(x, query_rows), labels_of(query_rows));
        (shape ? out.subject_acc_from_shape : out.subject_acc_from_pose) = acc;
    }
    return out;
}

struct EvalProtocol {
    std::size_t transfer_pairs = 50;
    std::size_t sync_pairs = 5;
    std::size_t sync_frames = 20;
    int sync_tolerance = 2;
    std::size_t samples = 64;
};

struct EvalReport {
    static constexpr int kVersion = 1;

    std::optional<double> recon_rmse;
    std::optional<double> val_recon_rmse;
    std::optional<double> pose_probe_r2_from_pose, pose_probe_r2_from_shape;
    std::optional<double> subject_probe_acc_from_shape, subject_probe_acc_from_pose;
    std::optional<double> subject_chance;
    std::optional<double> transfer_rmse_vs_oracle;
    std::optional<double> sync_frame_accuracy;
    std::optional<double> match_precision_at_1;
    std::optional<double> sample_diversity, sample_specificity;
    std::string validation_split;
    std::map<std::string, std::string> null_reasons;

    nlohmann::json to_json() const {
        auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
        nlohmann::json j;
        j["version"] = kVersion;
        j["recon_rmse"] = opt(recon_rmse);
        j["val_recon_rmse"] = opt(val_recon_rmse);
        j["validation_split"] = validation_split;
        j["pose_probe_r2_from_pose"] = opt(pose_probe_r2_from_pose);
        j["pose_probe_r2_from_shape"] = opt(pose_probe_r2_from_shape);
        j["subject_probe_acc_from_shape"] = opt(subject_probe_acc_from_shape);
        j["subject_probe_acc_from_pose"] = opt(subject_probe_acc_from_pose);
        j["subject_chance"] = opt(subject_chance);
        j["transfer_rmse_vs_oracle"] = opt(transfer_rmse_vs_oracle);
        j["sync_frame_accuracy"] = opt(sync_frame_accuracy);
        j["match_precision_at_1"] = opt(match_precision_at_1);
        j["sample_diversity"] = opt(sample_diversity);
        j["sample_specificity"] = opt(sample_specificity);
        j["null_reasons"] = null_reasons;
        j["units"] = {{"recon_rmse", "per-vertex RMSE, mesh units"},
                      {"transfer_rmse_vs_oracle", "per-vertex RMSE, mesh units"},
                      {"sample_diversity", "per-vertex RMSE, mesh units"},
                      {"sample_specificity", "per-vertex RMSE, mesh units"}};
        return j;
    }
};

inline constexpr std::uint64_t kEvalTransferStream = 0x30;
inline constexpr std::uint64_t kEvalSyncStream = 0x31;

/// Fraction of the frames of `b` whose true counterpart in `a` lies within
/// `tolerance` frames of some path step at that frame. `truth[j]` is the
/// (fractional) index in `a` matching frame j of `b`.
inline double frame_accuracy(const AlignmentPath& path, const std::vector<double>& truth, int tolerance) {
    std::size_t hits = 0;
    for (std::size_t j = 0; j < truth.size(); ++j) {
        bool hit = false;
        for (const auto& [pi, pj] : path.steps)
            if (pj == j && std::abs(static_cast<double>(pi) - truth[j]) <= tolerance) hit = true;
        hits += hit;
    }
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

/// Every report field from the test split of `manifest` (reconstruction also
/// on the validation split, as logged by training).
inline EvalReport evaluate(const TrainedModel& model, const DatasetManifest& manifest, std::uint64_t seed,
                           const EvalProtocol& protocol = {}) {
    const auto test_ids = manifest.samples_in(Split::Test);
    if (test_ids.empty()) throw ValidationError("evaluate: test split is empty");
    auto train_ids = manifest.samples_in(Split::Train);
    auto val_ids = manifest.samples_in(Split::Val);
    EvalReport r;
    r.validation_split = "val";
    if (val_ids.empty()) {
        val_ids = train_ids;
        r.validation_split = "train";
    }
    const auto meshes = load_dataset_meshes(manifest);
    auto ptrs = [&](const std::vector<std::size_t>& ids) {
        std::vector<const TriangleMesh*> out;
        for (auto i : ids) out.push_back(&meshes[i]);
        return out;
    };
    r.recon_rmse = reconstruction_rmse(model, ptrs(test_ids));
    r.val_recon_rmse = reconstruction_rmse(model, ptrs(val_ids));

    auto codes_of = [&](const std::vector<std::size_t>& ids) {
        ProbeSet s;
        for (auto i : ids) {
            s.codes.push_back(model.encode_mean(meshes[i]));
            s.labels.push_back(manifest.samples[i].labels);
        }
        return s;
    };
    const auto test_set = codes_of(test_ids);
    if (train_ids.size() >= 10) {
        const auto probes = probe_subspaces(codes_of(train_ids), test_set);
        r.pose_probe_r2_from_pose = probes.pose_r2_from_pose;
        r.pose_probe_r2_from_shape = probes.pose_r2_from_shape;
        r.subject_probe_acc_from_shape = probes.subject_acc_from_shape;
        r.subject_probe_acc_from_pose = probes.subject_acc_from_pose;
        r.null_reasons.insert(probes.null_reasons.begin(), probes.null_reasons.end());
    } else {
        for (const char* k : {"pose_probe_r2_from_pose", "pose_probe_r2_from_shape", "subject_probe_acc_from_shape",
                              "subject_probe_acc_from_pose"})
            r.null_reasons[k] = "train split has fewer than 10 samples";
    }
    const auto test_subjects = manifest.subjects_in(Split::Test);
    r.subject_chance = 1.0 / static_cast<double>(test_subjects.size());

    // Transfer: random cross-subject pairs against the generator's ground truth.
    if (test_subjects.size() >= 2) {
        CounterRng rng(seed, {kEvalTransferStream});
        double acc = 0.0;
        for (std::size_t k = 0; k < protocol.transfer_pairs; ++k) {
            std::size_t a, b;
            do {
                a = test_ids[rng.below(test_ids.size())];
                b = test_ids[rng.below(test_ids.size())];
            } while (manifest.samples[a].labels.subject_id == manifest.samples[b].labels.subject_id);
            const auto out = transfer(model, meshes[a], meshes[b]);
            const auto truth = generate_mesh(manifest.samples[a].labels.shape, manifest.samples[b].labels.pose);
            acc += vertex_rmse(out.vertices, truth.vertices);
        }
        r.transfer_rmse_vs_oracle = acc / static_cast<double>(protocol.transfer_pairs);
    } else {
        r.null_reasons["transfer_rmse_vs_oracle"] = "test split has fewer than 2 subjects";
    }

    // Sync: the same trajectory on two test subjects, the second time-warped by t^2.
    {
        CounterRng rng(seed, {kEvalSyncStream});
        const auto n = protocol.sync_frames;
        std::vector<double> truth(n);
        for (std::size_t j = 0; j < n; ++j) {
            const double t = static_cast<double>(j) / static_cast<double>(n - 1);
            truth[j] = t * t * static_cast<double>(n - 1);
        }
        double acc = 0.0;
        for (std::size_t k = 0; k < protocol.sync_pairs; ++k) {
            const int sa = test_subjects[rng.below(test_subjects.size())];
            int sb = sa;
            if (test_subjects.size() >= 2)
                while (sb == sa) sb = test_subjects[rng.below(test_subjects.size())];
            const auto traj_seed = rng.next_u64();
            auto frames = [&](int subject, const Warp& warp) {
                std::vector<TriangleMesh> out;
                for (auto& [mesh, lab] : make_sequence(manifest.subjects.at(static_cast<std::size_t>(subject)), n, warp, traj_seed))
                    out.push_back(std::move(mesh));
                return out;
            };
            const auto path = synchronize(model, frames(sa, [](double t) { return t; }),
                                          frames(sb, [](double t) { return t * t; }));
            acc += frame_accuracy(path, truth, protocol.sync_tolerance);
        }
        r.sync_frame_accuracy = acc / static_cast<double>(protocol.sync_pairs);
    }

    // Match: gallery is each test subject's pose-0 mesh; queries are its other poses.
    {
        std::vector<std::pair<std::vector<double>, int>> gallery;
        std::vector<std::size_t> queries;
        for (std::size_t i = 0; i < test_ids.size(); ++i) {
            const auto& s = manifest.samples[test_ids[i]];
            if (s.pose_index == 0) gallery.emplace_back(test_set.codes[i].z_shape, s.labels.subject_id);
            else queries.push_back(i);
        }
        if (gallery.empty() || queries.empty()) {
            r.null_reasons["match_precision_at_1"] = "test split lacks gallery or query meshes";
        } else {
            std::size_t hits = 0;
            for (auto q : queries)
                hits += rank_by_shape(test_set.codes[q].z_shape, gallery).front().subject_id ==
                        test_set.labels[q].subject_id;
            r.match_precision_at_1 = static_cast<double>(hits) / static_cast<double>(queries.size());
        }
    }

    const auto samples = sample_prior(model, protocol.samples, seed, ptrs(train_ids.empty() ? val_ids : train_ids));
    r.sample_diversity = samples.diversity;
    if (!samples.diversity) r.null_reasons["sample_diversity"] = "a single sample has no pairwise distances";
    r.sample_specificity = samples.specificity;
    return r;
}

}  // namespace dismesh
