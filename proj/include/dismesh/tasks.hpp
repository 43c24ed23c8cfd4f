#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "model.hpp"

namespace dismesh {

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ValidationError("euclidean: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

/// Shape from one mesh, pose from another.
inline TriangleMesh transfer(const TrainedModel& model, const TriangleMesh& shape_source, const TriangleMesh& pose_source) {
    auto s = model.encode_mean(shape_source);
    auto p = model.encode_mean(pose_source);
    return model.decode({std::move(s.z_shape), std::move(p.z_pose)});
}

struct AlignmentPath {
    std::vector<std::pair<std::size_t, std::size_t>> steps;
    double cost = 0.0;
};

/// DTW over a dense m x n cost matrix (row-major). Backtracking prefers the
/// diagonal, then (i-1, j), then (i, j-1) when accumulated costs tie.
inline AlignmentPath dtw(const std::vector<double>& d, std::size_t m, std::size_t n) {
    if (m == 0 || n == 0) throw ValidationError("dtw: empty sequence");
    if (d.size() != m * n) throw ValidationError("dtw: cost matrix size mismatch");
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> acc(m * n, inf);
    auto at = [&](std::size_t i, std::size_t j) -> double& { return acc[i * n + j]; };
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double best;
            if (i == 0 && j == 0) best = 0.0;
            else {
                best = inf;
                if (i > 0 && j > 0) best = std::min(best, at(i - 1, j - 1));
                if (i > 0) best = std::min(best, at(i - 1, j));
                if (j > 0) best = std::min(best, at(i, j - 1));
            }
            at(i, j) = d[i * n + j] + best;
        }
    }
    AlignmentPath path;
    path.cost = at(m - 1, n - 1);
    std::size_t i = m - 1, j = n - 1;
    path.steps.emplace_back(i, j);
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0) {
            const double diag = at(i - 1, j - 1), up = at(i - 1, j), left = at(i, j - 1);
            if (diag <= up && diag <= left) --i, --j;
            else if (up <= left) --i;
            else --j;
        } else if (i > 0) {
            --i;
        } else {
            --j;
        }
        path.steps.emplace_back(i, j);
    }
    std::reverse(path.steps.begin(), path.steps.end());
    return path;
}

inline AlignmentPath dtw(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    if (a.empty() || b.empty()) throw ValidationError("synchronize: empty sequence");
    std::vector<double> d(a.size() * b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) d[i * b.size() + j] = euclidean(a[i], b[j]);
    return dtw(d, a.size(), b.size());
}

inline std::vector<std::vector<double>> pose_codes(const TrainedModel& model, const std::vector<TriangleMesh>& seq) {
    std::vector<std::vector<double>> out;
    out.reserve(seq.size());
    for (const auto& m : seq) out.push_back(model.encode_mean(m).z_pose);
    return out;
}

/// Aligns two sequences by their pose codes.
inline AlignmentPath synchronize(const TrainedModel& model, const std::vector<TriangleMesh>& seq_a,
                                 const std::vector<TriangleMesh>& seq_b) {
    if (seq_a.empty() || seq_b.empty()) throw ValidationError("synchronize: empty sequence");
    return dtw(pose_codes(model, seq_a), pose_codes(model, seq_b));
}

struct MatchEntry {
    std::size_t gallery_index = 0;
    int subject_id = 0;
    double distance = 0.0;
};

/// Gallery ranked by shape-code distance to the query; ties keep gallery order.
inline std::vector<MatchEntry> rank_by_shape(const std::vector<double>& query,
                                             const std::vector<std::pair<std::vector<double>, int>>& gallery) {
    if (gallery.empty()) throw ValidationError("match: empty gallery");
    std::vector<MatchEntry> out;
    out.reserve(gallery.size());
    for (std::size_t i = 0; i < gallery.size(); ++i) out.push_back({i, gallery[i].second, euclidean(query, gallery[i].first)});
    std::stable_sort(out.begin(), out.end(), [](const MatchEntry& a, const MatchEntry& b) { return a.distance < b.distance; });
    return out;
}

inline std::vector<MatchEntry> match(const TrainedModel& model, const TriangleMesh& query,
                                     const std::vector<std::pair<TriangleMesh, int>>& gallery) {
    if (gallery.empty()) throw ValidationError("match: empty gallery");
    std::vector<std::pair<std::vector<double>, int>> codes;
    codes.reserve(gallery.size());
    for (const auto& [mesh, subject] : gallery) codes.emplace_back(model.encode_mean(mesh).z_shape, subject);
    return rank_by_shape(model.encode_mean(query).z_shape, codes);
}

struct PriorSamples {
    std::vector<TriangleMesh> meshes;
    std::optional<double> diversity;    // null for a single sample
    std::optional<double> specificity;  // null without reference meshes
};

inline constexpr std::uint64_t kPriorStream = 0x20;

/// Standard-normal codes for sample k, independent of n.
inline LatentCode prior_code(const ModelConfig& config, std::uint64_t seed, std::size_t k) {
    CounterRng rng(seed, {kPriorStream, static_cast<std::uint64_t>(k)});
    std::vector<double> z(config.latent_dim());
    for (auto& v : z) v = rng.normal();
    return LatentCode::split(z, config.d_shape);
}

inline PriorSamples sample_prior(const TrainedModel& model, std::size_t n, std::uint64_t seed,
                                 const std::vector<const TriangleMesh*>& reference = {}) {
    if (n == 0) throw ValidationError("sample: n must be at least 1");
    PriorSamples out;
    for (std::size_t k = 0; k < n; ++k) out.meshes.push_back(model.decode(prior_code(model.config(), seed, k)));
    if (n > 1) {
        double acc = 0.0;
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a + 1; b < n; ++b) acc += vertex_rmse(out.meshes[a].vertices, out.meshes[b].vertices);
        out.diversity = acc / static_cast<double>(n * (n - 1) / 2);
    }
    if (!reference.empty()) {
        double acc = 0.0;
        for (const auto& s : out.meshes) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto* r : reference) best = std::min(best, vertex_rmse(s.vertices, r->vertices));
            acc += best;
        }
        out.specificity = acc / static_cast<double>(n);
    }
    return out;
}

}  // namespace dismesh
