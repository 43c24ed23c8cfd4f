#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "binary_io.hpp"
#include "laplacian.hpp"
#include "mesh.hpp"
#include "sparse.hpp"

namespace dismesh {

/// One resolution of the sampling pyramid. The coarsest level has empty
/// downsample/upsample operators.
struct HierarchyLevel {
    std::size_t vertex_count = 0;
    SparseMatrix adjacency;
    SparseMatrix laplacian;   // scaled, eigenvalues in [-1, 1]
    SparseMatrix downsample;  // N_{l+1} x N_l, one unit entry per row
    SparseMatrix upsample;    // N_l x N_{l+1}, barycentric rows

    friend bool operator==(const HierarchyLevel&, const HierarchyLevel&) = default;
};

struct MeshHierarchy {
    static constexpr const char* kTieBreakTag = "qem-midpoint/min-cost-then-lexicographic-edge/v1";

    std::vector<double> ratios;
    std::vector<HierarchyLevel> levels;

    std::size_t level_count() const { return levels.size(); }

    /// Hash of every serialized operator plus the level sizes.
    std::string fingerprint() const {
        io::Fnv1a h;
        h.update(kTieBreakTag);
        h.update_u64(levels.size());
        for (const auto& lv : levels) {
            h.update_u64(lv.vertex_count);
            h.update(lv.adjacency.serialize());
            h.update(lv.laplacian.serialize());
            h.update(lv.downsample.serialize());
            h.update(lv.upsample.serialize());
        }
        return h.hex();
    }

    friend bool operator==(const MeshHierarchy&, const MeshHierarchy&) = default;
};

namespace detail {

using Quadric = std::array<double, 16>;

inline Quadric face_quadric(const Vec3& p0, const Vec3& p1, const Vec3& p2) {
    Quadric q{};
    auto n = cross(p1 - p0, p2 - p0);
    const double len = norm(n);
    if (len == 0.0) return q;
    n = (1.0 / len) * n;
    const std::array<double, 4> plane{n[0], n[1], n[2], -dot(n, p0)};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) q[i * 4 + j] = plane[i] * plane[j];
    return q;
}

inline double quadric_error(const Quadric& q, const Vec3& p) {
    const std::array<double, 4> v{p[0], p[1], p[2], 1.0};
    double e = 0.0;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) e += v[i] * q[i * 4 + j] * v[j];
    return e;
}

/// Closest point on triangle (a, b, c) to p, returned as barycentric weights.
/// Vertex and edge regions return exact zeros for the unused corners.
inline std::array<double, 3> closest_barycentric(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = dot(ab, ap), d2 = dot(ac, ap);
    if (d1 <= 0.0 && d2 <= 0.0) return {1.0, 0.0, 0.0};
    const Vec3 bp = p - b;
    const double d3 = dot(ab, bp), d4 = dot(ac, bp);
    if (d3 >= 0.0 && d4 <= d3) return {0.0, 1.0, 0.0};
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
        const double v = d1 / (d1 - d3);
        return {1.0 - v, v, 0.0};
    }
    const Vec3 cp = p - c;
    const double d5 = dot(ab, cp), d6 = dot(ac, cp);
    if (d6 >= 0.0 && d5 <= d6) return {0.0, 0.0, 1.0};
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
        const double w = d2 / (d2 - d6);
        return {1.0 - w, 0.0, w};
    }
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return {0.0, 1.0 - w, w};
    }
    const double denom = 1.0 / (va + vb + vc);
    const double v = vb * denom, w = vc * denom;
    return {1.0 - v - w, v, w};
}

}  // namespace detail

struct DecimationResult {
    TriangleMesh coarse;
    std::vector<std::size_t> survivors;  // fine index of each coarse vertex, ascending
};

/// Quadric-error edge collapse down to `target` vertices. Each collapse
/// merges the higher-index endpoint into the lower one, placed at the edge
/// midpoint. The edge with minimal error wins; ties go to the
/// lexicographically smallest (min index, max index) pair. Collapses that
/// violate the link condition are skipped.
inline DecimationResult decimate(const TriangleMesh& mesh, std::size_t target) {
    mesh.validate();
    const auto n = mesh.vertex_count();
    std::vector<Vec3> pos = mesh.vertices;
    std::vector<detail::Quadric> quadric(n, detail::Quadric{});
    for (const auto& f : mesh.faces) {
        const auto q = detail::face_quadric(pos[f[0]], pos[f[1]], pos[f[2]]);
        for (auto v : f)
            for (int k = 0; k < 16; ++k) quadric[v][k] += q[k];
    }
    std::vector<Face> faces = mesh.faces;
    std::vector<bool> alive(n, true);
    std::size_t alive_count = n;

    while (alive_count > target) {
        std::vector<std::set<std::size_t>> nbr(n);
        std::vector<std::vector<std::size_t>> incident(n);
        for (std::size_t fi = 0; fi < faces.size(); ++fi) {
            const auto& f = faces[fi];
            for (int k = 0; k < 3; ++k) {
                nbr[f[k]].insert(f[(k + 1) % 3]);
                nbr[f[k]].insert(f[(k + 2) % 3]);
                incident[f[k]].push_back(fi);
            }
        }
        std::map<std::pair<std::size_t, std::size_t>, int> edge_faces;
        for (const auto& f : faces)
            for (int k = 0; k < 3; ++k) ++edge_faces[std::minmax(f[k], f[(k + 1) % 3])];
        std::vector<bool> on_boundary(n, false);
        for (const auto& [e, count] : edge_faces)
            if (count == 1) on_boundary[e.first] = on_boundary[e.second] = true;
        std::optional<std::tuple<double, std::size_t, std::size_t>> best;
        for (std::size_t a = 0; a < n; ++a) {
            for (auto b : nbr[a]) {
                if (b <= a) continue;
                std::set<std::size_t> opposite;
                for (auto fi : incident[a]) {
                    const auto& f = faces[fi];
                    if (f[0] != b && f[1] != b && f[2] != b) continue;
                    for (auto v : f)
                        if (v != a && v != b) opposite.insert(v);
                }
                std::set<std::size_t> shared;
                std::set_intersection(nbr[a].begin(), nbr[a].end(), nbr[b].begin(), nbr[b].end(),
                                      std::inserter(shared, shared.begin()));
                if (shared != opposite) continue;
                // An interior edge joining two boundary vertices would pinch the surface.
                if (on_boundary[a] && on_boundary[b] && edge_faces[{a, b}] != 1) continue;
                detail::Quadric q;
                for (int k = 0; k < 16; ++k) q[k] = quadric[a][k] + quadric[b][k];
                const double cost = detail::quadric_error(q, 0.5 * (pos[a] + pos[b]));
                std::tuple<double, std::size_t, std::size_t> cand{cost, a, b};
                if (!best || cand < *best) best = cand;
            }
        }
        if (!best)
            throw ValidationError("decimation stuck at " + std::to_string(alive_count) + " vertices (target " +
                                  std::to_string(target) + "): no edge can be collapsed without breaking manifoldness");
        const auto [cost, a, b] = *best;
        pos[a] = 0.5 * (pos[a] + pos[b]);
        for (int k = 0; k < 16; ++k) quadric[a][k] += quadric[b][k];
        alive[b] = false;
        --alive_count;
        std::vector<Face> next;
        next.reserve(faces.size());
        for (auto f : faces) {
            for (auto& v : f)
                if (v == b) v = a;
            if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
            next.push_back(f);
        }
        faces = std::move(next);
    }

    DecimationResult out;
    std::vector<std::size_t> remap(n, std::numeric_limits<std::size_t>::max());
    for (std::size_t v = 0; v < n; ++v) {
        if (!alive[v]) continue;
        remap[v] = out.survivors.size();
        out.survivors.push_back(v);
        out.coarse.vertices.push_back(pos[v]);
    }
    for (const auto& f : faces) out.coarse.faces.push_back({remap[f[0]], remap[f[1]], remap[f[2]]});
    return out;
}

/// Barycentric projection of every fine vertex onto its nearest coarse face
/// (ties: lowest face index). Zero weights are dropped.
inline SparseMatrix barycentric_upsampler(const std::vector<Vec3>& fine, const TriangleMesh& coarse) {
    std::vector<Triplet> t;
    for (std::size_t v = 0; v < fine.size(); ++v) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_face = 0;
        std::array<double, 3> best_w{};
        for (std::size_t fi = 0; fi < coarse.faces.size(); ++fi) {
            const auto& f = coarse.faces[fi];
            const auto& a = coarse.vertices[f[0]];
            const auto& b = coarse.vertices[f[1]];
            const auto& c = coarse.vertices[f[2]];
            const auto w = detail::closest_barycentric(fine[v], a, b, c);
            const Vec3 q = w[0] * a + w[1] * b + w[2] * c;
            const auto d = fine[v] - q;
            const double dist = dot(d, d);
            if (dist < best) {
                best = dist;
                best_face = fi;
                best_w = w;
            }
        }
        for (int k = 0; k < 3; ++k)
            if (best_w[k] != 0.0) t.push_back({v, coarse.faces[best_face][k], best_w[k]});
    }
    return {fine.size(), coarse.vertex_count(), std::move(t)};
}

inline MeshHierarchy build_hierarchy(const TriangleMesh& mesh, const std::vector<double>& ratios) {
    if (ratios.empty()) throw ValidationError("build_hierarchy: ratios must be non-empty");
    for (double r : ratios)
        if (!(r > 0.0 && r < 1.0)) throw ValidationError("build_hierarchy: ratio " + io::format_double(r) + " not in (0,1)");
    mesh.validate();

    MeshHierarchy h;
    h.ratios = ratios;
    TriangleMesh current = mesh;
    for (double r : ratios) {
        const auto n = current.vertex_count();
        const auto target = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * r - 1e-9));
        if (target < 8)
            throw ValidationError("build_hierarchy: ratio " + io::format_double(r) + " shrinks level of " +
                                  std::to_string(n) + " vertices below 8");
        auto dec = decimate(current, target);
        HierarchyLevel lv;
        lv.vertex_count = n;
        lv.adjacency = adjacency_from_faces(n, current.faces);
        lv.laplacian = scaled_laplacian(lv.adjacency);
        std::vector<Triplet> down;
        for (std::size_t i = 0; i < dec.survivors.size(); ++i) down.push_back({i, dec.survivors[i], 1.0});
        lv.downsample = SparseMatrix(dec.survivors.size(), n, std::move(down));
        lv.upsample = barycentric_upsampler(current.vertices, dec.coarse);
        h.levels.push_back(std::move(lv));
        current = std::move(dec.coarse);
    }
    HierarchyLevel last;
    last.vertex_count = current.vertex_count();
    last.adjacency = adjacency_from_faces(current.vertex_count(), current.faces);
    last.laplacian = scaled_laplacian(last.adjacency);
    h.levels.push_back(std::move(last));
    return h;
}

/// Directory layout: meta.json plus level<l>_{adjacency,laplacian,down,up}.bin.
inline void save_hierarchy(const MeshHierarchy& h, const std::filesystem::path& dir) {
    io::ensure_directory(dir);
    nlohmann::json meta;
    meta["format"] = "dismesh-hierarchy";
    meta["version"] = 1;
    meta["tie_break"] = MeshHierarchy::kTieBreakTag;
    meta["ratios"] = h.ratios;
    std::vector<std::size_t> sizes;
    for (const auto& lv : h.levels) sizes.push_back(lv.vertex_count);
    meta["level_sizes"] = sizes;
    meta["fingerprint"] = h.fingerprint();
    io::write_file(dir / "meta.json", meta.dump(2) + "\n");
    for (std::size_t l = 0; l < h.levels.size(); ++l) {
        const auto& lv = h.levels[l];
        const auto stem = "level" + std::to_string(l) + "_";
        io::write_file(dir / (stem + "adjacency.bin"), lv.adjacency.serialize());
        io::write_file(dir / (stem + "laplacian.bin"), lv.laplacian.serialize());
        if (l + 1 < h.levels.size()) {
            io::write_file(dir / (stem + "down.bin"), lv.downsample.serialize());
            io::write_file(dir / (stem + "up.bin"), lv.upsample.serialize());
        }
    }
}

inline MeshHierarchy load_hierarchy(const std::filesystem::path& dir) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(io::read_file(dir / "meta.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("hierarchy meta.json: " + std::string(e.what()));
    }
    if (meta.value("tie_break", std::string{}) != MeshHierarchy::kTieBreakTag)
        throw ValidationError("hierarchy was built with an incompatible decimation rule");
    MeshHierarchy h;
    h.ratios = meta.at("ratios").get<std::vector<double>>();
    const auto sizes = meta.at("level_sizes").get<std::vector<std::size_t>>();
    for (std::size_t l = 0; l < sizes.size(); ++l) {
        HierarchyLevel lv;
        lv.vertex_count = sizes[l];
        const auto stem = "level" + std::to_string(l) + "_";
        lv.adjacency = SparseMatrix::deserialize(io::read_file(dir / (stem + "adjacency.bin")));
        lv.laplacian = SparseMatrix::deserialize(io::read_file(dir / (stem + "laplacian.bin")));
        if (l + 1 < sizes.size()) {
            lv.downsample = SparseMatrix::deserialize(io::read_file(dir / (stem + "down.bin")));
            lv.upsample = SparseMatrix::deserialize(io::read_file(dir / (stem + "up.bin")));
        }
        h.levels.push_back(std::move(lv));
    }
    if (meta.contains("fingerprint") && meta["fingerprint"].get<std::string>() != h.fingerprint())
        throw ValidationError("hierarchy fingerprint does not match its operator files");
    return h;
}

}  // namespace dismesh
