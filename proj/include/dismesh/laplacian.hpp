#pragma once

#include <cmath>
#include <set>
#include <utility>
#include <vector>

#include "mesh.hpp"
#include "sparse.hpp"

namespace dismesh {

/// Binary symmetric adjacency from triangle edges.
inline SparseMatrix adjacency_from_faces(std::size_t vertex_count, const std::vector<Face>& faces) {
    std::set<std::pair<std::size_t, std::size_t>> edges;
    for (const auto& f : faces) {
        for (int k = 0; k < 3; ++k) {
            auto a = f[k], b = f[(k + 1) % 3];
            if (a >= vertex_count || b >= vertex_count) throw ValidationError("face index out of range");
            if (a == b) continue;
            edges.insert({a, b});
            edges.insert({b, a});
        }
    }
    std::vector<Triplet> t;
    t.reserve(edges.size());
    for (const auto& [a, b] : edges) t.push_back({a, b, 1.0});
    return {vertex_count, vertex_count, std::move(t)};
}

/// L~ = L - I with L = I - D^-1/2 A D^-1/2, i.e. the normalized Laplacian
/// rescaled to [-1, 1] using lambda_max = 2. Degree-0 vertices get D^-1/2 = 0.
/// Only off-diagonal entries are stored (the diagonal of L~ is identically zero).
inline SparseMatrix scaled_laplacian(const SparseMatrix& adjacency) {
    if (adjacency.rows() != adjacency.cols()) throw ValidationError("adjacency must be square");
    const auto n = adjacency.rows();
    std::vector<double> inv_sqrt_deg(n, 0.0);
    auto rp = adjacency.row_ptr();
    auto vals = adjacency.values();
    for (std::size_t r = 0; r < n; ++r) {
        double d = 0.0;
        for (auto k = rp[r]; k < rp[r + 1]; ++k) d += vals[k];
        inv_sqrt_deg[r] = d > 0.0 ? 1.0 / std::sqrt(d) : 0.0;
    }
    std::vector<Triplet> t;
    t.reserve(adjacency.nnz());
    for (const auto& e : adjacency.triplets()) {
        if (e.row == e.col) continue;
        t.push_back({e.row, e.col, -(inv_sqrt_deg[e.row] * inv_sqrt_deg[e.col]) * e.value});
    }
    return {n, n, std::move(t)};
}

inline SparseMatrix normalized_scaled_laplacian(const TriangleMesh& mesh) {
    mesh.validate_faces();
    return scaled_laplacian(adjacency_from_faces(mesh.vertex_count(), mesh.faces));
}

}  // namespace dismesh
