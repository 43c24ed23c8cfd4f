#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "binary_io.hpp"
#include "errors.hpp"

namespace dismesh {

using Vec3 = std::array<double, 3>;
using Face = std::array<std::size_t, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

/// Vertex positions over a face list. Within one dataset every mesh shares
/// the same `faces` (the template topology).
struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<Face> faces;

    std::size_t vertex_count() const { return vertices.size(); }
    std::size_t face_count() const { return faces.size(); }

    /// Pipeline-level checks: N >= 4, M >= 1, indices in range, no repeated
    /// vertex within a face.
    void validate() const {
        if (vertices.size() < 4)
            throw ValidationError("mesh has " + std::to_string(vertices.size()) + " vertices; at least 4 required");
        if (faces.empty()) throw ValidationError("mesh has no faces");
        validate_faces();
    }

    void validate_faces() const {
        for (std::size_t f = 0; f < faces.size(); ++f) {
            const auto& t = faces[f];
            for (auto i : t)
                if (i >= vertices.size())
                    throw ValidationError("face " + std::to_string(f) + " references vertex " + std::to_string(i) +
                                          " but mesh has " + std::to_string(vertices.size()));
            if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
                throw ValidationError("face " + std::to_string(f) + " repeats a vertex index");
        }
    }

    /// Fingerprint of the connectivity (vertex count + faces), independent of positions.
    std::string topology_hash() const {
        io::Fnv1a h;
        h.update_u64(vertices.size());
        h.update_u64(faces.size());
        for (const auto& t : faces)
            for (auto i : t) h.update_u64(i);
        return h.hex();
    }

    bool same_topology(const TriangleMesh& other) const {
        return vertices.size() == other.vertices.size() && faces == other.faces;
    }
};

/// Throws unless `mesh` shares the template's topology.
inline void require_template(const TriangleMesh& mesh, const TriangleMesh& tmpl, std::string_view what) {
    if (!mesh.same_topology(tmpl))
        throw ValidationError(std::string(what) + ": topology does not match the template (" +
                              std::to_string(mesh.vertex_count()) + " vertices vs " +
                              std::to_string(tmpl.vertex_count()) + ")");
}

/// Per-vertex RMSE: sqrt(mean_v |a_v - b_v|^2).
inline double vertex_rmse(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    if (a.size() != b.size() || a.empty()) throw ValidationError("vertex_rmse: vertex counts differ or are zero");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto d = a[i] - b[i];
        acc += dot(d, d);
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace detail

/// Parses the `v` / `f` subset of Wavefront OBJ. Face tokens may carry
/// `/vt/vn` suffixes, which are dropped. Other record types are ignored.
inline TriangleMesh parse_obj(std::string_view text, std::string_view source = "<memory>") {
    TriangleMesh mesh;
    std::size_t line_no = 0;
    std::vector<std::pair<std::size_t, std::array<long long, 3>>> raw_faces;
    auto where = [&] { return std::string(source) + ":" + std::to_string(line_no) + ": "; };

    while (!text.empty()) {
        auto nl = text.find('\n');
        auto line = detail::trim(text.substr(0, nl));
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = detail::trim(line.substr(0, hash));
        if (line.empty()) continue;
        auto tok = detail::split_ws(line);
        if (tok[0] == "v") {
            if (tok.size() < 4) throw ValidationError(where() + "vertex record needs 3 coordinates");
            Vec3 p{};
            for (int k = 0; k < 3; ++k) {
                auto s = tok[1 + k];
                auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), p[k]);
                if (ec != std::errc{} || ptr != s.data() + s.size())
                    throw ValidationError(where() + "bad coordinate '" + std::string(s) + "'");
            }
            mesh.vertices.push_back(p);
        } else if (tok[0] == "f") {
            if (tok.size() != 4)
                throw ValidationError(where() + "non-triangle face with " + std::to_string(tok.size() - 1) +
                                      " vertices");
            std::array<long long, 3> idx{};
            for (int k = 0; k < 3; ++k) {
                auto s = tok[1 + k].substr(0, tok[1 + k].find('/'));
                auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), idx[k]);
                if (ec != std::errc{} || ptr != s.data() + s.size())
                    throw ValidationError(where() + "bad face index '" + std::string(tok[1 + k]) + "'");
            }
            raw_faces.push_back({line_no, idx});
        }
    }

    for (const auto& [ln, idx] : raw_faces) {
        Face f{};
        for (int k = 0; k < 3; ++k) {
            // Negative indices are relative to the end of the vertex list.
            long long i = idx[k] > 0 ? idx[k] - 1 : static_cast<long long>(mesh.vertices.size()) + idx[k];
            if (idx[k] == 0 || i < 0 || i >= static_cast<long long>(mesh.vertices.size()))
                throw ValidationError(std::string(source) + ":" + std::to_string(ln) + ": face index " +
                                      std::to_string(idx[k]) + " out of range (" +
                                      std::to_string(mesh.vertices.size()) + " vertices)");
            f[k] = static_cast<std::size_t>(i);
        }
        mesh.faces.push_back(f);
    }
    if (mesh.vertices.size() < 4)
        throw ValidationError(std::string(source) + ": mesh has " + std::to_string(mesh.vertices.size()) +
                              " vertices; at least 4 required");
    mesh.validate();
    return mesh;
}

inline TriangleMesh load_obj(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("OBJ file not found: " + path.string());
    return parse_obj(io::read_file(path), path.string());
}

/// Coordinates are written with round-trip-exact formatting, so
/// load_obj(save_obj(m)) reproduces `m` bit for bit.
inline std::string to_obj(const TriangleMesh& mesh) {
    std::string out;
    out.reserve(mesh.vertices.size() * 64 + mesh.faces.size() * 24);
    for (const auto& v : mesh.vertices) {
        out += "v ";
        out += io::format_double(v[0]);
        out += ' ';
        out += io::format_double(v[1]);
        out += ' ';
        out += io::format_double(v[2]);
        out += '\n';
    }
    for (const auto& f : mesh.faces) {
        out += "f " + std::to_string(f[0] + 1) + ' ' + std::to_string(f[1] + 1) + ' ' + std::to_string(f[2] + 1) + '\n';
    }
    return out;
}

inline void save_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
    io::write_file(path, to_obj(mesh));
}

}  // namespace dismesh
