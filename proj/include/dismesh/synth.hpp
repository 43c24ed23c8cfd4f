#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "binary_io.hpp"
#include "errors.hpp"
#include "mesh.hpp"
#include "prng.hpp"

namespace dismesh {

/// Articulated tube: kSegments stacked cylinders, kJoints = kSegments - 1
/// hinges about the x axis at the segment boundaries.
namespace tube {
inline constexpr std::size_t kSegments = 4;
inline constexpr std::size_t kJoints = kSegments - 1;
inline constexpr std::size_t kRingResolution = 16;
inline constexpr std::size_t kRingsPerSegment = 6;
inline constexpr std::size_t kRings = kSegments * kRingsPerSegment;
inline constexpr std::size_t kVertexCount = kRings * kRingResolution + 2;

inline constexpr double kRadiusMin = 0.05, kRadiusMax = 0.5;
inline constexpr double kLengthMin = 0.3, kLengthMax = 1.5;
inline constexpr double kAngleLimit = std::numbers::pi / 2.0;

/// Vertex id of ring r, spoke k. Vertex 0 is the bottom pole, the last one the top pole.
inline constexpr std::size_t ring_vertex(std::size_t r, std::size_t k) { return 1 + r * kRingResolution + k; }
}  // namespace tube

struct ShapeParams {
    std::vector<double> segment_radii;
    std::vector<double> segment_lengths;
    int subject_id = 0;

    void validate() const {
        if (segment_radii.size() != tube::kSegments || segment_lengths.size() != tube::kSegments)
            throw ValidationError("ShapeParams needs " + std::to_string(tube::kSegments) + " radii and lengths");
        for (double r : segment_radii)
            if (!(r >= tube::kRadiusMin && r <= tube::kRadiusMax))
                throw ValidationError("segment radius " + io::format_double(r) + " outside [0.05, 0.5]");
        for (double l : segment_lengths)
            if (!(l >= tube::kLengthMin && l <= tube::kLengthMax))
                throw ValidationError("segment length " + io::format_double(l) + " outside [0.3, 1.5]");
    }

    /// Radii then lengths, each mapped affinely onto [-1, 1].
    std::vector<double> normalized() const {
        std::vector<double> out;
        for (double r : segment_radii) out.push_back((2.0 * r - tube::kRadiusMin - tube::kRadiusMax) / (tube::kRadiusMax - tube::kRadiusMin));
        for (double l : segment_lengths) out.push_back((2.0 * l - tube::kLengthMin - tube::kLengthMax) / (tube::kLengthMax - tube::kLengthMin));
        return out;
    }

    friend bool operator==(const ShapeParams&, const ShapeParams&) = default;
};

struct PoseParams {
    std::vector<double> joint_angles;  // radians

    void validate() const {
        if (joint_angles.size() != tube::kJoints)
            throw ValidationError("PoseParams needs " + std::to_string(tube::kJoints) + " joint angles");
        for (double a : joint_angles)
            if (!(std::abs(a) <= tube::kAngleLimit))
                throw ValidationError("joint angle " + io::format_double(a) + " outside [-pi/2, pi/2]");
    }

    std::vector<double> normalized() const {
        std::vector<double> out;
        for (double a : joint_angles) out.push_back(a / tube::kAngleLimit);
        return out;
    }

    friend bool operator==(const PoseParams&, const PoseParams&) = default;
};

inline constexpr std::size_t kShapeFactorDim = 2 * tube::kSegments;
inline constexpr std::size_t kPoseFactorDim = tube::kJoints;

struct FactorLabels {
    int subject_id = 0;
    ShapeParams shape;
    PoseParams pose;
    std::optional<int> sequence_id;
    std::optional<int> time_index;
    std::optional<double> canonical_time;  // sequences only: warp(k / (n - 1))
};

/// Shared face list of every tube mesh.
inline const std::vector<Face>& tube_faces() {
    static const std::vector<Face> faces = [] {
        using namespace tube;
        std::vector<Face> f;
        const std::size_t top = kVertexCount - 1;
        for (std::size_t k = 0; k < kRingResolution; ++k) {
            const auto k1 = (k + 1) % kRingResolution;
            f.push_back({0, ring_vertex(0, k1), ring_vertex(0, k)});
        }
        for (std::size_t r = 0; r + 1 < kRings; ++r)
            for (std::size_t k = 0; k < kRingResolution; ++k) {
                const auto k1 = (k + 1) % kRingResolution;
                f.push_back({ring_vertex(r, k), ring_vertex(r, k1), ring_vertex(r + 1, k1)});
                f.push_back({ring_vertex(r, k), ring_vertex(r + 1, k1), ring_vertex(r + 1, k)});
            }
        for (std::size_t k = 0; k < kRingResolution; ++k) {
            const auto k1 = (k + 1) % kRingResolution;
            f.push_back({top, ring_vertex(kRings - 1, k), ring_vertex(kRings - 1, k1)});
        }
        return f;
    }();
    return faces;
}

namespace detail {

/// Rotation about the x axis through the point (0, 0, pivot_z).
inline Vec3 rotate_about_joint(const Vec3& p, double pivot_z, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    const double y = p[1], z = p[2] - pivot_z;
    return {p[0], c * y - s * z, s * y + c * z + pivot_z};
}

}  // namespace detail

/// Deterministic tube mesh for (shape, pose). Geometry above joint j is
/// rotated by joint_angles[j-1]; transforms compose root-to-tip.
inline TriangleMesh generate_mesh(const ShapeParams& shape, const PoseParams& pose) {
    using namespace tube;
    shape.validate();
    pose.validate();

    std::vector<double> base(kSegments + 1, 0.0);  // base[s] = height where segment s starts
    for (std::size_t s = 0; s < kSegments; ++s) base[s + 1] = base[s] + shape.segment_lengths[s];

    // Segment s sits above joints 1..s.
    auto place = [&](Vec3 p, std::size_t segment) {
        for (std::size_t j = segment; j >= 1; --j) p = detail::rotate_about_joint(p, base[j], pose.joint_angles[j - 1]);
        return p;
    };

    TriangleMesh mesh;
    mesh.vertices.resize(kVertexCount);
    mesh.vertices[0] = {0.0, 0.0, 0.0};
    for (std::size_t r = 0; r < kRings; ++r) {
        const auto seg = r / kRingsPerSegment;
        const auto i = r % kRingsPerSegment;
        const double z = base[seg] + shape.segment_lengths[seg] * (static_cast<double>(i) + 0.5) / static_cast<double>(kRingsPerSegment);
        const double radius = shape.segment_radii[seg];
        for (std::size_t k = 0; k < kRingResolution; ++k) {
            const double theta = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(kRingResolution);
            mesh.vertices[ring_vertex(r, k)] = place({radius * std::cos(theta), radius * std::sin(theta), z}, seg);
        }
    }
    mesh.vertices[kVertexCount - 1] = place({0.0, 0.0, base[kSegments]}, kSegments - 1);
    mesh.faces = tube_faces();
    return mesh;
}

inline TriangleMesh tube_template() {
    ShapeParams s{std::vector<double>(tube::kSegments, 0.2), std::vector<double>(tube::kSegments, 1.0), 0};
    return generate_mesh(s, PoseParams{std::vector<double>(tube::kJoints, 0.0)});
}

// Stream ids for the counter-based generator.
inline constexpr std::uint64_t kShapeStream = 1;
inline constexpr std::uint64_t kPoseStream = 2;
inline constexpr std::uint64_t kTrajectoryStream = 3;

inline ShapeParams draw_shape(std::uint64_t seed, int subject) {
    CounterRng rng(seed, {kShapeStream, static_cast<std::uint64_t>(subject)});
    ShapeParams s;
    s.subject_id = subject;
    for (std::size_t i = 0; i < tube::kSegments; ++i) s.segment_radii.push_back(rng.uniform(tube::kRadiusMin, tube::kRadiusMax));
    for (std::size_t i = 0; i < tube::kSegments; ++i) s.segment_lengths.push_back(rng.uniform(tube::kLengthMin, tube::kLengthMax));
    return s;
}

inline PoseParams draw_pose(std::uint64_t seed, int subject, int pose_index) {
    CounterRng rng(seed, {kPoseStream, static_cast<std::uint64_t>(subject), static_cast<std::uint64_t>(pose_index)});
    PoseParams p;
    for (std::size_t j = 0; j < tube::kJoints; ++j) p.joint_angles.push_back(rng.uniform(-tube::kAngleLimit, tube::kAngleLimit));
    return p;
}

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

/// Subject-disjoint 70/15/15 split in subject index order. Train keeps at
/// least one subject and test keeps at least one; validation may be empty
/// for tiny datasets.
inline std::vector<Split> split_subjects(std::size_t n_subjects) {
    if (n_subjects < 2) throw ValidationError("need at least 2 subjects to split");
    auto n_train = static_cast<std::size_t>(std::floor(0.7 * static_cast<double>(n_subjects) + 0.5));
    n_train = std::clamp<std::size_t>(n_train, 1, n_subjects - 1);
    const auto n_val = (n_subjects - n_train) / 2;
    std::vector<Split> out(n_subjects, Split::Test);
    for (std::size_t i = 0; i < n_subjects; ++i) {
        if (i < n_train) out[i] = Split::Train;
        else if (i < n_train + n_val) out[i] = Split::Val;
    }
    return out;
}

struct DatasetSample {
    std::string mesh_path;  // relative to the manifest directory
    int pose_index = 0;
    FactorLabels labels;
};

struct DatasetManifest {
    static constexpr int kVersion = 1;

    std::string template_topology_hash;
    std::uint64_t generator_seed = 0;
    std::size_t n_subjects = 0;
    std::size_t n_poses_per_subject = 0;
    std::vector<ShapeParams> subjects;  // indexed by subject id
    std::vector<Split> split;           // indexed by subject id
    std::vector<DatasetSample> samples;
    std::filesystem::path root;  // directory holding manifest.json; not serialized

    std::vector<std::size_t> samples_in(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (split.at(static_cast<std::size_t>(samples[i].labels.subject_id)) == s) out.push_back(i);
        return out;
    }

    std::vector<int> subjects_in(Split s) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < split.size(); ++i)
            if (split[i] == s) out.push_back(static_cast<int>(i));
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format"] = "dismesh-dataset";
        j["version"] = kVersion;
        j["generator_seed"] = generator_seed;
        j["template_topology_hash"] = template_topology_hash;
        j["n_subjects"] = n_subjects;
        j["n_poses_per_subject"] = n_poses_per_subject;
        j["tube"] = {{"segments", tube::kSegments},
                     {"joints", tube::kJoints},
                     {"ring_resolution", tube::kRingResolution},
                     {"rings_per_segment", tube::kRingsPerSegment}};
        nlohmann::json subj = nlohmann::json::array();
        for (std::size_t i = 0; i < subjects.size(); ++i)
            subj.push_back({{"subject_id", subjects[i].subject_id},
                            {"split", split_name(split[i])},
                            {"segment_radii", subjects[i].segment_radii},
                            {"segment_lengths", subjects[i].segment_lengths}});
        j["subjects"] = subj;
        nlohmann::json smp = nlohmann::json::array();
        for (const auto& s : samples)
            smp.push_back({{"mesh", s.mesh_path},
                           {"subject_id", s.labels.subject_id},
                           {"pose_index", s.pose_index},
                           {"joint_angles", s.labels.pose.joint_angles}});
        j["samples"] = smp;
        return j;
    }

    static DatasetManifest from_json(const nlohmann::json& j) {
        try {
            if (j.at("format").get<std::string>() != "dismesh-dataset")
                throw ValidationError("manifest: unexpected format tag");
            if (j.at("version").get<int>() != kVersion)
                throw ValidationError("manifest: unsupported version " + j.at("version").dump());
            DatasetManifest m;
            m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
            m.template_topology_hash = j.at("template_topology_hash").get<std::string>();
            m.n_subjects = j.at("n_subjects").get<std::size_t>();
            m.n_poses_per_subject = j.at("n_poses_per_subject").get<std::size_t>();
            for (const auto& s : j.at("subjects")) {
                ShapeParams sp;
                sp.subject_id = s.at("subject_id").get<int>();
                sp.segment_radii = s.at("segment_radii").get<std::vector<double>>();
                sp.segment_lengths = s.at("segment_lengths").get<std::vector<double>>();
                sp.validate();
                if (sp.subject_id != static_cast<int>(m.subjects.size()))
                    throw ValidationError("manifest: subjects must be listed in id order");
                const auto name = s.at("split").get<std::string>();
                if (name == "train") m.split.push_back(Split::Train);
                else if (name == "val") m.split.push_back(Split::Val);
                else if (name == "test") m.split.push_back(Split::Test);
                else throw ValidationError("manifest: unknown split '" + name + "'");
                m.subjects.push_back(std::move(sp));
            }
            for (const auto& s : j.at("samples")) {
                DatasetSample ds;
                ds.mesh_path = s.at("mesh").get<std::string>();
                ds.pose_index = s.at("pose_index").get<int>();
                ds.labels.subject_id = s.at("subject_id").get<int>();
                if (ds.labels.subject_id < 0 || static_cast<std::size_t>(ds.labels.subject_id) >= m.subjects.size())
                    throw ValidationError("manifest: sample references unknown subject");
                ds.labels.shape = m.subjects[static_cast<std::size_t>(ds.labels.subject_id)];
                ds.labels.pose.joint_angles = s.at("joint_angles").get<std::vector<double>>();
                ds.labels.pose.validate();
                m.samples.push_back(std::move(ds));
            }
            return m;
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("manifest: ") + e.what());
        }
    }
};

/// Accepts either the dataset directory or the manifest.json path itself.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    const auto file = std::filesystem::is_directory(path) ? path / "manifest.json" : path;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(file));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("manifest " + file.string() + ": " + e.what());
    }
    auto m = DatasetManifest::from_json(j);
    m.root = file.parent_path();
    return m;
}

/// Loads every referenced mesh, checking each against the template hash.
inline std::vector<TriangleMesh> load_dataset_meshes(const DatasetManifest& m) {
    std::vector<TriangleMesh> out;
    out.reserve(m.samples.size());
    for (const auto& s : m.samples) {
        auto mesh = load_obj(m.root / s.mesh_path);
        if (mesh.topology_hash() != m.template_topology_hash)
            throw ValidationError("mesh " + s.mesh_path + " does not match the dataset template topology");
        out.push_back(std::move(mesh));
    }
    return out;
}

inline DatasetManifest sample_dataset(std::size_t n_subjects, std::size_t n_poses_per_subject, std::uint64_t seed,
                                      const std::filesystem::path& out_dir) {
    if (n_subjects < 2) throw ValidationError("sample_dataset: need at least 2 subjects");
    if (n_poses_per_subject < 2) throw ValidationError("sample_dataset: need at least 2 poses per subject");
    io::ensure_directory(out_dir / "meshes");

    DatasetManifest m;
    m.generator_seed = seed;
    m.n_subjects = n_subjects;
    m.n_poses_per_subject = n_poses_per_subject;
    m.template_topology_hash = tube_template().topology_hash();
    m.split = split_subjects(n_subjects);
    m.root = out_dir;
    for (std::size_t s = 0; s < n_subjects; ++s) {
        auto shape = draw_shape(seed, static_cast<int>(s));
        for (std::size_t p = 0; p < n_poses_per_subject; ++p) {
            DatasetSample ds;
            ds.pose_index = static_cast<int>(p);
            ds.labels.subject_id = static_cast<int>(s);
            ds.labels.shape = shape;
            ds.labels.pose = draw_pose(seed, static_cast<int>(s), static_cast<int>(p));
            char name[64];
            std::snprintf(name, sizeof name, "meshes/s%03zu_p%03zu.obj", s, p);
            ds.mesh_path = name;
            save_obj(generate_mesh(shape, ds.labels.pose), out_dir / ds.mesh_path);
            m.samples.push_back(std::move(ds));
        }
        m.subjects.push_back(std::move(shape));
    }
    io::write_file(out_dir / "manifest.json", m.to_json().dump(2) + "\n");
    return m;
}

using Warp = std::function<double(double)>;

/// Canonical pose trajectory of a sequence: one sinusoid per joint, phases
/// drawn from the seed, amplitude 0.8 * pi/2.
inline PoseParams trajectory_pose(std::uint64_t seed, double t) {
    CounterRng rng(seed, {kTrajectoryStream});
    PoseParams p;
    for (std::size_t j = 0; j < tube::kJoints; ++j) {
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        p.joint_angles.push_back(0.8 * tube::kAngleLimit * std::sin(2.0 * std::numbers::pi * t + phase));
    }
    return p;
}

/// Frames k = 0..n-1 posed at trajectory time warp(k / (n - 1)).
inline std::vector<std::pair<TriangleMesh, FactorLabels>> make_sequence(const ShapeParams& shape, std::size_t n_frames,
                                                                        const Warp& warp, std::uint64_t seed) {
    if (n_frames < 2) throw ValidationError("make_sequence: need at least 2 frames");
    std::vector<double> times(n_frames);
    for (std::size_t k = 0; k < n_frames; ++k)
        times[k] = warp(static_cast<double>(k) / static_cast<double>(n_frames - 1));
    if (std::abs(times.front()) > 1e-12 || std::abs(times.back() - 1.0) > 1e-12)
        throw ValidationError("make_sequence: warp must map 0 to 0 and 1 to 1");
    for (std::size_t k = 1; k < n_frames; ++k)
        if (!(times[k] > times[k - 1]))
            throw ValidationError("make_sequence: warp is not strictly increasing at frame " + std::to_string(k));

    std::vector<std::pair<TriangleMesh, FactorLabels>> out;
    for (std::size_t k = 0; k < n_frames; ++k) {
        FactorLabels lab;
        lab.subject_id = shape.subject_id;
        lab.shape = shape;
        lab.pose = trajectory_pose(seed, times[k]);
        lab.sequence_id = static_cast<int>(seed);
        lab.time_index = static_cast<int>(k);
        lab.canonical_time = times[k];
        out.emplace_back(generate_mesh(shape, lab.pose), std::move(lab));
    }
    return out;
}

}  // namespace dismesh
