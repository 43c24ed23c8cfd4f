#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "dismesh/hierarchy.hpp"
#include "dismesh/synth.hpp"
#include "test_support.hpp"

using namespace dismesh;

namespace {

ShapeParams uniform_shape(double radius, double length) {
    return {std::vector<double>(tube::kSegments, radius), std::vector<double>(tube::kSegments, length), 0};
}

PoseParams pose(double a, double b, double c) { return {{a, b, c}}; }

Vec3 ring_centroid(const TriangleMesh& m, std::size_t r) {
    Vec3 c{0, 0, 0};
    for (std::size_t k = 0; k < tube::kRingResolution; ++k) c = c + m.vertices[tube::ring_vertex(r, k)];
    return (1.0 / tube::kRingResolution) * c;
}

double ring_spread(const TriangleMesh& m, std::size_t r) {
    const auto c = ring_centroid(m, r);
    double best = 0.0;
    for (std::size_t k = 0; k < tube::kRingResolution; ++k)
        best = std::max(best, norm(m.vertices[tube::ring_vertex(r, k)] - c));
    return best;
}

}  // namespace

TEST(GenerateMesh, TemplateSize) {
    auto m = tube_template();
    EXPECT_EQ(m.vertex_count(), 386u);
    EXPECT_NO_THROW(m.validate());
    // Closed surface: every edge is shared by exactly two faces.
    std::map<std::pair<std::size_t, std::size_t>, int> edges;
    for (const auto& f : m.faces)
        for (int k = 0; k < 3; ++k) ++edges[std::minmax(f[k], f[(k + 1) % 3])];
    for (const auto& [e, count] : edges) EXPECT_EQ(count, 2);
}

TEST(GenerateMesh, StraightTube) {
    auto m = generate_mesh(uniform_shape(0.2, 1.0), pose(0, 0, 0));
    double max_xy = 0.0, max_z = 0.0;
    for (const auto& v : m.vertices) {
        max_xy = std::max({max_xy, std::abs(v[0]), std::abs(v[1])});
        max_z = std::max(max_z, v[2]);
    }
    EXPECT_NEAR(max_xy, 0.2, 1e-12);
    EXPECT_NEAR(max_z, 4.0, 1e-12);
}

TEST(GenerateMesh, FirstJointIsRigidRotation) {
    const auto shape = uniform_shape(0.2, 1.0);
    const auto rest = generate_mesh(shape, pose(0, 0, 0));
    const auto bent = generate_mesh(shape, pose(std::numbers::pi / 2, 0, 0));
    // Joint 1 sits at height 1.0; undo a rotation about x through (0,0,1).
    for (std::size_t v = 0; v < rest.vertex_count(); ++v) {
        if (rest.vertices[v][2] <= 1.0) {
            EXPECT_EQ(bent.vertices[v], rest.vertices[v]);
            continue;
        }
        const auto back = detail::rotate_about_joint(bent.vertices[v], 1.0, -std::numbers::pi / 2);
        EXPECT_LT(norm(back - rest.vertices[v]), 1e-9);
    }
}

TEST(GenerateMesh, Deterministic) {
    const auto shape = draw_shape(3, 1);
    const auto p = draw_pose(3, 1, 2);
    EXPECT_EQ(generate_mesh(shape, p).vertices, generate_mesh(shape, p).vertices);
}

TEST(GenerateMesh, RejectsOutOfRangeParameters) {
    EXPECT_THROW(generate_mesh(uniform_shape(0.6, 1.0), pose(0, 0, 0)), ValidationError);
    EXPECT_THROW(generate_mesh(uniform_shape(0.2, 0.1), pose(0, 0, 0)), ValidationError);
    EXPECT_THROW(generate_mesh(uniform_shape(0.2, 1.0), pose(2.0, 0, 0)), ValidationError);
    EXPECT_THROW(generate_mesh(uniform_shape(0.2, 1.0), PoseParams{{0.0}}), ValidationError);
}

TEST(GenerateMesh, FactorIndependence) {
    const auto a = draw_shape(11, 0), b = draw_shape(11, 1);
    const auto p = draw_pose(11, 0, 0), q = draw_pose(11, 0, 1);
    // Same shape, different pose: identical ring radii.
    const auto m1 = generate_mesh(a, p), m2 = generate_mesh(a, q);
    for (std::size_t r = 0; r < tube::kRings; ++r) EXPECT_NEAR(ring_spread(m1, r), ring_spread(m2, r), 1e-9);
    // Same pose, different shape: the ring frames rotate identically. The
    // direction from ring centroid to spoke 0 is the local x axis and spoke 4
    // gives the rotated local y axis; both only depend on the pose.
    const auto n1 = generate_mesh(a, p), n2 = generate_mesh(b, p);
    for (std::size_t r = 0; r < tube::kRings; ++r) {
        auto axis = [&](const TriangleMesh& m, std::size_t k) {
            auto d = m.vertices[tube::ring_vertex(r, k)] - ring_centroid(m, r);
            return (1.0 / norm(d)) * d;
        };
        EXPECT_LT(norm(axis(n1, 4) - axis(n2, 4)), 1e-9);
        EXPECT_LT(norm(axis(n1, 0) - axis(n2, 0)), 1e-9);
    }
}

TEST(GenerateMesh, TopologyConstant) {
    const auto h = tube_template().topology_hash();
    for (int s = 0; s < 5; ++s) EXPECT_EQ(generate_mesh(draw_shape(2, s), draw_pose(2, s, s)).topology_hash(), h);
}

TEST(GenerateMesh, HierarchyHasThreeLevels) {
    auto h = build_hierarchy(tube_template(), {0.5, 0.5});
    ASSERT_EQ(h.levels.size(), 3u);
    EXPECT_EQ(h.levels[1].vertex_count, 193u);
    EXPECT_EQ(h.levels[2].vertex_count, 97u);
}

TEST(SampleDataset, SmallDataset) {
    auto dir = dismesh::testing::scratch_dir("ds_small");
    auto m = sample_dataset(2, 2, 0, dir);
    EXPECT_EQ(m.samples.size(), 4u);
    auto meshes = load_dataset_meshes(load_manifest(dir));
    ASSERT_EQ(meshes.size(), 4u);
    for (const auto& mesh : meshes) EXPECT_EQ(mesh.faces, meshes[0].faces);
    EXPECT_EQ(m.split[0], Split::Train);
    EXPECT_EQ(m.split[1], Split::Test);
}

TEST(SampleDataset, ByteIdenticalReruns) {
    auto d1 = dismesh::testing::scratch_dir("ds_a");
    auto d2 = dismesh::testing::scratch_dir("ds_b");
    sample_dataset(3, 3, 5, d1);
    sample_dataset(3, 3, 5, d2);
    EXPECT_EQ(io::read_file(d1 / "manifest.json"), io::read_file(d2 / "manifest.json"));
    for (const auto& entry : std::filesystem::directory_iterator(d1 / "meshes"))
        EXPECT_EQ(io::read_file(entry.path()), io::read_file(d2 / "meshes" / entry.path().filename()));
}

TEST(SampleDataset, DistinctSubjectsAndSplits) {
    auto dir = dismesh::testing::scratch_dir("ds_big");
    auto m = sample_dataset(20, 30, 1, dir);
    EXPECT_EQ(m.samples.size(), 600u);
    for (std::size_t i = 0; i < m.subjects.size(); ++i)
        for (std::size_t j = i + 1; j < m.subjects.size(); ++j) EXPECT_FALSE(m.subjects[i] == m.subjects[j]);
    EXPECT_EQ(m.subjects_in(Split::Train).size(), 14u);
    EXPECT_EQ(m.subjects_in(Split::Val).size(), 3u);
    EXPECT_EQ(m.subjects_in(Split::Test).size(), 3u);
    auto back = load_manifest(dir / "manifest.json");
    EXPECT_EQ(back.samples.size(), 600u);
    EXPECT_EQ(back.samples[37].labels.pose, m.samples[37].labels.pose);
}

TEST(SampleDataset, Preconditions) {
    auto dir = dismesh::testing::scratch_dir("ds_bad");
    EXPECT_THROW(sample_dataset(1, 2, 0, dir), ValidationError);
    EXPECT_THROW(sample_dataset(2, 1, 0, dir), ValidationError);
    EXPECT_THROW(sample_dataset(2, 2, 0, "/proc/forbidden_dir"), IoError);
}

TEST(SampleDataset, DrawsDependOnlyOnIndices) {
    // Order of generation does not matter: draw pose (4,7) cold.
    const auto direct = draw_pose(9, 4, 7);
    for (int s = 0; s < 5; ++s)
        for (int p = 0; p < 8; ++p) (void)draw_pose(9, s, p);
    EXPECT_EQ(draw_pose(9, 4, 7), direct);
}

TEST(MakeSequence, IdentityWarp) {
    const auto shape = draw_shape(0, 0);
    auto seq = make_sequence(shape, 10, [](double t) { return t; }, 4);
    ASSERT_EQ(seq.size(), 10u);
    for (std::size_t k = 0; k < 10; ++k) {
        EXPECT_EQ(seq[k].second.pose, trajectory_pose(4, static_cast<double>(k) / 9.0));
        EXPECT_EQ(*seq[k].second.time_index, static_cast<int>(k));
    }
}

TEST(MakeSequence, ShapeDoesNotChangePoses) {
    auto a = make_sequence(draw_shape(0, 0), 6, [](double t) { return t; }, 2);
    auto b = make_sequence(draw_shape(0, 1), 6, [](double t) { return t; }, 2);
    for (std::size_t k = 0; k < 6; ++k) {
        EXPECT_EQ(a[k].second.pose, b[k].second.pose);
        EXPECT_NE(a[k].first.vertices, b[k].first.vertices);
    }
}

TEST(MakeSequence, QuadraticWarpCanonicalTimes) {
    auto seq = make_sequence(draw_shape(0, 0), 20, [](double t) { return t * t; }, 1);
    for (std::size_t k = 0; k < 20; ++k) {
        const double expected = (k / 19.0) * (k / 19.0);
        EXPECT_NEAR(*seq[k].second.canonical_time, expected, 1e-15);
        EXPECT_EQ(seq[k].second.pose, trajectory_pose(1, *seq[k].second.canonical_time));
    }
}

TEST(MakeSequence, RejectsBadWarps) {
    const auto shape = draw_shape(0, 0);
    EXPECT_THROW(make_sequence(shape, 1, [](double t) { return t; }, 0), ValidationError);
    EXPECT_THROW(make_sequence(shape, 5, [](double t) { return t < 0.5 ? t : 1.0 - t + (t == 1.0); }, 0), ValidationError);
    EXPECT_THROW(make_sequence(shape, 5, [](double t) { return 0.5 * t; }, 0), ValidationError);
}
