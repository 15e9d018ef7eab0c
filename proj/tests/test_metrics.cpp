#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <numbers>

#include "atlas/metrics.hpp"
#include "oracles.hpp"

using namespace atlas;
using namespace atlas::metrics;
using geometry::TriangleMesh;
using geometry::Vec3;

namespace {

TriangleMesh square_at(double z, std::size_t cells = 1) {
  TriangleMesh m;
  const std::size_t g = cells + 1;
  auto& atlas = m.atlas.emplace();
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < g; ++c) {
      const double u = static_cast<double>(c) / cells, v = static_cast<double>(r) / cells;
      m.vertices.push_back({u, v, z});
      atlas.push_back({0, u, v});
    }
  for (std::size_t r = 0; r + 1 < g; ++r)
    for (std::size_t c = 0; c + 1 < g; ++c) {
      const auto a = static_cast<std::uint32_t>(r * g + c);
      m.faces.push_back({a, a + 1, static_cast<std::uint32_t>(a + g + 1)});
      m.faces.push_back({a, static_cast<std::uint32_t>(a + g + 1), static_cast<std::uint32_t>(a + g)});
    }
  return m;
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  return q.normalized().toRotationMatrix();
}

TriangleMesh map_vertices(TriangleMesh m, const std::function<Vec3(const Vec3&)>& f) {
  for (auto& v : m.vertices) v = f(v);
  return m;
}

}  // namespace

TEST(PointTriangle, MatchesOracle) {
  Rng rng(1);
  for (int i = 0; i < 20000; ++i) {
    const auto t = oracle::random_points(3, rng);
    const Vec3 p{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    EXPECT_NEAR(sq_dist_point_triangle(p, t[0], t[1], t[2]), oracle::point_triangle_sq_dist(p, t[0], t[1], t[2]), 1e-12);
  }
  // Degenerate triangle collapses to a segment.
  EXPECT_NEAR(sq_dist_point_triangle({0.5, 1, 0}, {0, 0, 0}, {1, 0, 0}, {2, 0, 0}), 1.0, 1e-15);
}

TEST(Bvh, NearestMatchesBruteForce) {
  const auto mesh = geometry::icosphere(2);
  const TriangleBvh bvh(mesh);
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const Vec3 p{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
    EXPECT_NEAR(std::sqrt(bvh.nearest(p).first), oracle::point_mesh_dist(p, mesh), 1e-12);
  }
}

TEST(Metro, SelfAndParallelPlanes) {
  const auto s = geometry::icosphere(2);
  EXPECT_NEAR(metro(s, s, 2000, 1).symmetric_mean, 0.0, 1e-9);
  const auto r = metro(square_at(0.0), square_at(0.1), 5000, 3);
  EXPECT_NEAR(r.symmetric_mean, 0.1, 1e-6);
  EXPECT_NEAR(r.forward_mean, 0.1, 1e-6);
  EXPECT_THROW(metro(square_at(0.0), TriangleMesh{}, 10, 1), InvalidArgument);
  EXPECT_THROW(metro(s, s, 0, 1), InvalidArgument);
}

TEST(Metro, SymmetricUnderSwap) {
  const auto a = geometry::icosphere(1), b = geometry::icosphere(3, 1.1);
  const auto ab = metro_with_seeds(a, b, 1000, 5, 6), ba = metro_with_seeds(b, a, 1000, 6, 5);
  EXPECT_EQ(ab.symmetric_mean, ba.symmetric_mean);
  EXPECT_EQ(ab.forward_mean, ba.backward_mean);
}

TEST(Metro, MatchesBruteForceOnSameSamples) {
  const auto a = geometry::icosphere(3), b = geometry::icosphere(5);
  const std::size_t n = 300;
  const auto r = metro_with_seeds(a, b, n, 7, 8);
  const auto sa = metro_samples(a, n, 7), sb = metro_samples(b, n, 8);
  double f = 0.0, g = 0.0;
  for (const auto& p : sa) f += oracle::point_mesh_dist(p, b);
  for (const auto& p : sb) g += oracle::point_mesh_dist(p, a);
  f /= n;
  g /= n;
  EXPECT_GT(r.symmetric_mean, 0.0);
  EXPECT_NEAR(r.forward_mean, f, 1e-12);
  EXPECT_NEAR(r.backward_mean, g, 1e-12);
  EXPECT_NEAR(r.symmetric_mean, 0.5 * (f + g), 1e-12);
}

TEST(Umeyama, RecoversExactCorrespondences) {
  Rng rng(3);
  const auto src = oracle::random_points(30, rng);
  SimilarityTransform t{1.7, random_rotation(rng), Eigen::Vector3d(0.2, -0.4, 0.1)};
  std::vector<Vec3> dst;
  for (const auto& p : src) dst.push_back(t.apply(p));
  const auto f = umeyama(src, dst);
  EXPECT_NEAR(f.scale, 1.7, 1e-12);
  EXPECT_LT((f.rotation - t.rotation).norm(), 1e-12);
  EXPECT_LT((f.translation - t.translation).norm(), 1e-12);
  EXPECT_THROW(umeyama(src, std::span<const Vec3>(dst.data(), 3)), InvalidArgument);
}

TEST(Icp, IdentityAndKnownTransform) {
  const auto cloud = geometry::sample_surface(geometry::procedural(geometry::ShapeSpec::of(geometry::ShapeKind::kBox, {1, 0.6, 0.3}), 3), 800, 4);
  const auto same = icp_similarity(cloud, cloud);
  EXPECT_NEAR(same.error, 0.0, 1e-20);
  EXPECT_NEAR(same.transform.scale, 1.0, 1e-9);

  SimilarityTransform t{2.0, Eigen::AngleAxisd(std::numbers::pi / 2, Eigen::Vector3d::UnitZ()).toRotationMatrix(),
                        Eigen::Vector3d(1, 0, 0)};
  geometry::PointCloud moved;
  for (const auto& p : cloud.points) moved.points.push_back(t.apply(p));
  const auto r = icp_similarity(cloud, moved);
  EXPECT_NEAR(r.transform.scale, 2.0, 1e-6);
  EXPECT_LT((r.transform.rotation - t.rotation).norm(), 1e-6);
  EXPECT_LT((r.transform.translation - t.translation).norm(), 1e-6);
  for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_LE(r.history[i], r.history[i - 1]);
}

TEST(Icp, MirrorStaysProper) {
  const auto cloud = geometry::sample_surface(geometry::procedural(geometry::ShapeSpec::of(geometry::ShapeKind::kCapsule, {0.3, 1.0}), 12), 600, 5);
  geometry::PointCloud mirrored;
  Rng rng(6);
  for (auto p : cloud.points) {
    p[0] = -p[0] + 0.3 * p[1] * p[1];  // mirror plus a bend so no rotation matches
    mirrored.points.push_back(p);
  }
  const auto r = icp_similarity(cloud, mirrored);
  EXPECT_NEAR(r.transform.rotation.determinant(), 1.0, 1e-12);
  EXPECT_GT(r.error, 0.0);
}

TEST(Icp, RejectsDegenerateInput) {
  geometry::PointCloud line, two;
  for (int i = 0; i < 10; ++i) line.points.push_back({0.1 * i, 0, 0});
  two.points = {{0, 0, 0}, {1, 1, 1}};
  EXPECT_THROW(icp_similarity(line, line), InvalidArgument);
  EXPECT_THROW(icp_similarity(two, two), InvalidArgument);
}

TEST(Distortion, IdentityScaleRigidAndStretch) {
  const auto flat = square_at(0.0, 4);
  const auto id = uv_distortion(flat);
  EXPECT_EQ(id.E_a, 1.0);
  EXPECT_EQ(id.E_s, 1.0);
  EXPECT_EQ(id.excluded, 0u);

  const auto scaled = uv_distortion(map_vertices(flat, [](const Vec3& p) { return Vec3{3 * p[0], 3 * p[1], 3 * p[2]}; }));
  EXPECT_NEAR(scaled.E_a, 1.0, 1e-12);
  EXPECT_NEAR(scaled.E_s, 1.0, 1e-12);

  Rng rng(7);
  const Eigen::Matrix3d R = random_rotation(rng);
  const auto rigid = uv_distortion(map_vertices(flat, [&](const Vec3& p) {
    const Eigen::Vector3d q = R * Eigen::Vector3d(p[0], p[1], p[2]) + Eigen::Vector3d(0.3, -2, 5);
    return Vec3{q[0], q[1], q[2]};
  }));
  EXPECT_NEAR(rigid.E_a, id.E_a, 1e-9);
  EXPECT_NEAR(rigid.E_s, id.E_s, 1e-9);

  // x → 2x: σ = (2, 1) on every triangle, global ratio r_g = 2, so
  // E_s = (4 + 1) / 4 and r = 2 / 2 = 1.
  const auto stretched = uv_distortion(map_vertices(flat, [](const Vec3& p) { return Vec3{2 * p[0], p[1], p[2]}; }));
  EXPECT_NEAR(stretched.singular_values[0][0], 2.0, 1e-12);
  EXPECT_NEAR(stretched.singular_values[0][1], 1.0, 1e-12);
  EXPECT_NEAR(stretched.global_area_ratio, 2.0, 1e-12);
  EXPECT_NEAR(stretched.E_s, 1.25, 1e-12);
  EXPECT_NEAR(stretched.E_a, 1.0, 1e-12);

  // Left half stretched 3×, right half untouched: r_g = 2, per-triangle r ∈ {1.5, 0.5}.
  const auto half = uv_distortion(map_vertices(square_at(0.0, 2), [](const Vec3& p) {
    return Vec3{p[0] <= 0.5 ? 3 * p[0] : 1.5 + (p[0] - 0.5), p[1], p[2]};
  }));
  EXPECT_NEAR(half.global_area_ratio, 2.0, 1e-12);
  EXPECT_NEAR(half.E_a, 0.5 * 1.5 + 0.5 * 2.0, 1e-12);
  EXPECT_NEAR(half.E_s, 0.5 * (10.0 / 4) + 0.5 * (2.0 / 4), 1e-12);
}

TEST(Distortion, Errors) {
  auto m = square_at(0.0, 2);
  auto no_atlas = m;
  no_atlas.atlas.reset();
  EXPECT_THROW(uv_distortion(no_atlas), InvalidArgument);
  auto spanning = m;
  (*spanning.atlas)[0].patch = 1;
  EXPECT_THROW(uv_distortion(spanning), InvalidArgument);
  auto degenerate = m;
  for (auto& a : *degenerate.atlas) a.u = 0.0;
  EXPECT_THROW(uv_distortion(degenerate), InvalidArgument);
}
