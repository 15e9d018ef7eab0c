#pragma once

// Reconstruction metrics: per-point-mean Chamfer, sampled mesh-to-mesh
// distance, ICP similarity alignment and UV distortion of an atlas mesh.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "atlas/chamfer.hpp"
#include "atlas/error.hpp"
#include "atlas/geometry.hpp"
#include "atlas/rng.hpp"

namespace atlas::metrics {

using geometry::PointCloud;
using geometry::TriangleMesh;
using geometry::Vec3;
using geometry::operator+;
using geometry::operator-;
using geometry::operator*;

// ---------------------------------------------------------------------------
// Chamfer (reporting form)

inline double eval_cd(const chamfer::Patches& generated, std::span<const Vec3> target, unsigned threads = 1) {
  return chamfer::mean_chamfer(chamfer::chamfer_loss(generated, target, threads));
}

inline double eval_cd(std::span<const Vec3> generated, std::span<const Vec3> target, unsigned threads = 1) {
  if (generated.empty()) throw InvalidArgument("eval_cd: empty generated set");
  return eval_cd(chamfer::Patches{std::vector<Vec3>(generated.begin(), generated.end())}, target, threads);
}

inline constexpr double kCdDisplayScale = 1e3;
inline constexpr double kMetroDisplayScale = 10.0;

// ---------------------------------------------------------------------------
// Point to triangle

/// Closest point on triangle abc to p (Voronoi-region walk).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  using geometry::dot;
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;
  const Vec3 bp = p - b;
  const double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0.0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;
  const Vec3 cp = p - c;
  const double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0.0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return a + v * ab + w * ac;
}

inline double sq_dist_point_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  return geometry::sq_dist(p, closest_point_on_triangle(p, a, b, c));
}

/// Bounding-volume hierarchy over the triangles of a mesh for exact
/// point-to-mesh distance queries.
class TriangleBvh {
 public:
  static constexpr std::size_t kLeafSize = 4;

  explicit TriangleBvh(const TriangleMesh& mesh) : mesh_(mesh) {
    if (mesh.faces.empty()) throw InvalidArgument("TriangleBvh: mesh has no faces");
    order_.resize(mesh.faces.size());
    std::iota(order_.begin(), order_.end(), std::uint32_t{0});
    centroids_.resize(mesh.faces.size());
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
      const auto& t = mesh.faces[f];
      centroids_[f] = (1.0 / 3.0) * (mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]);
    }
    build(0, static_cast<std::uint32_t>(order_.size()));
  }

  /// Squared distance from p to the nearest triangle, and that triangle.
  std::pair<double, std::size_t> nearest(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    std::size_t face = 0;
    search(0, p, best, face);
    return {best, face};
  }

 private:
  struct Node {
    Vec3 lo, hi;
    std::uint32_t left = 0, right = 0, begin = 0, end = 0;
    bool leaf = false;
  };

  std::uint32_t build(std::uint32_t begin, std::uint32_t end) {
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.emplace_back();
    Vec3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
            std::numeric_limits<double>::infinity()};
    Vec3 hi = -1.0 * lo;
    Vec3 clo = lo, chi = hi;
    for (auto i = begin; i < end; ++i) {
      for (auto v : mesh_.faces[order_[i]])
        for (int k = 0; k < 3; ++k) {
          lo[k] = std::min(lo[k], mesh_.vertices[v][k]);
          hi[k] = std::max(hi[k], mesh_.vertices[v][k]);
        }
      for (int k = 0; k < 3; ++k) {
        clo[k] = std::min(clo[k], centroids_[order_[i]][k]);
        chi[k] = std::max(chi[k], centroids_[order_[i]][k]);
      }
    }
    nodes_[id].lo = lo;
    nodes_[id].hi = hi;
    if (end - begin <= kLeafSize) {
      nodes_[id].leaf = true;
      nodes_[id].begin = begin;
      nodes_[id].end = end;
      return id;
    }
    int axis = 0;
    for (int k = 1; k < 3; ++k)
      if (chi[k] - clo[k] > chi[axis] - clo[axis]) axis = k;
    const auto mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                       return centroids_[a][axis] < centroids_[b][axis] ||
                              (centroids_[a][axis] == centroids_[b][axis] && a < b);
                     });
    const auto l = build(begin, mid);
    const auto r = build(mid, end);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  static double box_sq_dist(const Node& n, const Vec3& p) {
    double d = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double e = std::max({n.lo[k] - p[k], 0.0, p[k] - n.hi[k]});
      d += e * e;
    }
    return d;
  }

  void search(std::uint32_t id, const Vec3& p, double& best, std::size_t& face) const {
    const Node& n = nodes_[id];
    if (n.leaf) {
      for (auto i = n.begin; i < n.end; ++i) {
        const auto& t = mesh_.faces[order_[i]];
        const double d = sq_dist_point_triangle(p, mesh_.vertices[t[0]], mesh_.vertices[t[1]], mesh_.vertices[t[2]]);
        if (d < best || (d == best && order_[i] < face)) {
          best = d;
          face = order_[i];
        }
      }
      return;
    }
    const double dl = box_sq_dist(nodes_[n.left], p), dr = box_sq_dist(nodes_[n.right], p);
    const auto first = dl <= dr ? n.left : n.right, second = dl <= dr ? n.right : n.left;
    if (std::min(dl, dr) <= best) search(first, p, best, face);
    if (std::max(dl, dr) <= best) search(second, p, best, face);
  }

  const TriangleMesh& mesh_;
  std::vector<Node> nodes_;
  std::vector<std::uint32_t> order_;
  std::vector<Vec3> centroids_;
};

// ---------------------------------------------------------------------------
// Metro

struct MetroResult {
  double forward_mean = 0.0;   // samples on A to mesh B
  double backward_mean = 0.0;  // samples on B to mesh A
  double symmetric_mean = 0.0;
  std::size_t samples_per_side = 0;
};

/// Unsquared distance from each point to the mesh.
inline std::vector<double> point_mesh_distances(std::span<const Vec3> points, const TriangleMesh& mesh,
                                                unsigned threads = 1) {
  const TriangleBvh bvh(mesh);
  std::vector<double> d(points.size());
  chamfer::parallel_for(points.size(), threads, [&](std::size_t i) { d[i] = std::sqrt(bvh.nearest(points[i]).first); });
  return d;
}

inline std::vector<Vec3> metro_samples(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  return geometry::sample_surface(mesh, n, seed).points;
}

/// Average point-to-mesh distance in both directions; A is sampled with
/// seed_a and B with seed_b.
inline MetroResult metro_with_seeds(const TriangleMesh& a, const TriangleMesh& b, std::size_t samples_per_side,
                                    std::uint64_t seed_a, std::uint64_t seed_b, unsigned threads = 1) {
  if (!(geometry::total_area(a) > 0.0) || !(geometry::total_area(b) > 0.0))
    throw InvalidArgument("metro: mesh has zero area");
  if (samples_per_side == 0) throw InvalidArgument("metro: samples_per_side must be positive");
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  MetroResult r;
  r.samples_per_side = samples_per_side;
  r.forward_mean = mean(point_mesh_distances(metro_samples(a, samples_per_side, seed_a), b, threads));
  r.backward_mean = mean(point_mesh_distances(metro_samples(b, samples_per_side, seed_b), a, threads));
  r.symmetric_mean = 0.5 * (r.forward_mean + r.backward_mean);
  return r;
}

inline MetroResult metro(const TriangleMesh& a, const TriangleMesh& b, std::size_t samples_per_side = 10000,
                         std::uint64_t seed = 0, unsigned threads = 1) {
  return metro_with_seeds(a, b, samples_per_side, seed, splitmix64(seed), threads);
}

// ---------------------------------------------------------------------------
// ICP with a similarity transform

struct SimilarityTransform {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Vec3 apply(const Vec3& p) const {
    const Eigen::Vector3d q = scale * (rotation * Eigen::Vector3d(p[0], p[1], p[2])) + translation;
    return {q[0], q[1], q[2]};
  }
  /// (this ∘ other)(p) = this(other(p))
  SimilarityTransform compose(const SimilarityTransform& other) const {
    return {scale * other.scale, rotation * other.rotation, scale * (rotation * other.translation) + translation};
  }
};

/// Least-squares similarity mapping src[i] onto dst[i], rotation restricted
/// to det = +1.
inline SimilarityTransform umeyama(std::span<const Vec3> src, std::span<const Vec3> dst) {
  if (src.size() != dst.size() || src.empty()) throw InvalidArgument("umeyama: point sets must be equal and nonempty");
  const auto n = static_cast<double>(src.size());
  Eigen::Vector3d ms = Eigen::Vector3d::Zero(), md = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    ms += Eigen::Vector3d(src[i][0], src[i][1], src[i][2]);
    md += Eigen::Vector3d(dst[i][0], dst[i][1], dst[i][2]);
  }
  ms /= n;
  md /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Eigen::Vector3d s = Eigen::Vector3d(src[i][0], src[i][1], src[i][2]) - ms;
    const Eigen::Vector3d d = Eigen::Vector3d(dst[i][0], dst[i][1], dst[i][2]) - md;
    cov += d * s.transpose();
    var_s += s.squaredNorm();
  }
  cov /= n;
  var_s /= n;
  if (!(var_s > 0.0)) throw InvalidArgument("umeyama: source points coincide");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d sign(1, 1, 1);
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) sign[2] = -1;
  SimilarityTransform t;
  t.rotation = svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();
  t.scale = svd.singularValues().dot(sign) / var_s;
  t.translation = md - t.scale * (t.rotation * ms);
  return t;
}

struct IcpResult {
  SimilarityTransform transform;
  double error = 0.0;           // final mean squared NN distance, target units
  std::vector<double> history;  // error after each accepted iteration, first entry at the initial pose
  std::size_t iterations = 0;
  std::size_t start = 0;        // index of the initialisation that won
};

namespace detail {

inline Eigen::Matrix3d principal_axes(std::span<const Vec3> pts, Eigen::Vector3d& mean, Eigen::Vector3d& eig) {
  mean.setZero();
  for (const auto& p : pts) mean += Eigen::Vector3d(p[0], p[1], p[2]);
  mean /= static_cast<double>(pts.size());
  Eigen::Matrix3d c = Eigen::Matrix3d::Zero();
  for (const auto& p : pts) {
    const Eigen::Vector3d d = Eigen::Vector3d(p[0], p[1], p[2]) - mean;
    c += d * d.transpose();
  }
  c /= static_cast<double>(pts.size());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(c);
  eig = es.eigenvalues();
  return es.eigenvectors();
}

inline double mean_sq_error(std::span<const Vec3> moved, const chamfer::KdTree3& tree, std::vector<std::size_t>* nn) {
  double s = 0.0;
  for (std::size_t i = 0; i < moved.size(); ++i) {
    const auto nb = tree.nearest(moved[i]);
    if (nn) (*nn)[i] = nb.index;
    s += nb.sq_distance;
  }
  return s / static_cast<double>(moved.size());
}

}  // namespace detail

/// Similarity ICP from source onto target. Both clouds are first normalized
/// to the unit box; starts are the identity in normalized coordinates plus
/// the proper alignments of the principal axes. Each run alternates nearest
/// neighbours with a closed-form fit and stops when the error improves by less
/// than `tol`. A fit that would raise the error is rejected, so the recorded
/// history never increases. The best run is returned in original coordinates.
inline IcpResult icp_similarity(const PointCloud& source, const PointCloud& target, std::size_t max_iters = 100,
                                double tol = 1e-12) {
  if (source.size() < 3 || target.size() < 3) throw InvalidArgument("icp: need at least 3 points per cloud");
  const auto ns = geometry::unit_box_transform(source.points);
  const auto nt = geometry::unit_box_transform(target.points);
  std::vector<Vec3> src, dst;
  for (const auto& p : source.points) src.push_back(ns.apply(p));
  for (const auto& p : target.points) dst.push_back(nt.apply(p));

  Eigen::Vector3d ms, md, es, ed;
  const Eigen::Matrix3d vs = detail::principal_axes(src, ms, es);
  const Eigen::Matrix3d vd = detail::principal_axes(dst, md, ed);
  if (!(es[1] > 1e-12 * es[2])) throw InvalidArgument("icp: source points are collinear");

  std::vector<SimilarityTransform> starts{SimilarityTransform{}};
  const double s0 = std::sqrt(ed.sum() / es.sum());
  for (const Eigen::Vector3d& signs : {Eigen::Vector3d(1, 1, 1), Eigen::Vector3d(-1, -1, 1), Eigen::Vector3d(-1, 1, -1),
                                      Eigen::Vector3d(1, -1, -1)}) {
    Eigen::Matrix3d r = vd * signs.asDiagonal() * vs.transpose();
    if (r.determinant() < 0) r = vd * (-signs).asDiagonal() * vs.transpose();
    starts.push_back({s0, r, md - s0 * (r * ms)});
  }

  const chamfer::KdTree3 tree(dst);
  std::vector<Vec3> moved(src.size()), matched(src.size());
  std::vector<std::size_t> nn(src.size());
  IcpResult best;
  best.error = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < starts.size(); ++k) {
    IcpResult run;
    run.start = k;
    run.transform = starts[k];
    for (std::size_t i = 0; i < src.size(); ++i) moved[i] = run.transform.apply(src[i]);
    run.error = detail::mean_sq_error(moved, tree, &nn);
    run.history.push_back(run.error);
    while (run.iterations < max_iters) {
      for (std::size_t i = 0; i < src.size(); ++i) matched[i] = dst[nn[i]];
      const SimilarityTransform next = umeyama(src, matched);
      for (std::size_t i = 0; i < src.size(); ++i) moved[i] = next.apply(src[i]);
      std::vector<std::size_t> next_nn(src.size());
      const double err = detail::mean_sq_error(moved, tree, &next_nn);
      if (!(err <= run.error)) break;
      ++run.iterations;
      const double gain = run.error - err;
      run.transform = next;
      run.error = err;
      nn.swap(next_nn);
      run.history.push_back(err);
      if (gain < tol) break;
    }
    if (run.error < best.error) best = std::move(run);
  }
  // Back to original coordinates: T = nt⁻¹ ∘ T_norm ∘ ns.
  const SimilarityTransform to_norm{ns.scale, Eigen::Matrix3d::Identity(),
                                    -ns.scale * Eigen::Vector3d(ns.center[0], ns.center[1], ns.center[2])};
  const SimilarityTransform from_norm{1.0 / nt.scale, Eigen::Matrix3d::Identity(),
                                      Eigen::Vector3d(nt.center[0], nt.center[1], nt.center[2])};
  best.transform = from_norm.compose(best.transform.compose(to_norm));
  const double unit = 1.0 / (nt.scale * nt.scale);
  best.error *= unit;
  for (double& e : best.history) e *= unit;
  return best;
}

// ---------------------------------------------------------------------------
// UV distortion

struct DistortionResult {
  double E_a = 0.0;  // area distortion, UV-area-weighted mean
  double E_s = 0.0;  // stretch, UV-area-weighted mean
  std::vector<double> per_triangle_E_a;  // NaN for excluded triangles
  std::vector<double> per_triangle_E_s;
  std::vector<std::array<double, 2>> singular_values;
  double global_area_ratio = 0.0;  // 3D area over UV area
  std::size_t excluded = 0;
};

inline constexpr double kDegenerateUvArea = 1e-14;
inline constexpr double kMaxExcludedFraction = 0.01;

/// For each triangle, J maps the UV triangle onto the 3D triangle, with
/// singular values σ₁ ≥ σ₂. With r_g the global 3D/UV area ratio:
///   E_s = (σ₁² + σ₂²) / (2 r_g),   E_a = max(r, 1/r),  r = σ₁σ₂ / r_g.
/// Triangles with (near) zero UV area are excluded; more than 1% is an error.
inline DistortionResult uv_distortion(const TriangleMesh& mesh) {
  if (!mesh.atlas) throw InvalidArgument("uv_distortion: mesh has no atlas");
  const auto& uv = *mesh.atlas;
  if (uv.size() != mesh.vertices.size()) throw InvalidArgument("uv_distortion: atlas size does not match vertices");
  if (mesh.faces.empty()) throw InvalidArgument("uv_distortion: mesh has no faces");
  const std::size_t nf = mesh.faces.size();
  DistortionResult r;
  r.per_triangle_E_a.assign(nf, std::numeric_limits<double>::quiet_NaN());
  r.per_triangle_E_s.assign(nf, std::numeric_limits<double>::quiet_NaN());
  r.singular_values.assign(nf, {0.0, 0.0});
  std::vector<double> uv_area(nf, 0.0);
  std::vector<bool> used(nf, false);
  double sum3 = 0.0, sum_uv = 0.0;
  for (std::size_t f = 0; f < nf; ++f) {
    const auto& t = mesh.faces[f];
    if (uv[t[0]].patch != uv[t[1]].patch || uv[t[0]].patch != uv[t[2]].patch)
      throw InvalidArgument("uv_distortion: triangle " + std::to_string(f) + " spans several patches");
    const double du1 = uv[t[1]].u - uv[t[0]].u, dv1 = uv[t[1]].v - uv[t[0]].v;
    const double du2 = uv[t[2]].u - uv[t[0]].u, dv2 = uv[t[2]].v - uv[t[0]].v;
    const double det = du1 * dv2 - du2 * dv1;
    uv_area[f] = 0.5 * std::abs(det);
    if (uv_area[f] <= kDegenerateUvArea) {
      ++r.excluded;
      continue;
    }
    used[f] = true;
    Eigen::Matrix<double, 3, 2> e3;
    const Vec3 a = mesh.vertices[t[1]] - mesh.vertices[t[0]], b = mesh.vertices[t[2]] - mesh.vertices[t[0]];
    e3 << a[0], b[0], a[1], b[1], a[2], b[2];
    Eigen::Matrix2d e2;
    e2 << du1, du2, dv1, dv2;
    const Eigen::Matrix<double, 3, 2> j = e3 * e2.inverse();
    const Eigen::Matrix2d g = j.transpose() * j;
    // Eigenvalues of the symmetric 2×2 Gram matrix in closed form.
    const double tr = g.trace(), gd = g.determinant();
    const double disc = std::sqrt(std::max(0.0, 0.25 * tr * tr - gd));
    const double l1 = 0.5 * tr + disc, l2 = std::max(0.0, 0.5 * tr - disc);
    r.singular_values[f] = {std::sqrt(l1), std::sqrt(l2)};
    sum3 += geometry::face_area(mesh, f);
    sum_uv += uv_area[f];
  }
  if (static_cast<double>(r.excluded) > kMaxExcludedFraction * static_cast<double>(nf))
    throw InvalidArgument("uv_distortion: " + std::to_string(r.excluded) + " of " + std::to_string(nf) +
                          " triangles have degenerate UV coordinates");
  r.global_area_ratio = sum3 / sum_uv;
  if (!(r.global_area_ratio > 0.0)) throw InvalidArgument("uv_distortion: 3D mesh has zero area");
  double wa = 0.0, ws = 0.0;
  for (std::size_t f = 0; f < nf; ++f) {
    if (!used[f]) continue;
    const auto [s1, s2] = r.singular_values[f];
    const double ratio = s1 * s2 / r.global_area_ratio;
    r.per_triangle_E_s[f] = (s1 * s1 + s2 * s2) / (2.0 * r.global_area_ratio);
    r.per_triangle_E_a[f] = ratio > 0.0 ? std::max(ratio, 1.0 / ratio) : std::numeric_limits<double>::infinity();
    wa += uv_area[f] * r.per_triangle_E_a[f];
    ws += uv_area[f] * r.per_triangle_E_s[f];
  }
  r.E_a = wa / sum_uv;
  r.E_s = ws / sum_uv;
  return r;
}

}  // namespace atlas::metrics
