#pragma once

// Linear regions of small ReLU networks R² → R³ on the unit square, the
// rank-2 test on their affine maps, and an empirical width-vs-error study for
// one-hidden-layer ReLU fits of an analytic chart.
//
// Networks are analysed before any output squashing: hidden layers are
// x ↦ relu(W x + b), the last layer is affine.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "atlas/diffcore.hpp"
#include "atlas/error.hpp"
#include "atlas/geometry.hpp"
#include "atlas/models.hpp"
#include "atlas/rng.hpp"

namespace atlas::theory {

using Eigen::Matrix2d;
using Eigen::MatrixXd;
using Eigen::Vector2d;
using Eigen::VectorXd;

struct AffineLayer {
  MatrixXd W;  // out × in
  VectorXd b;
};

struct ReluNet {
  std::vector<AffineLayer> layers;  // relu after every layer but the last

  std::size_t input_dim() const { return layers.front().W.cols(); }
  std::size_t output_dim() const { return layers.back().W.rows(); }
  std::size_t hidden_units() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < layers.size(); ++l) n += layers[l].W.rows();
    return n;
  }

  VectorXd operator()(const Vector2d& x) const {
    VectorXd h = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      h = layers[l].W * h + layers[l].b;
      if (l + 1 < layers.size()) h = h.cwiseMax(0.0);
    }
    return h;
  }
};

inline void validate(const ReluNet& net) {
  if (net.layers.empty()) throw InvalidArgument("relu net: no layers");
  if (net.layers.front().W.cols() != 2) throw InvalidArgument("relu net: input dimension must be 2");
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& L = net.layers[l];
    if (L.b.size() != L.W.rows()) throw InvalidArgument("relu net: bias size mismatch in layer " + std::to_string(l));
    if (l > 0 && L.W.cols() != net.layers[l - 1].W.rows())
      throw InvalidArgument("relu net: layer " + std::to_string(l) + " input width mismatch");
  }
}

/// widths = {2, h1, ..., 3}; weights and biases uniform in [-1, 1].
inline ReluNet random_relu_net(const std::vector<std::size_t>& widths, std::uint64_t seed) {
  if (widths.size() < 2 || widths.front() != 2) throw InvalidArgument("random_relu_net: widths must start with 2");
  Rng rng(seed);
  ReluNet net;
  for (std::size_t l = 1; l < widths.size(); ++l) {
    AffineLayer L{MatrixXd(widths[l], widths[l - 1]), VectorXd(widths[l])};
    for (Eigen::Index i = 0; i < L.W.rows(); ++i)
      for (Eigen::Index j = 0; j < L.W.cols(); ++j) L.W(i, j) = rng.uniform(-1.0, 1.0);
    for (Eigen::Index i = 0; i < L.b.size(); ++i) L.b(i) = rng.uniform(-1.0, 1.0);
    net.layers.push_back(std::move(L));
  }
  return net;
}

/// The pre-tanh map of one decoder patch at a fixed latent; the latent
/// contribution is folded into the first-layer bias.
inline ReluNet decoder_net(const models::AtlasModel& model, std::size_t patch, const models::LatentCode& x) {
  if (model.domain() != models::Domain::kSquare) throw InvalidArgument("decoder_net: needs a square-domain model");
  if (x.dim() != model.latent_dim()) throw InvalidArgument("decoder_net: latent dimension mismatch");
  const auto& s = model.decoder(patch);
  const auto& P = model.params();
  const auto wl = P.matrix(s.w_latent), wd = P.matrix(s.w_domain), b0 = P.matrix(s.bias0);
  const std::size_t h0 = wd.cols();
  AffineLayer first{MatrixXd(h0, 2), VectorXd(h0)};
  for (std::size_t j = 0; j < h0; ++j) {
    first.W(j, 0) = wd(0, j);
    first.W(j, 1) = wd(1, j);
    double acc = b0(0, j);
    for (std::size_t k = 0; k < x.dim(); ++k) acc += x.x[k] * wl(k, j);
    first.b(j) = acc;
  }
  ReluNet net;
  net.layers.push_back(std::move(first));
  for (const auto& l : s.layers) {
    const auto w = P.matrix(l.weight), b = P.matrix(l.bias);
    AffineLayer L{MatrixXd(w.cols(), w.rows()), VectorXd(w.cols())};
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j) L.W(j, i) = w(i, j);
    for (std::size_t j = 0; j < w.cols(); ++j) L.b(j) = b(0, j);
    net.layers.push_back(std::move(L));
  }
  return net;
}

// ---------------------------------------------------------------------------
// Activation patterns

inline constexpr std::size_t kMaxHiddenUnits = 24;

/// Bit k is hidden unit k in layer-major order; 1 = active (pre-activation > 0).
using Pattern = std::uint32_t;

struct HalfPlane {
  Vector2d normal;
  double offset = 0.0;  // normal·x + offset ≥ 0
  int label = -1;       // hidden unit index, negative for the square's sides
  double eval(const Vector2d& x) const { return normal.dot(x) + offset; }
};

/// Affine pieces valid on the cell of one pattern: every hidden
/// pre-activation and the output as functions of x.
struct PatternMaps {
  std::vector<HalfPlane> constraints;  // one per hidden unit whose pre-activation is not constant
  bool infeasible = false;             // a constant pre-activation contradicts its bit
  Eigen::MatrixXd A;                   // output = A x + b on the cell
  Eigen::VectorXd b;
};

inline PatternMaps pattern_maps(const ReluNet& net, Pattern p) {
  PatternMaps out;
  MatrixXd M = MatrixXd::Identity(2, 2);
  VectorXd c = VectorXd::Zero(2);
  int unit = 0;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    MatrixXd Z = net.layers[l].W * M;
    VectorXd z = net.layers[l].W * c + net.layers[l].b;
    if (l + 1 == net.layers.size()) {
      out.A = Z;
      out.b = z;
      break;
    }
    for (Eigen::Index j = 0; j < Z.rows(); ++j, ++unit) {
      const bool on = (p >> unit) & 1u;
      const double s = on ? 1.0 : -1.0;
      const Vector2d n(s * Z(j, 0), s * Z(j, 1));
      if (n.squaredNorm() == 0.0) {
        // Active needs z > 0; inactive allows z ≤ 0.
        if (on ? !(z(j) > 0.0) : z(j) > 0.0) out.infeasible = true;
      } else {
        out.constraints.push_back({n, s * z(j), unit});
      }
      if (!on) {
        Z.row(j).setZero();
        z(j) = 0.0;
      }
    }
    M = Z;
    c = z;
  }
  return out;
}

/// Activation pattern at x; `margin` receives the smallest |pre-activation|.
inline Pattern pattern_at(const ReluNet& net, const Vector2d& x, double* margin = nullptr) {
  Pattern p = 0;
  int unit = 0;
  double m = std::numeric_limits<double>::infinity();
  VectorXd h = x;
  for (std::size_t l = 0; l + 1 < net.layers.size(); ++l) {
    h = net.layers[l].W * h + net.layers[l].b;
    for (Eigen::Index j = 0; j < h.size(); ++j, ++unit) {
      m = std::min(m, std::abs(h(j)));
      if (h(j) > 0.0) p |= Pattern{1} << unit;
      else h(j) = 0.0;
    }
  }
  if (margin) *margin = m;
  return p;
}

// ---------------------------------------------------------------------------
// Convex polygons with labelled edges

struct PolyVertex {
  Vector2d p;
  int label;  // label of the edge from this vertex to the next
};
using Polygon = std::vector<PolyVertex>;

inline Polygon unit_square() {
  return {{{0, 0}, -1}, {{1, 0}, -2}, {{1, 1}, -3}, {{0, 1}, -4}};
}

inline Polygon clip(const Polygon& poly, const HalfPlane& h) {
  Polygon out;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& cur = poly[i];
    const auto& nxt = poly[(i + 1) % n];
    const double dc = h.eval(cur.p), dn = h.eval(nxt.p);
    const bool in_c = dc >= 0.0, in_n = dn >= 0.0;
    if (in_c) out.push_back(cur);
    if (in_c != in_n) {
      const double t = dc / (dc - dn);
      const Vector2d I = cur.p + t * (nxt.p - cur.p);
      if (in_c) out.push_back({I, h.label});
      else out.push_back({I, cur.label});
    }
  }
  // Drop zero-length edges; the surviving vertex keeps the later edge label.
  Polygon clean;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& nxt = out[(i + 1) % out.size()];
    if ((out[i].p - nxt.p).squaredNorm() > 1e-28) clean.push_back(out[i]);
  }
  if (clean.size() < 3) clean.clear();
  return clean;
}

inline double area(const Polygon& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i].p;
    const auto& q = poly[(i + 1) % poly.size()].p;
    a += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * a;
}

inline Vector2d centroid(const Polygon& poly) {
  double a = 0.0;
  Vector2d c = Vector2d::Zero();
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i].p;
    const auto& q = poly[(i + 1) % poly.size()].p;
    const double cr = p.x() * q.y() - q.x() * p.y();
    a += cr;
    c += cr * (p + q);
  }
  if (a == 0.0) {
    for (const auto& v : poly) c += v.p;
    return c / static_cast<double>(poly.size());
  }
  return c / (3.0 * a);
}

// ---------------------------------------------------------------------------
// Region enumeration

struct LinearRegion {
  Pattern pattern = 0;
  std::size_t pattern_bits = 0;
  Eigen::MatrixXd A;  // output_dim × 2
  Eigen::VectorXd b;
  Vector2d witness;
  double witness_margin = 0.0;  // smallest distance from the witness to a cell constraint line
  std::vector<HalfPlane> halfspaces;  // constraints that bound the cell inside the square
  Polygon polygon;
  double area = 0.0;

  bool active(std::size_t unit) const { return (pattern >> unit) & 1u; }
  Eigen::VectorXd map(const Vector2d& x) const { return A * x + b; }
};

struct Perturbation {
  Vector2d from, to;
};

struct Enumeration {
  std::vector<LinearRegion> regions;  // sorted by pattern
  double area_residual = 0.0;         // |Σ area − 1|
  std::vector<Perturbation> perturbations;
  std::size_t unresolved_probes = 0;

  /// Index of the region with this pattern, or regions.size().
  std::size_t find(Pattern p) const {
    auto it = std::lower_bound(regions.begin(), regions.end(), p,
                               [](const LinearRegion& r, Pattern q) { return r.pattern < q; });
    return it != regions.end() && it->pattern == p ? static_cast<std::size_t>(it - regions.begin()) : regions.size();
  }
};

inline constexpr double kMinRegionArea = 1e-18;

/// Cell of pattern p inside the unit square (empty if not realized).
inline Polygon cell_polygon(const PatternMaps& maps) {
  if (maps.infeasible) return {};
  Polygon poly = unit_square();
  for (const auto& h : maps.constraints) {
    poly = clip(poly, h);
    if (poly.empty()) break;
  }
  if (!poly.empty() && area(poly) <= kMinRegionArea) poly.clear();
  return poly;
}

/// Σ_{j≤2} C(n_l, j) multiplied over the hidden layers.
inline double region_count_bound(const ReluNet& net) {
  double bound = 1.0;
  for (std::size_t l = 0; l + 1 < net.layers.size(); ++l) {
    const double n = static_cast<double>(net.layers[l].W.rows());
    bound *= 1.0 + n + n * (n - 1.0) / 2.0;
  }
  return bound;
}

namespace detail {

/// Pattern at x, nudging x along `dir` (then pseudo-randomly) while it sits on
/// a hyperplane. Records every nudge.
inline Pattern robust_pattern(const ReluNet& net, Vector2d x, const Vector2d& dir, std::vector<Perturbation>& log) {
  double margin;
  Pattern p = pattern_at(net, x, &margin);
  Rng rng(0x5eed);
  for (int attempt = 0; margin < 1e-13 && attempt < 32; ++attempt) {
    const Vector2d from = x;
    const double step = 1e-9 * (attempt + 1);
    const Vector2d d = attempt < 2 ? (attempt == 0 ? dir : Vector2d(-dir)) : Vector2d(rng.uniform(-1, 1), rng.uniform(-1, 1));
    x = (x + step * d).cwiseMax(0.0).cwiseMin(1.0);
    log.push_back({from, x});
    p = pattern_at(net, x, &margin);
  }
  return p;
}

/// Parameter interval of segment a→b lying inside every constraint (with
/// slack `tol`); empty when lo > hi.
inline std::pair<double, double> segment_inside(const Vector2d& a, const Vector2d& b,
                                                const std::vector<HalfPlane>& hs, double tol) {
  double lo = 0.0, hi = 1.0;
  auto cut = [&](const HalfPlane& h) {
    const double s = tol * std::max(1.0, h.normal.norm());
    const double ga = h.eval(a) + s, gb = h.eval(b) + s;
    if (ga >= 0 && gb >= 0) return;
    if (ga < 0 && gb < 0) {
      lo = 1.0;
      hi = 0.0;
      return;
    }
    const double t = ga / (ga - gb);
    if (ga < 0) lo = std::max(lo, t);
    else hi = std::min(hi, t);
  };
  for (const auto& h : hs) cut(h);
  cut({Vector2d(1, 0), 0.0, -1});
  cut({Vector2d(-1, 0), 1.0, -2});
  cut({Vector2d(0, 1), 0.0, -3});
  cut({Vector2d(0, -1), 1.0, -4});
  return {lo, hi};
}

/// Removes [lo, hi] from a sorted list of disjoint intervals.
inline void subtract(std::vector<std::pair<double, double>>& iv, double lo, double hi) {
  std::vector<std::pair<double, double>> out;
  for (auto [a, b] : iv) {
    if (hi <= a || lo >= b) {
      out.push_back({a, b});
      continue;
    }
    if (lo > a) out.push_back({a, lo});
    if (hi < b) out.push_back({hi, b});
  }
  iv.clear();
  for (auto [a, b] : out)
    if (b - a > 1e-12) iv.push_back({a, b});
}

}  // namespace detail

/// Walks the arrangement from the pattern at the square's centre: every edge
/// of a found cell that is not a side of the square is probed just outside
/// until the cells found across it cover the whole edge.
inline Enumeration enumerate_regions(const ReluNet& net) {
  validate(net);
  if (net.hidden_units() > kMaxHiddenUnits)
    throw InvalidArgument("enumerate_regions: " + std::to_string(net.hidden_units()) + " hidden units exceeds the limit of " +
                          std::to_string(kMaxHiddenUnits));
  Enumeration out;
  std::map<Pattern, Polygon> found;
  std::map<Pattern, PatternMaps> maps;
  std::vector<Pattern> queue;

  auto visit = [&](Pattern p) -> const Polygon* {
    if (auto it = found.find(p); it != found.end()) return &it->second;
    auto m = pattern_maps(net, p);
    Polygon poly = cell_polygon(m);
    if (poly.empty()) return nullptr;
    maps.emplace(p, std::move(m));
    queue.push_back(p);
    return &found.emplace(p, std::move(poly)).first->second;
  };

  // Seed: a point inside a cell of positive area.
  {
    const Pattern seed = detail::robust_pattern(net, Vector2d(0.5, 0.5), Vector2d(1, 0.618), out.perturbations);
    if (!visit(seed)) throw Error("enumerate_regions: seed cell has zero area");
  }

  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const Pattern p = queue[qi];
    const Polygon poly = found.at(p);
    for (std::size_t e = 0; e < poly.size(); ++e) {
      if (poly[e].label < 0) continue;
      const Vector2d a = poly[e].p, b = poly[(e + 1) % poly.size()].p;
      const Vector2d dir = b - a;
      const double len = dir.norm();
      const Vector2d outward = Vector2d(dir.y(), -dir.x()) / len;  // cells are counter-clockwise
      std::vector<std::pair<double, double>> open{{0.0, 1.0}};
      for (int guard = 0; !open.empty() && guard < 4096; ++guard) {
        const double t = 0.5 * (open.front().first + open.front().second);
        const Vector2d q = a + t * dir;
        bool covered = false;
        for (double step : {1e-7, 1e-9, 1e-11}) {
          const Vector2d probe = q + step * outward;
          if (probe.minCoeff() < 0.0 || probe.maxCoeff() > 1.0) continue;
          const Pattern np = detail::robust_pattern(net, probe, dir / len, out.perturbations);
          const Polygon* cell = visit(np);
          if (!cell) continue;
          const auto [lo, hi] = detail::segment_inside(a, b, maps.at(np).constraints, 1e-9);
          if (lo <= t && t <= hi) {
            detail::subtract(open, lo, hi);
            covered = true;
            break;
          }
        }
        if (!covered) {
          ++out.unresolved_probes;
          detail::subtract(open, t - 1e-9, t + 1e-9);
        }
      }
    }
  }

  double total = 0.0;
  for (auto& [p, poly] : found) {
    LinearRegion r;
    r.pattern = p;
    r.pattern_bits = net.hidden_units();
    const auto& m = maps.at(p);
    r.A = m.A;
    r.b = m.b;
    r.polygon = poly;
    r.area = area(poly);
    r.witness = centroid(poly);
    r.witness_margin = std::numeric_limits<double>::infinity();
    for (const auto& h : m.constraints) {
      const bool bounds = std::any_of(poly.begin(), poly.end(), [&](const PolyVertex& v) { return v.label == h.label; });
      if (bounds) r.halfspaces.push_back(h);
      r.witness_margin = std::min(r.witness_margin, h.eval(r.witness) / h.normal.norm());
    }
    total += r.area;
    out.regions.push_back(std::move(r));
  }
  out.area_residual = std::abs(total - 1.0);
  return out;
}

/// A, b from f at three affinely independent points (an independent check
/// of the composed maps).
inline std::pair<MatrixXd, VectorXd> affine_from_points(const ReluNet& net, const Vector2d& p0, const Vector2d& p1,
                                                        const Vector2d& p2) {
  const VectorXd f0 = net(p0), f1 = net(p1), f2 = net(p2);
  Matrix2d E;
  E.col(0) = p1 - p0;
  E.col(1) = p2 - p0;
  if (std::abs(E.determinant()) < 1e-300) throw InvalidArgument("affine_from_points: collinear points");
  MatrixXd F(f0.size(), 2);
  F.col(0) = f1 - f0;
  F.col(1) = f2 - f0;
  const MatrixXd A = F * E.inverse();
  return {A, f0 - A * p0};
}

// ---------------------------------------------------------------------------
// Rank-2 condition

inline constexpr double kRankTolerance = 1e-8;

struct RankReport {
  std::vector<std::array<double, 2>> singular_values;  // per region
  std::vector<std::size_t> failing;                     // regions with σ₂ ≤ 1e-8·σ₁
  double rank2_area_fraction = 0.0;
  double min_sigma2 = std::numeric_limits<double>::infinity();
};

inline bool is_rank2(double s1, double s2) { return s2 > kRankTolerance * s1; }

inline std::array<double, 2> singular_values(const MatrixXd& A) {
  Eigen::JacobiSVD<MatrixXd> svd(A);
  const auto s = svd.singularValues();
  return {s(0), s.size() > 1 ? s(1) : 0.0};
}

inline RankReport check_rank2(const std::vector<LinearRegion>& regions) {
  RankReport rep;
  double total = 0.0, good = 0.0;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto s = singular_values(regions[i].A);
    rep.singular_values.push_back(s);
    rep.min_sigma2 = std::min(rep.min_sigma2, s[1]);
    total += regions[i].area;
    if (is_rank2(s[0], s[1])) good += regions[i].area;
    else rep.failing.push_back(i);
  }
  rep.rank2_area_fraction = total > 0.0 ? good / total : 0.0;
  return rep;
}

/// Cells triangulated as fans and lifted through their affine maps; colors
/// distinguish regions, the atlas keeps the domain coordinates.
inline geometry::TriangleMesh lifted_tessellation(const std::vector<LinearRegion>& regions) {
  geometry::TriangleMesh mesh;
  auto& atlas = mesh.atlas.emplace();
  auto& colors = mesh.colors.emplace();
  for (const auto& r : regions) {
    if (r.A.rows() != 3) throw InvalidArgument("lifted_tessellation: outputs must be 3D");
    Rng rng(splitmix64(r.pattern));
    const geometry::Vec3 color{rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)};
    const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
    for (const auto& v : r.polygon) {
      const VectorXd y = r.map(v.p);
      mesh.vertices.push_back({y(0), y(1), y(2)});
      atlas.push_back({0, std::clamp(v.p.x(), 0.0, 1.0), std::clamp(v.p.y(), 0.0, 1.0)});
      colors.push_back(color);
    }
    for (std::uint32_t k = 1; k + 1 < r.polygon.size(); ++k) mesh.faces.push_back({base, base + k, base + k + 1});
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// Width-vs-error study

using Chart = std::function<geometry::Vec3(double, double)>;

/// Upper hemisphere over [0,1]²: x = 1.2(u − ½), y = 1.2(v − ½), z = √(1 − x² − y²).
inline geometry::Vec3 hemisphere_chart(double u, double v) {
  const double x = 1.2 * (u - 0.5), y = 1.2 * (v - 0.5);
  return {x, y, std::sqrt(1.0 - x * x - y * y)};
}

struct FitConfig {
  std::size_t grid = 41;         // training samples per side
  std::size_t steps = 3000;      // full-batch Adam steps
  double rate = 1e-3;            // decays geometrically to final_rate
  double final_rate = 1e-5;
  std::size_t eval_grid = 200;   // sup error measured on eval_grid² points
  bool polish = true;            // least-squares refit of the output layer
  /// Initial hidden hyperplanes: through random points of the square, just
  /// outside it (every unit starts active everywhere), or both with the
  /// lower training error kept.
  enum class Init { kThroughSquare, kOutsideSquare, kBestOfBoth } init = Init::kBestOfBoth;
};

struct FitResult {
  std::size_t width = 0;
  double sup_error = 0.0;  // max Euclidean error over the evaluation grid
  double train_mse = 0.0;
  bool diverged = false;
  ReluNet net;
};

namespace detail {

inline MatrixXd grid_points(std::size_t g) {
  MatrixXd m(g * g, 2);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      m(i * g + j, 0) = static_cast<double>(i) / static_cast<double>(g - 1);
      m(i * g + j, 1) = static_cast<double>(j) / static_cast<double>(g - 1);
    }
  return m;
}

/// Rows are samples: H = relu(X W1ᵀ + 1 b1ᵀ), Y = H W2ᵀ + 1 b2ᵀ.
struct ShallowNet {
  MatrixXd W1;  // K × 2
  VectorXd b1;
  MatrixXd W2;  // 3 × K
  VectorXd b2;

  MatrixXd hidden(const MatrixXd& X) const { return ((X * W1.transpose()).rowwise() + b1.transpose()).cwiseMax(0.0); }
  ReluNet to_net() const { return ReluNet{{AffineLayer{W1, b1}, AffineLayer{W2, b2}}}; }
};

/// Least-squares output layer for fixed hidden units.
inline void polish_output(ShallowNet& net, const MatrixXd& X, const MatrixXd& T) {
  const MatrixXd H = net.hidden(X);
  MatrixXd Ha(H.rows(), H.cols() + 1);
  Ha << H, VectorXd::Ones(H.rows());
  const MatrixXd B = Ha.completeOrthogonalDecomposition().solve(T);
  net.W2 = B.topRows(H.cols()).transpose();
  net.b2 = B.row(H.cols()).transpose();
}

}  // namespace detail

/// Fits a 2→K→3 ReLU network to `chart` by full-batch Adam on the mean
/// squared error over a regular grid, then optionally refits the output layer
/// by least squares.
inline FitResult fit_relu_chart(const Chart& chart, std::size_t width, std::uint64_t seed, const FitConfig& cfg = {}) {
  if (cfg.init == FitConfig::Init::kBestOfBoth) {
    FitConfig c = cfg;
    c.init = FitConfig::Init::kThroughSquare;
    FitResult a = fit_relu_chart(chart, width, seed, c);
    c.init = FitConfig::Init::kOutsideSquare;
    FitResult b = fit_relu_chart(chart, width, seed, c);
    if (a.diverged) return b;
    if (b.diverged) return a;
    return b.train_mse < a.train_mse ? b : a;
  }
  if (width == 0) throw InvalidArgument("fit_relu_chart: width must be positive");
  if (cfg.grid < 2 || cfg.eval_grid < 2) throw InvalidArgument("fit_relu_chart: grids need at least 2 points per side");
  const MatrixXd X = detail::grid_points(cfg.grid);
  const auto n = X.rows();
  const auto K = static_cast<Eigen::Index>(width);
  MatrixXd T(n, 3);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto y = chart(X(r, 0), X(r, 1));
    T.row(r) << y[0], y[1], y[2];
  }

  detail::ShallowNet net{MatrixXd(K, 2), VectorXd(K), MatrixXd(3, K), VectorXd::Zero(3)};
  Rng rng(seed);
  for (Eigen::Index j = 0; j < K; ++j) {
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi), scale = rng.uniform(1.0, 3.0);
    const double px = rng.uniform(), py = rng.uniform();
    const double wx = scale * std::cos(angle), wy = scale * std::sin(angle);
    net.W1.row(j) << wx, wy;
    if (cfg.init == FitConfig::Init::kThroughSquare) {
      net.b1(j) = -(wx * px + wy * py);
    } else {
      // Smallest value of w·x over the square, then a random margin.
      const double lowest = std::min(0.0, wx) + std::min(0.0, wy);
      net.b1(j) = -lowest + scale * rng.uniform(0.05, 0.5);
    }
  }
  const double lim = std::sqrt(6.0 / static_cast<double>(width + 3));
  for (Eigen::Index k = 0; k < 3; ++k)
    for (Eigen::Index j = 0; j < K; ++j) net.W2(k, j) = rng.uniform(-lim, lim);

  FitResult res;
  res.width = width;
  // Adam state in the order W1, b1, W2, b2.
  const Eigen::Index np = 2 * K + K + 3 * K + 3;
  VectorXd m = VectorXd::Zero(np), v = VectorXd::Zero(np), g(np);
  MatrixXd Z(n, K), H(n, K), Y(n, 3), dY(n, 3), dZ(n, K);
  const double decay = cfg.steps > 1 ? std::pow(cfg.final_rate / cfg.rate, 1.0 / static_cast<double>(cfg.steps - 1)) : 1.0;
  double rate = cfg.rate;
  for (std::size_t step = 0; step < cfg.steps; ++step, rate *= decay) {
    Z.noalias() = X * net.W1.transpose();
    Z.rowwise() += net.b1.transpose();
    H = Z.cwiseMax(0.0);
    Y.noalias() = H * net.W2.transpose();
    Y.rowwise() += net.b2.transpose();
    dY = Y - T;
    const double loss = dY.squaredNorm() / static_cast<double>(n);
    if (!std::isfinite(loss)) {
      res.diverged = true;
      break;
    }
    dY *= 2.0 / static_cast<double>(n);
    dZ.noalias() = dY * net.W2;
    dZ = (Z.array() > 0.0).select(dZ, 0.0);
    const MatrixXd gW1 = dZ.transpose() * X;  // K × 2
    const VectorXd gb1 = dZ.colwise().sum().transpose();
    const MatrixXd gW2 = dY.transpose() * H;  // 3 × K
    const VectorXd gb2 = dY.colwise().sum().transpose();
    g << Eigen::Map<const VectorXd>(gW1.data(), 2 * K), gb1, Eigen::Map<const VectorXd>(gW2.data(), 3 * K), gb2;
    const double c1 = 1.0 - std::pow(0.9, static_cast<double>(step + 1));
    const double c2 = 1.0 - std::pow(0.999, static_cast<double>(step + 1));
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g.cwiseProduct(g);
    const VectorXd delta = (rate / c1) * m.array() / ((v.array() / c2).sqrt() + 1e-8);
    Eigen::Map<VectorXd>(net.W1.data(), 2 * K) -= delta.segment(0, 2 * K);
    net.b1 -= delta.segment(2 * K, K);
    Eigen::Map<VectorXd>(net.W2.data(), 3 * K) -= delta.segment(3 * K, 3 * K);
    net.b2 -= delta.segment(6 * K, 3);
  }
  if (!res.diverged && cfg.polish) detail::polish_output(net, X, T);
  res.net = net.to_net();

  Y = net.hidden(X) * net.W2.transpose();
  Y.rowwise() += net.b2.transpose();
  res.train_mse = (Y - T).squaredNorm() / static_cast<double>(n);
  double sup = 0.0;
  const MatrixXd E = detail::grid_points(cfg.eval_grid);
  MatrixXd YE = net.hidden(E) * net.W2.transpose();
  YE.rowwise() += net.b2.transpose();
  for (Eigen::Index r = 0; r < E.rows(); ++r) {
    const auto t = chart(E(r, 0), E(r, 1));
    sup = std::max(sup, (YE.row(r).transpose() - Eigen::Vector3d(t[0], t[1], t[2])).norm());
  }
  res.sup_error = sup;
  if (!std::isfinite(sup) || !std::isfinite(res.train_mse)) res.diverged = true;
  return res;
}

struct StudyRow {
  std::size_t width = 0;
  std::vector<double> sup_errors;  // per seed; diverged fits are +inf
  double median = 0.0;
  std::size_t failures = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of an empty list");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<StudyRow> approximation_study(const Chart& chart, const std::vector<std::size_t>& widths,
                                                 const std::vector<std::uint64_t>& seeds, const FitConfig& cfg = {}) {
  std::vector<StudyRow> rows;
  for (auto k : widths) {
    StudyRow row;
    row.width = k;
    for (auto s : seeds) {
      const auto fit = fit_relu_chart(chart, k, s, cfg);
      row.sup_errors.push_back(fit.diverged ? std::numeric_limits<double>::infinity() : fit.sup_error);
      row.failures += fit.diverged;
    }
    row.median = median(row.sup_errors);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace atlas::theory
