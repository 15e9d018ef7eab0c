#pragma once

// Point clouds, triangle meshes, procedural test shapes, area-weighted surface
// sampling and text interchange (OBJ, xyz).

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "atlas/error.hpp"
#include "atlas/rng.hpp"

namespace atlas::geometry {

using Vec3 = std::array<double, 3>;
using Face = std::array<std::uint32_t, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double sq_dist(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}
inline Vec3 normalized(const Vec3& a) { return (1.0 / norm(a)) * a; }

struct PointCloud {
  std::vector<Vec3> points;
  std::optional<std::vector<Vec3>> normals;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Per-vertex atlas coordinate.
struct AtlasCoord {
  std::uint32_t patch = 0;
  double u = 0.0;
  double v = 0.0;
  friend bool operator==(const AtlasCoord&, const AtlasCoord&) = default;
};

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::optional<std::vector<AtlasCoord>> atlas;
  std::optional<std::vector<Vec3>> colors;  // RGB in [0,1], written as OBJ vertex colors
};

/// Throws InvalidArgument describing the first violated mesh invariant.
inline void validate(const TriangleMesh& mesh) {
  const auto nv = mesh.vertices.size();
  for (const auto& p : mesh.vertices)
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
      throw InvalidArgument("mesh: non-finite vertex");
  std::set<Face> seen;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    Face t = mesh.faces[f];
    for (auto i : t)
      if (i >= nv) throw InvalidArgument("mesh: face " + std::to_string(f) + " index out of range");
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
      throw InvalidArgument("mesh: face " + std::to_string(f) + " repeats a vertex");
    std::sort(t.begin(), t.end());
    if (!seen.insert(t).second) throw InvalidArgument("mesh: face " + std::to_string(f) + " is repeated");
  }
  if (mesh.atlas) {
    if (mesh.atlas->size() != nv) throw InvalidArgument("mesh: atlas size does not match vertex count");
    for (const auto& a : *mesh.atlas)
      if (!(a.u >= 0.0 && a.u <= 1.0 && a.v >= 0.0 && a.v <= 1.0))
        throw InvalidArgument("mesh: atlas coordinate outside [0,1]");
  }
  if (mesh.colors && mesh.colors->size() != nv) throw InvalidArgument("mesh: color count does not match vertex count");
}

inline double face_area(const TriangleMesh& m, std::size_t f) {
  const auto& t = m.faces[f];
  return 0.5 * norm(cross(m.vertices[t[1]] - m.vertices[t[0]], m.vertices[t[2]] - m.vertices[t[0]]));
}

inline double total_area(const TriangleMesh& m) {
  double a = 0.0;
  for (std::size_t f = 0; f < m.faces.size(); ++f) a += face_area(m, f);
  return a;
}

/// Undirected edge → number of incident faces.
inline std::map<std::pair<std::uint32_t, std::uint32_t>, int> edge_degrees(const TriangleMesh& m) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> deg;
  for (const auto& t : m.faces)
    for (int k = 0; k < 3; ++k) {
      auto a = t[k], b = t[(k + 1) % 3];
      ++deg[{std::min(a, b), std::max(a, b)}];
    }
  return deg;
}

inline long euler_characteristic(const TriangleMesh& m) {
  return static_cast<long>(m.vertices.size()) - static_cast<long>(edge_degrees(m).size()) +
         static_cast<long>(m.faces.size());
}

/// True when every edge is shared by exactly two faces.
inline bool is_watertight(const TriangleMesh& m) {
  if (m.faces.empty()) return false;
  for (const auto& [e, d] : edge_degrees(m))
    if (d != 2) return false;
  return true;
}

/// Number of connected components over face connectivity (isolated vertices ignored).
inline std::size_t connected_components(const TriangleMesh& m) {
  std::vector<std::uint32_t> parent(m.vertices.size());
  for (std::uint32_t i = 0; i < parent.size(); ++i) parent[i] = i;
  auto find = [&](std::uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::vector<bool> used(m.vertices.size(), false);
  for (const auto& t : m.faces) {
    for (auto i : t) used[i] = true;
    parent[find(t[1])] = find(t[0]);
    parent[find(t[2])] = find(t[0]);
  }
  std::size_t n = 0;
  for (std::uint32_t i = 0; i < parent.size(); ++i)
    if (used[i] && find(i) == i) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Procedural shapes

enum class ShapeKind { kSphere, kTorus, kBox, kPlane, kTwoPlanes, kCapsule };

inline std::string_view kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kSphere: return "sphere";
    case ShapeKind::kTorus: return "torus";
    case ShapeKind::kBox: return "box";
    case ShapeKind::kPlane: return "plane";
    case ShapeKind::kTwoPlanes: return "two-planes";
    case ShapeKind::kCapsule: return "capsule";
  }
  return "?";
}

inline ShapeKind parse_kind(std::string_view s) {
  for (auto k : {ShapeKind::kSphere, ShapeKind::kTorus, ShapeKind::kBox, ShapeKind::kPlane, ShapeKind::kTwoPlanes,
                 ShapeKind::kCapsule})
    if (kind_name(k) == s) return k;
  throw InvalidArgument("unknown shape kind '" + std::string(s) + "'");
}

/// Parameter names per kind, in storage order.
inline std::vector<std::string> parameter_names(ShapeKind k) {
  switch (k) {
    case ShapeKind::kSphere: return {"radius"};
    case ShapeKind::kTorus: return {"major", "minor"};
    case ShapeKind::kBox: return {"x", "y", "z"};
    case ShapeKind::kPlane: return {"x", "y"};
    case ShapeKind::kTwoPlanes: return {"x", "y", "gap"};
    case ShapeKind::kCapsule: return {"radius", "length"};
  }
  return {};
}

inline std::vector<double> default_parameters(ShapeKind k) {
  switch (k) {
    case ShapeKind::kSphere: return {1.0};
    case ShapeKind::kTorus: return {1.0, 0.35};
    case ShapeKind::kBox: return {1.0, 1.0, 1.0};
    case ShapeKind::kPlane: return {1.0, 1.0};
    case ShapeKind::kTwoPlanes: return {1.0, 1.0, 0.5};
    case ShapeKind::kCapsule: return {0.5, 1.0};
  }
  return {};
}

struct ShapeSpec {
  ShapeKind kind = ShapeKind::kSphere;
  std::vector<double> parameters = default_parameters(ShapeKind::kSphere);
  std::uint64_t seed = 0;

  static ShapeSpec of(ShapeKind kind, std::vector<double> params = {}, std::uint64_t seed = 0) {
    ShapeSpec s{kind, params.empty() ? default_parameters(kind) : std::move(params), seed};
    return s;
  }
};

inline void validate(const ShapeSpec& spec) {
  const auto names = parameter_names(spec.kind);
  if (spec.parameters.size() != names.size())
    throw InvalidArgument(std::string(kind_name(spec.kind)) + " expects " + std::to_string(names.size()) +
                          " parameters");
  for (std::size_t i = 0; i < names.size(); ++i)
    if (!(spec.parameters[i] > 0.0) || !std::isfinite(spec.parameters[i]))
      throw InvalidArgument(std::string(kind_name(spec.kind)) + ": parameter '" + names[i] +
                            "' must be strictly positive");
  if (spec.kind == ShapeKind::kTorus && !(spec.parameters[1] < spec.parameters[0]))
    throw InvalidArgument("torus: minor radius must be smaller than major radius");
}

/// Subdivided icosahedron projected onto the sphere of the given radius.
inline TriangleMesh icosphere(unsigned subdivisions, double radius = 1.0) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  TriangleMesh m;
  m.vertices = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  m.faces = {{0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8}, {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8},
             {3, 8, 9}, {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};
  for (auto& v : m.vertices) v = normalized(v);
  for (unsigned s = 0; s < subdivisions; ++s) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> midpoint;
    auto mid = [&](std::uint32_t a, std::uint32_t b) {
      const auto key = std::make_pair(std::min(a, b), std::max(a, b));
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      const auto id = static_cast<std::uint32_t>(m.vertices.size());
      m.vertices.push_back(normalized(0.5 * (m.vertices[a] + m.vertices[b])));
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<Face> next;
    next.reserve(m.faces.size() * 4);
    for (const auto& f : m.faces) {
      const auto ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    m.faces = std::move(next);
  }
  for (auto& v : m.vertices) v = radius * v;
  return m;
}

namespace detail {

// Regular (rows+1)×(cols+1) vertex grid over [0,sx]×[0,sy] at height z.
inline void append_grid(TriangleMesh& m, double sx, double sy, double z, unsigned cells, bool flip) {
  const auto base = static_cast<std::uint32_t>(m.vertices.size());
  const unsigned n = cells + 1;
  for (unsigned r = 0; r < n; ++r)
    for (unsigned c = 0; c < n; ++c) m.vertices.push_back({sx * c / cells, sy * r / cells, z});
  for (unsigned r = 0; r < cells; ++r)
    for (unsigned c = 0; c < cells; ++c) {
      const std::uint32_t a = base + r * n + c, b = a + 1, d = a + n, e = d + 1;
      if (flip) {
        m.faces.push_back({a, e, b});
        m.faces.push_back({a, d, e});
      } else {
        m.faces.push_back({a, b, e});
        m.faces.push_back({a, e, d});
      }
    }
}

inline TriangleMesh torus(double major, double minor, unsigned res) {
  TriangleMesh m;
  const unsigned nu = 2 * res, nv = res;
  for (unsigned i = 0; i < nu; ++i) {
    const double a = 2.0 * std::numbers::pi * i / nu;
    for (unsigned j = 0; j < nv; ++j) {
      const double b = 2.0 * std::numbers::pi * j / nv;
      const double rr = major + minor * std::cos(b);
      m.vertices.push_back({rr * std::cos(a), rr * std::sin(a), minor * std::sin(b)});
    }
  }
  for (unsigned i = 0; i < nu; ++i)
    for (unsigned j = 0; j < nv; ++j) {
      const std::uint32_t a = i * nv + j, b = ((i + 1) % nu) * nv + j, c = ((i + 1) % nu) * nv + (j + 1) % nv,
                          d = i * nv + (j + 1) % nv;
      m.faces.push_back({a, b, c});
      m.faces.push_back({a, c, d});
    }
  return m;
}

inline TriangleMesh box(double x, double y, double z) {
  TriangleMesh m;
  for (int k = 0; k < 8; ++k)
    m.vertices.push_back({(k & 1 ? 0.5 : -0.5) * x, (k & 2 ? 0.5 : -0.5) * y, (k & 4 ? 0.5 : -0.5) * z});
  m.faces = {{0, 2, 3}, {0, 3, 1}, {4, 5, 7}, {4, 7, 6}, {0, 1, 5}, {0, 5, 4},
             {2, 6, 7}, {2, 7, 3}, {0, 4, 6}, {0, 6, 2}, {1, 3, 7}, {1, 7, 5}};
  return m;
}

inline TriangleMesh capsule(double radius, double length, unsigned res) {
  TriangleMesh m;
  const unsigned seg = 2 * res, half = std::max(1u, res / 2);
  std::vector<std::pair<double, double>> rings;  // (z, ring radius)
  for (unsigned i = 1; i <= half; ++i) {
    const double phi = 0.5 * std::numbers::pi * i / half;
    rings.emplace_back(0.5 * length + radius * std::cos(phi), radius * std::sin(phi));
  }
  for (unsigned i = 0; i < half; ++i) {
    const double phi = 0.5 * std::numbers::pi * (1.0 + static_cast<double>(i) / half);
    rings.emplace_back(-0.5 * length + radius * std::cos(phi), radius * std::sin(phi));
  }
  m.vertices.push_back({0, 0, 0.5 * length + radius});
  for (const auto& [z, rho] : rings)
    for (unsigned s = 0; s < seg; ++s) {
      const double a = 2.0 * std::numbers::pi * s / seg;
      m.vertices.push_back({rho * std::cos(a), rho * std::sin(a), z});
    }
  m.vertices.push_back({0, 0, -0.5 * length - radius});
  const auto bottom = static_cast<std::uint32_t>(m.vertices.size() - 1);
  auto at = [&](unsigned ring, unsigned s) { return static_cast<std::uint32_t>(1 + ring * seg + s % seg); };
  for (unsigned s = 0; s < seg; ++s) m.faces.push_back({0, at(0, s), at(0, s + 1)});
  for (unsigned r = 0; r + 1 < rings.size(); ++r)
    for (unsigned s = 0; s < seg; ++s) {
      m.faces.push_back({at(r, s), at(r + 1, s), at(r + 1, s + 1)});
      m.faces.push_back({at(r, s), at(r + 1, s + 1), at(r, s + 1)});
    }
  const auto last = static_cast<unsigned>(rings.size() - 1);
  for (unsigned s = 0; s < seg; ++s) m.faces.push_back({bottom, at(last, s + 1), at(last, s)});
  return m;
}

}  // namespace detail

/// Deterministic mesh for a shape spec. For spheres `resolution` is the
/// icosphere subdivision level; otherwise it controls tessellation density.
/// Boxes are always the 12-triangle cube.
inline TriangleMesh procedural(const ShapeSpec& spec, unsigned resolution) {
  if (resolution < 3) throw InvalidArgument("procedural: resolution must be at least 3");
  validate(spec);
  const auto& p = spec.parameters;
  switch (spec.kind) {
    case ShapeKind::kSphere: return icosphere(resolution, p[0]);
    case ShapeKind::kTorus: return detail::torus(p[0], p[1], resolution);
    case ShapeKind::kBox: return detail::box(p[0], p[1], p[2]);
    case ShapeKind::kPlane: {
      TriangleMesh m;
      detail::append_grid(m, p[0], p[1], 0.0, resolution, false);
      return m;
    }
    case ShapeKind::kTwoPlanes: {
      TriangleMesh m;
      detail::append_grid(m, p[0], p[1], 0.0, resolution, true);
      detail::append_grid(m, p[0], p[1], p[2], resolution, false);
      return m;
    }
    case ShapeKind::kCapsule: return detail::capsule(p[0], p[1], resolution);
  }
  throw InvalidArgument("procedural: unknown kind");
}

// ---------------------------------------------------------------------------
// Sampling and normalization

struct SurfaceSample {
  PointCloud cloud;
  std::vector<std::size_t> faces;  // source triangle of each point
};

/// Area-weighted uniform sampling; normals are the source face normals.
inline SurfaceSample sample_surface_with_faces(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("sample_surface: n must be at least 1");
  std::vector<double> cdf(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) cdf[f] = total += face_area(mesh, f);
  if (!(total > 0.0)) throw InvalidArgument("sample_surface: mesh has zero area");
  Rng rng(seed);
  SurfaceSample out;
  out.cloud.points.reserve(n);
  out.cloud.normals.emplace().reserve(n);
  out.faces.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = rng.uniform() * total;
    auto f = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
    f = std::min(f, cdf.size() - 1);
    while (face_area(mesh, f) == 0.0) f = (f + 1) % cdf.size();
    const auto& t = mesh.faces[f];
    const double s = std::sqrt(rng.uniform()), r2 = rng.uniform();
    const double a = 1.0 - s, b = s * (1.0 - r2), c = s * r2;
    const Vec3 &A = mesh.vertices[t[0]], &B = mesh.vertices[t[1]], &C = mesh.vertices[t[2]];
    out.cloud.points.push_back({a * A[0] + b * B[0] + c * C[0], a * A[1] + b * B[1] + c * C[1],
                                a * A[2] + b * B[2] + c * C[2]});
    out.cloud.normals->push_back(normalized(cross(B - A, C - A)));
    out.faces.push_back(f);
  }
  return out;
}

inline PointCloud sample_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  return sample_surface_with_faces(mesh, n, seed).cloud;
}

/// Similarity applied by normalize_to_unit_box: p ↦ (p − center)·scale.
struct UnitBoxTransform {
  Vec3 center{0, 0, 0};
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return scale * (p - center); }
  Vec3 inverse(const Vec3& q) const { return (1.0 / scale) * q + center; }
};

inline constexpr double kUnitBoxExtent = 0.95;

inline UnitBoxTransform unit_box_transform(const std::vector<Vec3>& pts) {
  if (pts.empty()) throw InvalidArgument("normalize_to_unit_box: empty point set");
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts)
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], p[k]);
      hi[k] = std::max(hi[k], p[k]);
    }
  UnitBoxTransform t;
  t.center = 0.5 * (lo + hi);
  double extent = 0.0;
  for (const auto& p : pts)
    for (int k = 0; k < 3; ++k) extent = std::max(extent, std::abs(p[k] - t.center[k]));
  if (!(extent > 0.0)) throw InvalidArgument("normalize_to_unit_box: zero extent");
  t.scale = kUnitBoxExtent / extent;
  return t;
}

/// Centers the cloud at its bounding-box center and scales uniformly so the
/// largest absolute coordinate is 0.95.
inline std::pair<PointCloud, UnitBoxTransform> normalize_to_unit_box(const PointCloud& cloud) {
  const auto t = unit_box_transform(cloud.points);
  PointCloud out = cloud;
  for (auto& p : out.points) p = t.apply(p);
  return {std::move(out), t};
}

inline TriangleMesh transformed(TriangleMesh mesh, const UnitBoxTransform& t) {
  for (auto& v : mesh.vertices) v = t.apply(v);
  return mesh;
}

// ---------------------------------------------------------------------------
// Text interchange

namespace detail {

inline void put_double(std::string& out, double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, r.ptr);
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long> parse_long(std::string_view s) {
  long v;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace detail

/// OBJ text. Atlas coordinates become one `vt` per vertex and faces are
/// grouped under `g patch_<k>`; colors become `v x y z r g b`.
inline std::string to_obj(const TriangleMesh& mesh) {
  validate(mesh);
  std::string out;
  out.reserve(mesh.vertices.size() * 64 + mesh.faces.size() * 32);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    out += "v";
    for (double c : mesh.vertices[i]) {
      out += ' ';
      detail::put_double(out, c);
    }
    if (mesh.colors)
      for (double c : (*mesh.colors)[i]) {
        out += ' ';
        detail::put_double(out, c);
      }
    out += '\n';
  }
  if (mesh.atlas) {
    for (const auto& a : *mesh.atlas) {
      out += "vt ";
      detail::put_double(out, a.u);
      out += ' ';
      detail::put_double(out, a.v);
      out += '\n';
    }
  }
  std::optional<std::uint32_t> group;
  for (const auto& f : mesh.faces) {
    if (mesh.atlas) {
      const auto patch = (*mesh.atlas)[f[0]].patch;
      if (group != patch) {
        out += "g patch_" + std::to_string(patch) + "\n";
        group = patch;
      }
    }
    out += 'f';
    for (auto i : f) {
      out += ' ' + std::to_string(i + 1);
      if (mesh.atlas) out += '/' + std::to_string(i + 1);
    }
    out += '\n';
  }
  return out;
}

/// Parses ASCII OBJ (v, vt, f, g; other records ignored). Polygons are fan
/// triangulated. `source` names the input in error messages.
inline TriangleMesh parse_obj(std::string_view text, const std::string& source = "<obj>") {
  TriangleMesh mesh;
  std::vector<std::pair<double, double>> uvs;
  std::vector<std::optional<AtlasCoord>> vertex_atlas;
  std::vector<Vec3> colors;
  std::set<Face> seen;
  std::uint32_t patch = 0;
  bool any_uv_face = false;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const auto tok = detail::split_ws(line);
    if (tok.empty() || tok[0][0] == '#') continue;
    auto fail = [&](const std::string& what) -> void { throw ParseError(source, line_no, what); };
    if (tok[0] == "v") {
      if (tok.size() != 4 && tok.size() != 7) fail("vertex needs 3 coordinates (optionally 3 colors)");
      Vec3 p, c{};
      for (int k = 0; k < 3; ++k) {
        auto v = detail::parse_double(tok[1 + k]);
        if (!v) fail("malformed number '" + std::string(tok[1 + k]) + "'");
        p[k] = *v;
      }
      if (tok.size() == 7) {
        for (int k = 0; k < 3; ++k) {
          auto v = detail::parse_double(tok[4 + k]);
          if (!v) fail("malformed number '" + std::string(tok[4 + k]) + "'");
          c[k] = *v;
        }
        colors.push_back(c);
      }
      mesh.vertices.push_back(p);
      vertex_atlas.emplace_back();
    } else if (tok[0] == "vt") {
      if (tok.size() < 3) fail("texture coordinate needs u and v");
      auto u = detail::parse_double(tok[1]), v = detail::parse_double(tok[2]);
      if (!u || !v) fail("malformed texture coordinate");
      uvs.emplace_back(*u, *v);
    } else if (tok[0] == "g") {
      patch = 0;
      if (tok.size() >= 2 && tok[1].starts_with("patch_")) {
        auto k = detail::parse_long(tok[1].substr(6));
        if (!k || *k < 0) fail("malformed patch group '" + std::string(tok[1]) + "'");
        patch = static_cast<std::uint32_t>(*k);
      }
    } else if (tok[0] == "f") {
      if (tok.size() < 4) fail("face needs at least 3 vertices");
      std::vector<std::uint32_t> idx;
      for (std::size_t k = 1; k < tok.size(); ++k) {
        const auto ref = tok[k];
        const auto slash = ref.find('/');
        auto vi = detail::parse_long(ref.substr(0, slash));
        if (!vi || *vi == 0) fail("malformed vertex reference '" + std::string(ref) + "'");
        long v = *vi < 0 ? static_cast<long>(mesh.vertices.size()) + *vi : *vi - 1;
        if (v < 0 || v >= static_cast<long>(mesh.vertices.size()))
          fail("vertex index " + std::to_string(*vi) + " out of range (" + std::to_string(mesh.vertices.size()) +
               " vertices)");
        if (slash != std::string_view::npos) {
          const auto rest = ref.substr(slash + 1);
          const auto tslash = rest.find('/');
          const auto tref = rest.substr(0, tslash);
          if (!tref.empty()) {
            auto ti = detail::parse_long(tref);
            if (!ti || *ti == 0) fail("malformed texture reference '" + std::string(ref) + "'");
            long t = *ti < 0 ? static_cast<long>(uvs.size()) + *ti : *ti - 1;
            if (t < 0 || t >= static_cast<long>(uvs.size()))
              fail("texture index " + std::to_string(*ti) + " out of range");
            any_uv_face = true;
            if (!vertex_atlas[v]) vertex_atlas[v] = AtlasCoord{patch, uvs[t].first, uvs[t].second};
          }
        }
        idx.push_back(static_cast<std::uint32_t>(v));
      }
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) {
        Face f{idx[0], idx[k], idx[k + 1]};
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) fail("degenerate face repeats a vertex");
        Face key = f;
        std::sort(key.begin(), key.end());
        if (!seen.insert(key).second) fail("duplicate face");
        mesh.faces.push_back(f);
      }
    }
  }
  if (!colors.empty()) {
    if (colors.size() != mesh.vertices.size()) throw ParseError(source, line_no, "colors given for only some vertices");
    mesh.colors = std::move(colors);
  }
  if (any_uv_face) {
    auto& atlas = mesh.atlas.emplace(mesh.vertices.size());
    for (std::size_t i = 0; i < atlas.size(); ++i)
      if (vertex_atlas[i]) atlas[i] = *vertex_atlas[i];
  }
  return mesh;
}

inline void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path) {
  detail::write_file(path, to_obj(mesh));
}

inline TriangleMesh read_obj(const std::filesystem::path& path) {
  return parse_obj(detail::read_file(path), path.string());
}

/// `x y z [nx ny nz]` per line.
inline std::string to_xyz(const PointCloud& cloud) {
  std::string out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      if (k) out += ' ';
      detail::put_double(out, cloud.points[i][k]);
    }
    if (cloud.normals)
      for (double c : (*cloud.normals)[i]) {
        out += ' ';
        detail::put_double(out, c);
      }
    out += '\n';
  }
  return out;
}

inline PointCloud parse_xyz(std::string_view text, const std::string& source = "<xyz>") {
  PointCloud cloud;
  std::vector<Vec3> normals;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const auto tok = detail::split_ws(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (tok.empty() || tok[0][0] == '#') continue;
    if (tok.size() != 3 && tok.size() != 6) throw ParseError(source, line_no, "expected 3 or 6 numbers");
    double v[6];
    for (std::size_t k = 0; k < tok.size(); ++k) {
      auto d = detail::parse_double(tok[k]);
      if (!d || !std::isfinite(*d)) throw ParseError(source, line_no, "malformed number '" + std::string(tok[k]) + "'");
      v[k] = *d;
    }
    cloud.points.push_back({v[0], v[1], v[2]});
    if (tok.size() == 6) normals.push_back({v[3], v[4], v[5]});
  }
  if (!normals.empty()) {
    if (normals.size() != cloud.points.size()) throw ParseError(source, line_no, "normals given for only some points");
    cloud.normals = std::move(normals);
  }
  return cloud;
}

inline void write_xyz(const PointCloud& cloud, const std::filesystem::path& path) {
  detail::write_file(path, to_xyz(cloud));
}

inline PointCloud read_xyz(const std::filesystem::path& path) {
  return parse_xyz(detail::read_file(path), path.string());
}

}  // namespace atlas::geometry
