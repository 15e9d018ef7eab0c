#pragma once

// Meshes and dense point sets from a trained decoder.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <thread>
#include <vector>

#include "atlas/chamfer.hpp"
#include "atlas/error.hpp"
#include "atlas/geometry.hpp"
#include "atlas/models.hpp"

namespace atlas::meshing {

using chamfer::Patches;
using geometry::AtlasCoord;
using geometry::TriangleMesh;
using geometry::Vec3;
using models::AtlasModel;
using models::LatentCode;
using models::Matrix;

struct GridMeshSpec {
  std::size_t g = 30;                 // vertices per side of each patch grid
  std::vector<std::size_t> patches;   // empty: every patch
  std::size_t batch_size = 4096;      // decoder rows evaluated at once
  unsigned threads = 1;
};

namespace detail {

/// Decodes `samples` through one patch, at most `batch` rows per evaluation.
inline Matrix decode_batched(const AtlasModel& model, std::size_t patch, const Matrix& samples, const LatentCode& x,
                             std::size_t batch, std::size_t* peak_rows = nullptr) {
  batch = std::max<std::size_t>(1, batch);
  Matrix out(samples.rows(), 3);
  for (std::size_t b = 0; b < samples.rows(); b += batch) {
    const std::size_t e = std::min(samples.rows(), b + batch);
    Matrix chunk(e - b, samples.cols());
    std::copy(samples.row(b), samples.row(b) + (e - b) * samples.cols(), chunk.data().begin());
    const Matrix y = models::detail::run_decoder(model, patch, chunk, x);
    std::copy(y.data().begin(), y.data().end(), out.row(b));
    if (peak_rows) *peak_rows = std::max(*peak_rows, e - b);
  }
  return out;
}

template <typename F>
void for_each_patch(std::size_t n, unsigned threads, F&& f) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) f(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Maps a regular g×g grid of each patch to 3D and keeps the grid
/// connectivity: g² vertices and 2(g−1)² triangles per patch, each quad split
/// along its (r,c)–(r+1,c+1) diagonal. Patches are separate components.
inline TriangleMesh mesh_from_patches(const AtlasModel& model, const LatentCode& x, const GridMeshSpec& spec) {
  if (model.domain() != models::Domain::kSquare)
    throw InvalidArgument("mesh_from_patches: sphere-domain model, use mesh_from_sphere");
  if (spec.g < 2) throw InvalidArgument("mesh_from_patches: g must be at least 2");
  std::vector<std::size_t> patches = spec.patches;
  if (patches.empty()) {
    patches.resize(model.n_patches());
    std::iota(patches.begin(), patches.end(), std::size_t{0});
  }
  for (auto p : patches)
    if (p >= model.n_patches()) throw InvalidArgument("mesh_from_patches: patch index out of range");

  const std::size_t g = spec.g, per = g * g;
  const Matrix grid = models::square_grid(g);
  std::vector<Matrix> decoded(patches.size());
  detail::for_each_patch(patches.size(), spec.threads, [&](std::size_t k) {
    decoded[k] = detail::decode_batched(model, patches[k], grid, x, spec.batch_size);
  });

  TriangleMesh mesh;
  mesh.vertices.reserve(patches.size() * per);
  auto& atlas = mesh.atlas.emplace();
  atlas.reserve(patches.size() * per);
  mesh.faces.reserve(patches.size() * 2 * (g - 1) * (g - 1));
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
    for (std::size_t i = 0; i < per; ++i) {
      mesh.vertices.push_back({decoded[k](i, 0), decoded[k](i, 1), decoded[k](i, 2)});
      atlas.push_back({static_cast<std::uint32_t>(patches[k]), grid(i, 0), grid(i, 1)});
    }
    for (std::size_t r = 0; r + 1 < g; ++r)
      for (std::size_t c = 0; c + 1 < g; ++c) {
        const auto a = static_cast<std::uint32_t>(base + r * g + c);
        const auto right = a + 1;
        const auto down = static_cast<std::uint32_t>(a + g);
        const auto diag = down + 1;
        mesh.faces.push_back({a, down, diag});
        mesh.faces.push_back({a, diag, right});
      }
  }
  return mesh;
}

/// Decodes the vertices of an icosphere and keeps its faces, so the result is
/// closed whenever the decoder is finite.
inline TriangleMesh mesh_from_sphere(const AtlasModel& model, const LatentCode& x, unsigned subdivisions,
                                     std::size_t batch_size = 4096) {
  if (model.domain() != models::Domain::kSphere) throw InvalidArgument("mesh_from_sphere: square-domain model");
  TriangleMesh mesh = geometry::icosphere(subdivisions);
  Matrix samples(mesh.vertices.size(), 3);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i)
    for (int k = 0; k < 3; ++k) samples(i, k) = mesh.vertices[i][k];
  const Matrix y = detail::decode_batched(model, 0, samples, x, batch_size);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) mesh.vertices[i] = {y(i, 0), y(i, 1), y(i, 2)};
  return mesh;
}

/// Domain samples for `total` points spread evenly over the patches.
struct SampleSet {
  std::vector<Matrix> per_patch;  // P_i×2 (square) or P×3 (sphere)

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& m : per_patch) n += m.rows();
    return n;
  }
  /// (patch, u, v) of every sample in patch-major order; square domain only.
  std::vector<AtlasCoord> coords() const {
    std::vector<AtlasCoord> out;
    for (std::size_t p = 0; p < per_patch.size(); ++p)
      for (std::size_t r = 0; r < per_patch[p].rows(); ++r)
        out.push_back({static_cast<std::uint32_t>(p), per_patch[p](r, 0), per_patch[p](r, 1)});
    return out;
  }
};

/// Regular mode needs total/N to be a perfect square on the square domain.
/// Random mode gives the first total%N patches one extra sample.
inline SampleSet make_samples(const AtlasModel& model, std::size_t total, models::SamplingMode mode,
                              std::uint64_t seed) {
  const std::size_t n = model.n_patches();
  if (total < n) throw InvalidArgument("sample count must be at least the number of patches");
  SampleSet s;
  if (model.domain() == models::Domain::kSphere) {
    s.per_patch.push_back(models::sample_domain(models::Domain::kSphere, total, mode, seed));
    return s;
  }
  if (mode == models::SamplingMode::kRegularGrid) {
    if (total % n != 0) throw InvalidArgument("regular sampling needs the sample count divisible by the patch count");
    const Matrix grid = models::square_grid(models::grid_side(total / n));
    s.per_patch.assign(n, grid);
    return s;
  }
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t count = total / n + (p < total % n ? 1 : 0);
    s.per_patch.push_back(
        models::sample_domain(models::Domain::kSquare, count, mode, splitmix64(seed) ^ splitmix64(p + 1)));
  }
  return s;
}

inline Patches decode_samples(const AtlasModel& model, const LatentCode& x, const SampleSet& samples,
                              std::size_t batch_size = 4096, std::size_t* peak_rows = nullptr) {
  Patches out(samples.per_patch.size());
  for (std::size_t p = 0; p < samples.per_patch.size(); ++p) {
    const Matrix y = detail::decode_batched(model, p, samples.per_patch[p], x, batch_size, peak_rows);
    out[p].resize(y.rows());
    for (std::size_t r = 0; r < y.rows(); ++r) out[p][r] = {y(r, 0), y(r, 1), y(r, 2)};
  }
  return out;
}

struct UpsampleResult {
  Patches points;
  SampleSet samples;
  std::size_t peak_batch_rows = 0;
};

/// Decodes `total` domain samples, at most `batch_size` rows at a time.
inline UpsampleResult upsample_points(const AtlasModel& model, const LatentCode& x, std::size_t total,
                                      models::SamplingMode mode, std::uint64_t seed, std::size_t batch_size = 4096) {
  UpsampleResult r;
  r.samples = make_samples(model, total, mode, seed);
  r.points = decode_samples(model, x, r.samples, batch_size, &r.peak_batch_rows);
  return r;
}

template <typename T>
struct Correspondence {
  Patches reference_points;
  Patches other_points;
  std::vector<T> values;  // index-aligned with the flattened samples
};

/// Decodes the same (patch, u, v) samples for both latents; the value at a
/// sample on the other shape is the value at that sample on the reference.
template <typename T>
Correspondence<T> transfer_correspondence(const AtlasModel& model, const LatentCode& reference,
                                          const LatentCode& other, const SampleSet& samples,
                                          const std::vector<T>& reference_values) {
  if (reference_values.size() != samples.size())
    throw InvalidArgument("transfer_correspondence: " + std::to_string(reference_values.size()) +
                          " values for " + std::to_string(samples.size()) + " samples");
  if (samples.per_patch.size() != model.n_patches())
    throw InvalidArgument("transfer_correspondence: sample set does not cover every patch");
  Correspondence<T> c;
  c.reference_points = decode_samples(model, reference, samples);
  c.other_points = decode_samples(model, other, samples);
  c.values = reference_values;
  return c;
}

}  // namespace atlas::meshing
