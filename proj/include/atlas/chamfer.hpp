#pragma once

// Two-sided Chamfer loss between a set of generated patches and a target
// cloud, backed by an exact KD-tree nearest-neighbour search.
//
//   total = Σ_g min_q |g − q|² + Σ_q min_{patch, sample} |g − q|²
//
// Distances are squared and summed. Nearest-neighbour ties resolve to the
// lowest index; for the second term the index is the patch-major flattened
// sample index, so ties prefer lower patches, then lower samples.

#include <algorithm>
#include <array>
#include <cstddef>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <thread>
#include <vector>

#include "atlas/diffcore.hpp"
#include "atlas/error.hpp"
#include "atlas/geometry.hpp"

namespace atlas::chamfer {

using geometry::Vec3;
using geometry::operator+;
using geometry::operator-;
using geometry::operator*;

struct Neighbor {
  std::size_t index = 0;
  double sq_distance = std::numeric_limits<double>::infinity();
};

/// Exact 3D KD-tree. Immutable after construction, so concurrent queries are safe.
class KdTree3 {
 public:
  static constexpr std::size_t kLeafSize = 16;

  struct Node {
    int axis = -1;  // -1 for leaves
    double split = 0.0;
    std::uint32_t left = 0, right = 0;
    std::uint32_t begin = 0, end = 0;  // leaf range into order()
  };

  explicit KdTree3(std::span<const Vec3> points) {
    if (points.empty()) throw InvalidArgument("kd_build: empty point set");
    order_.resize(points.size());
    std::iota(order_.begin(), order_.end(), std::uint32_t{0});
    nodes_.reserve(2 * points.size() / kLeafSize + 1);
    build(points, 0, static_cast<std::uint32_t>(points.size()));
    points_.resize(points.size());
    for (std::size_t i = 0; i < order_.size(); ++i) points_[i] = points[order_[i]];
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  /// Original point indices in leaf order.
  const std::vector<std::uint32_t>& order() const { return order_; }

  /// Exact nearest neighbour under squared Euclidean distance; ties → lowest index.
  Neighbor nearest(const Vec3& q) const {
    Neighbor best;
    search(0, q, best);
    return best;
  }

 private:
  std::uint32_t build(std::span<const Vec3> pts, std::uint32_t begin, std::uint32_t end) {
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.emplace_back();
    if (end - begin <= kLeafSize) {
      nodes_[id].begin = begin;
      nodes_[id].end = end;
      return id;
    }
    Vec3 lo = pts[order_[begin]], hi = lo;
    for (auto i = begin; i < end; ++i)
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::min(lo[k], pts[order_[i]][k]);
        hi[k] = std::max(hi[k], pts[order_[i]][k]);
      }
    int axis = 0;
    for (int k = 1; k < 3; ++k)
      if (hi[k] - lo[k] > hi[axis] - lo[axis]) axis = k;
    const auto mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                       return pts[a][axis] < pts[b][axis] || (pts[a][axis] == pts[b][axis] && a < b);
                     });
    const double split = pts[order_[mid]][axis];
    const auto left = build(pts, begin, mid);
    const auto right = build(pts, mid, end);
    Node& n = nodes_[id];
    n.axis = axis;
    n.split = split;
    n.left = left;
    n.right = right;
    return id;
  }

  void search(std::uint32_t id, const Vec3& q, Neighbor& best) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (auto i = n.begin; i < n.end; ++i) {
        const double d = geometry::sq_dist(points_[i], q);
        if (d < best.sq_distance || (d == best.sq_distance && order_[i] < best.index)) {
          best.sq_distance = d;
          best.index = order_[i];
        }
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const auto near = diff < 0.0 ? n.left : n.right;
    const auto far = diff < 0.0 ? n.right : n.left;
    search(near, q, best);
    // Left holds coordinates ≤ split and right ≥ split, so |diff| bounds the far side.
    if (diff * diff <= best.sq_distance) search(far, q, best);
  }

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> order_;
  std::vector<Vec3> points_;
};

inline KdTree3 kd_build(std::span<const Vec3> points) { return KdTree3(points); }
inline Neighbor kd_nn(const KdTree3& tree, const Vec3& q) { return tree.nearest(q); }

/// Runs f(i) for i in [0, n), split into contiguous chunks over `threads`.
template <typename F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, n / 256))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t b = t * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&f, b, e] {
      for (std::size_t i = b; i < e; ++i) f(i);
    });
  }
  for (auto& th : pool) th.join();
}

struct Assignment {
  std::size_t patch = 0;
  std::size_t sample = 0;
  friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct ChamferResult {
  double total = 0.0;
  double forward_term = 0.0;   // generated → target
  double backward_term = 0.0;  // target → generated
  std::vector<Assignment> per_target_assignment;
  /// Nearest target of each generated point, patch-major order.
  std::vector<std::size_t> per_generated_nearest;
  std::vector<std::size_t> patch_sizes;
};

/// Generated points as one array per patch.
using Patches = std::vector<std::vector<Vec3>>;

inline ChamferResult chamfer_loss(const Patches& generated, std::span<const Vec3> target, unsigned threads = 1) {
  if (generated.empty()) throw InvalidArgument("chamfer_loss: empty patch list");
  if (target.empty()) throw InvalidArgument("chamfer_loss: empty target");
  std::vector<Vec3> flat;
  ChamferResult r;
  for (const auto& p : generated) {
    if (p.empty()) throw InvalidArgument("chamfer_loss: every patch needs at least one point");
    r.patch_sizes.push_back(p.size());
    flat.insert(flat.end(), p.begin(), p.end());
  }
  const KdTree3 target_tree(target);
  const KdTree3 generated_tree(flat);

  std::vector<double> fwd(flat.size()), bwd(target.size());
  r.per_generated_nearest.resize(flat.size());
  std::vector<std::size_t> nearest_generated(target.size());
  parallel_for(flat.size(), threads, [&](std::size_t i) {
    const auto nb = target_tree.nearest(flat[i]);
    r.per_generated_nearest[i] = nb.index;
    fwd[i] = nb.sq_distance;
  });
  parallel_for(target.size(), threads, [&](std::size_t j) {
    const auto nb = generated_tree.nearest(target[j]);
    nearest_generated[j] = nb.index;
    bwd[j] = nb.sq_distance;
  });
  for (double d : fwd) r.forward_term += d;
  for (double d : bwd) r.backward_term += d;
  r.total = r.forward_term + r.backward_term;

  std::vector<std::size_t> starts(generated.size());
  std::size_t acc = 0;
  for (std::size_t k = 0; k < generated.size(); ++k) {
    starts[k] = acc;
    acc += generated[k].size();
  }
  r.per_target_assignment.resize(target.size());
  for (std::size_t j = 0; j < target.size(); ++j) {
    const auto g = nearest_generated[j];
    const auto patch = static_cast<std::size_t>(std::upper_bound(starts.begin(), starts.end(), g) - starts.begin()) - 1;
    r.per_target_assignment[j] = {patch, g - starts[patch]};
  }
  return r;
}

inline ChamferResult chamfer_loss(const Patches& generated, const geometry::PointCloud& target, unsigned threads = 1) {
  return chamfer_loss(generated, std::span<const Vec3>(target.points), threads);
}

/// Gradient of the loss with respect to every generated point, holding the
/// nearest-neighbour assignments of `result` fixed.
inline Patches chamfer_backward(const ChamferResult& result, const Patches& generated, std::span<const Vec3> target) {
  Patches grad(generated.size());
  std::vector<std::size_t> starts;
  std::size_t flat = 0;
  for (std::size_t k = 0; k < generated.size(); ++k) {
    if (generated[k].size() != result.patch_sizes.at(k))
      throw InvalidArgument("chamfer_backward: generated points do not match the evaluated result");
    starts.push_back(flat);
    grad[k].assign(generated[k].size(), Vec3{0, 0, 0});
    for (std::size_t s = 0; s < generated[k].size(); ++s, ++flat) {
      const Vec3& q = target[result.per_generated_nearest[flat]];
      grad[k][s] = 2.0 * (generated[k][s] - q);
    }
  }
  for (std::size_t j = 0; j < target.size(); ++j) {
    const auto& a = result.per_target_assignment[j];
    auto& g = grad[a.patch][a.sample];
    g = g + 2.0 * (generated[a.patch][a.sample] - target[j]);
  }
  return grad;
}

/// Per-point-mean Chamfer: forward term over the generated count plus
/// backward term over the target count.
inline double mean_chamfer(const ChamferResult& r) {
  std::size_t n = 0;
  for (auto s : r.patch_sizes) n += s;
  return r.forward_term / static_cast<double>(n) +
         r.backward_term / static_cast<double>(r.per_target_assignment.size());
}

/// Tape node evaluating the Chamfer loss. Inputs are the per-patch P_i×3
/// generated matrices; output is the 1×1 total.
class ChamferOp final : public diff::CustomOp {
 public:
  ChamferOp(std::vector<Vec3> target, unsigned threads = 1) : target_(std::move(target)), threads_(threads) {}

  std::string_view name() const override { return "chamfer"; }

  diff::Matrix forward(std::span<const diff::Matrix* const> inputs) override {
    patches_.assign(inputs.size(), {});
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const auto& m = *inputs[k];
      if (m.cols() != 3) throw InvalidArgument("chamfer node: generated patches must have 3 columns");
      patches_[k].resize(m.rows());
      for (std::size_t r = 0; r < m.rows(); ++r) patches_[k][r] = {m(r, 0), m(r, 1), m(r, 2)};
    }
    result_ = chamfer_loss(patches_, target_, threads_);
    return diff::Matrix(1, 1, result_.total);
  }

  void backward(std::span<const diff::Matrix* const>, const diff::Matrix&, const diff::Matrix& d_output,
                std::span<diff::Matrix* const> d_inputs) override {
    const auto grad = chamfer_backward(result_, patches_, target_);
    const double s = d_output(0, 0);
    for (std::size_t k = 0; k < grad.size(); ++k)
      for (std::size_t r = 0; r < grad[k].size(); ++r)
        for (int c = 0; c < 3; ++c) (*d_inputs[k])(r, c) += s * grad[k][r][c];
  }

  const ChamferResult& result() const { return result_; }
  const std::vector<Vec3>& target() const { return target_; }

 private:
  std::vector<Vec3> target_;
  unsigned threads_;
  Patches patches_;
  ChamferResult result_;
};

}  // namespace atlas::chamfer
