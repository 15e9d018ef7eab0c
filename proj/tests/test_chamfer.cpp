#include <gtest/gtest.h>

#include <cmath>

#include "atlas/chamfer.hpp"
#include "atlas/metrics.hpp"
#include "oracles.hpp"

using namespace atlas;
using namespace atlas::chamfer;
using geometry::Vec3;

TEST(KdTree, SinglePointAndTies) {
  std::vector<Vec3> one{{1, 2, 3}};
  const auto t = kd_build(one);
  EXPECT_EQ(kd_nn(t, {0, 0, 0}).index, 0u);

  std::vector<Vec3> two{{0, 0, 0}, {1, 0, 0}};
  const auto t2 = kd_build(two);
  auto nb = kd_nn(t2, {0.4, 0, 0});
  EXPECT_EQ(nb.index, 0u);
  EXPECT_DOUBLE_EQ(nb.sq_distance, 0.16);
  EXPECT_EQ(kd_nn(t2, {1, 0, 0}).sq_distance, 0.0);
  EXPECT_EQ(kd_nn(t2, {0.5, 0, 0}).index, 0u);

  std::vector<Vec3> dup(40, Vec3{0.3, 0.3, 0.3});
  for (std::size_t i = 0; i < 40; i += 2) dup[i] = {static_cast<double>(i), 0, 0};
  const auto t3 = kd_build(dup);
  EXPECT_EQ(kd_nn(t3, {0.3, 0.3, 0.3}).index, 1u);
  EXPECT_THROW(kd_build(std::vector<Vec3>{}), InvalidArgument);
}

TEST(KdTree, MatchesBruteForce) {
  Rng rng(1);
  const auto pts = oracle::random_points(1000, rng);
  const auto tree = kd_build(pts);
  for (int q = 0; q < 100; ++q) {
    const Vec3 p{rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2)};
    std::size_t best = 0;
    for (std::size_t i = 1; i < pts.size(); ++i)
      if (oracle::sq(p, pts[i]) < oracle::sq(p, pts[best])) best = i;
    const auto nb = kd_nn(tree, p);
    EXPECT_EQ(nb.index, best);
    EXPECT_EQ(nb.sq_distance, oracle::sq(p, pts[best]));
  }
}

TEST(Chamfer, Examples) {
  Rng rng(2);
  const auto pts = oracle::random_points(30, rng);
  EXPECT_EQ(chamfer_loss(Patches{pts}, pts).total, 0.0);

  const Patches g{{{0, 0, 0}}};
  const std::vector<Vec3> t{{1, 0, 0}};
  const auto r = chamfer_loss(g, t);
  EXPECT_EQ(r.forward_term, 1.0);
  EXPECT_EQ(r.backward_term, 1.0);
  EXPECT_EQ(r.total, 2.0);
  const auto grad = chamfer_backward(r, g, t);
  EXPECT_EQ(grad[0][0], (Vec3{-4, 0, 0}));
  EXPECT_EQ(chamfer_backward(chamfer_loss(Patches{pts}, pts), Patches{pts}, pts)[0][5], (Vec3{0, 0, 0}));

  EXPECT_THROW(chamfer_loss(Patches{}, t), InvalidArgument);
  EXPECT_THROW(chamfer_loss(Patches{{}}, t), InvalidArgument);
  EXPECT_THROW(chamfer_loss(g, std::vector<Vec3>{}), InvalidArgument);
}

TEST(Chamfer, MatchesBruteForceAcrossPatches) {
  Rng rng(3);
  for (int inst = 0; inst < 20; ++inst) {
    Patches g(1 + rng.below(5));
    for (auto& p : g) p = oracle::random_points(1 + rng.below(40), rng);
    const auto t = oracle::random_points(60, rng);
    const auto r = chamfer_loss(g, t);
    const auto o = oracle::chamfer(g, t);
    EXPECT_NEAR(r.forward_term, o.forward, 1e-12);
    EXPECT_NEAR(r.backward_term, o.backward, 1e-12);
    EXPECT_NEAR(r.total, o.total(), 1e-12);
    EXPECT_EQ(chamfer_loss(g, t, 4).total, r.total);
  }
}

TEST(Chamfer, AssignmentTieGoesToLowerPatch) {
  const Patches g{{{1, 0, 0}}, {{-1, 0, 0}}};
  const std::vector<Vec3> t{{0, 0, 0}};
  const auto r = chamfer_loss(g, t);
  EXPECT_EQ(r.per_target_assignment[0], (Assignment{0, 0}));
}

TEST(Chamfer, BackwardMatchesFiniteDifferences) {
  Rng rng(4);
  int checked = 0;
  for (int inst = 0; inst < 10; ++inst) {
    Patches g{oracle::random_points(20, rng), oracle::random_points(15, rng)};
    const auto t = oracle::random_points(25, rng);
    const auto r = chamfer_loss(g, t);
    // Screen: every assignment must survive a 1e-6 perturbation.
    auto stable = [&](const Patches& q) {
      const auto s = chamfer_loss(q, t);
      return s.per_generated_nearest == r.per_generated_nearest && s.per_target_assignment == r.per_target_assignment;
    };
    const auto grad = chamfer_backward(r, g, t);
    const double h = 1e-6;
    bool ok = true;
    for (std::size_t p = 0; p < g.size() && ok; ++p)
      for (std::size_t s = 0; s < g[p].size() && ok; ++s)
        for (int c = 0; c < 3 && ok; ++c) {
          auto up = g, down = g;
          up[p][s][c] += h;
          down[p][s][c] -= h;
          if (!stable(up) || !stable(down)) {
            ok = false;
            break;
          }
          const double fd = (chamfer_loss(up, t).total - chamfer_loss(down, t).total) / (2 * h);
          EXPECT_LT(std::abs(fd - grad[p][s][c]) / std::max(1e-3, std::abs(fd)), 1e-6);
        }
    checked += ok;
  }
  EXPECT_GT(checked, 5);
}

TEST(Chamfer, CustomOpGradientFlows) {
  diff::ParamStore params;
  const auto slot = params.add("pts", 4, 3);
  Rng rng(6);
  for (double& v : params.values()) v = rng.uniform(-1, 1);
  const auto t = oracle::random_points(7, rng);
  diff::Tape tape;
  tape.custom({tape.param(slot)}, std::make_shared<ChamferOp>(t));
  const double loss = tape.forward(params)(0, 0);
  const auto g = tape.backward(params);
  Patches pts(1);
  for (std::size_t r = 0; r < 4; ++r) pts[0].push_back({params.values()[3 * r], params.values()[3 * r + 1], params.values()[3 * r + 2]});
  EXPECT_NEAR(loss, oracle::chamfer(pts, t).total(), 1e-12);
  const auto ref = chamfer_backward(chamfer_loss(pts, t), pts, t);
  for (std::size_t r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(g.d_values[3 * r + c], ref[0][r][c]);
}

TEST(Chamfer, MeanForm) {
  const auto r = chamfer_loss(Patches{{{0, 0, 0}}}, std::vector<Vec3>{{1, 0, 0}});
  EXPECT_EQ(mean_chamfer(r), 2.0);
  EXPECT_EQ(metrics::eval_cd(Patches{{{0, 0, 0}}}, std::vector<Vec3>{{1, 0, 0}}) * metrics::kCdDisplayScale, 2000.0);
  Rng rng(7);
  const auto a = oracle::random_points(31, rng), b = oracle::random_points(17, rng);
  const auto o = oracle::chamfer(Patches{a}, b);
  EXPECT_NEAR(metrics::eval_cd(a, b), o.forward / 31 + o.backward / 17, 1e-14);
}
