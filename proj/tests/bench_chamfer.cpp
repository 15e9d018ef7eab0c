// KD-tree Chamfer against the double loop. The brute-force time at the full
// size is extrapolated from a 10k x 10k run (it scales with the product).

#include <chrono>
#include <cstdio>

#include "atlas/chamfer.hpp"
#include "oracles.hpp"

using namespace atlas;

int main() {
  Rng rng(1);
  const std::size_t n = 100000, small = 10000;
  const auto gen = oracle::random_points(n, rng), target = oracle::random_points(n, rng);

  auto t0 = std::chrono::steady_clock::now();
  const auto r = chamfer::chamfer_loss(chamfer::Patches{gen}, target);
  const double kd = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::vector<std::vector<oracle::Vec3>> gen_small{{gen.begin(), gen.begin() + small}};
  const std::vector<oracle::Vec3> target_small(target.begin(), target.begin() + small);
  t0 = std::chrono::steady_clock::now();
  const auto b = oracle::chamfer(gen_small, target_small);
  const double brute = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double brute_full = brute * static_cast<double>(n) * n / (static_cast<double>(small) * small);

  const auto check = chamfer::chamfer_loss(chamfer::Patches{gen_small[0]}, target_small);
  std::printf("kd %zu x %zu: %.2f s (total %.6g)\n", n, n, kd, r.total);
  std::printf("brute %zu x %zu: %.2f s, extrapolated to full size: %.0f s, speedup %.0fx\n", small, small, brute,
              brute_full, brute_full / kd);
  std::printf("agreement on the small case: |diff| %.2e\n", std::abs(check.total - b.total()));
  return std::abs(check.total - b.total()) <= 1e-9 ? 0 : 1;
}
