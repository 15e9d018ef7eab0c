#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "atlas/chamfer.hpp"
#include "atlas/models.hpp"
#include "oracles.hpp"

using namespace atlas;
using namespace atlas::models;

namespace {

EncoderConfig small_enc() { return {{8, 16}, 6}; }
DecoderConfig small_dec(std::size_t n = 2, Domain d = Domain::kSquare) { return {n, {12, 8}, d}; }

geometry::PointCloud random_cloud(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  geometry::PointCloud c;
  c.points = oracle::random_points(n, rng);
  return c;
}

void zero_decoders(AtlasModel& m) {
  for (const auto& s : m.params().layout())
    if (s.name.starts_with("decoder")) std::fill_n(m.params().values().begin() + static_cast<long>(s.offset), s.size(), 0.0);
}

}  // namespace

TEST(Encoder, PermutationAndDuplicationInvariant) {
  AtlasModel m(small_enc(), small_dec(), 1);
  auto c = random_cloud(50, 2);
  const auto x = encode(m, c);
  auto perm = c;
  Rng rng(3);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm.points[i - 1], perm.points[rng.below(i)]);
  EXPECT_EQ(encode(m, perm), x);
  auto dup = c;
  dup.points.insert(dup.points.end(), c.points.begin(), c.points.end());
  EXPECT_EQ(encode(m, dup), x);
  geometry::PointCloud one{{c.points[0]}, std::nullopt}, many;
  many.points.assign(100, c.points[0]);
  EXPECT_EQ(encode(m, one), encode(m, many));
  EXPECT_THROW(encode(m, geometry::PointCloud{}), InvalidArgument);
}

TEST(Decoder, ZeroWeightsGiveOrigin) {
  AtlasModel m(small_enc(), small_dec(), 1);
  zero_decoders(m);
  const LatentCode x{std::vector<double>(6, 0.7)};
  const auto y = decode_patch(m, 1, square_grid(3), x);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);

  AtlasModel s(small_enc(), small_dec(1, Domain::kSphere), 1);
  zero_decoders(s);
  const auto z = decode_sphere(s, fibonacci_sphere(10), x);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Decoder, DeterministicAndValidated) {
  AtlasModel m(small_enc(), small_dec(), 4);
  const auto x = encode(m, random_cloud(20, 5));
  const auto g = square_grid(5);
  EXPECT_EQ(decode_patch(m, 0, g, x), decode_patch(m, 0, g, x));
  EXPECT_NE(decode_patch(m, 0, g, x), decode_patch(m, 1, g, x));
  EXPECT_THROW(decode_patch(m, 2, g, x), InvalidArgument);
  EXPECT_THROW(decode_patch(m, 0, Matrix(1, 2, 1.5), x), InvalidArgument);
  EXPECT_THROW(decode_patch(m, 0, Matrix(1, 3, 0.5), x), InvalidArgument);
  EXPECT_THROW(decode_patch(m, 0, g, LatentCode{{1.0}}), InvalidArgument);
  EXPECT_THROW(decode_sphere(m, fibonacci_sphere(4), x), InvalidArgument);
  AtlasModel s(small_enc(), small_dec(1, Domain::kSphere), 1);
  EXPECT_THROW(decode_sphere(s, Matrix(1, 3, 0.5), x), InvalidArgument);
}

// Lipschitz bound measured on a coarse grid, then asserted on a finer one.
TEST(Decoder, ContinuityProbe) {
  AtlasModel m(small_enc(), small_dec(1), 6);
  const auto x = encode(m, random_cloud(20, 7));
  auto max_ratio = [&](std::size_t g) {
    const auto s = square_grid(g);
    const auto y = decode_patch(m, 0, s, x);
    const double step = 1.0 / static_cast<double>(g - 1);
    double L = 0.0;
    for (std::size_t r = 0; r < g; ++r)
      for (std::size_t c = 0; c + 1 < g; ++c) {
        const auto i = r * g + c;
        for (auto j : {i + 1, i + (r + 1 < g ? g : 0)}) {
          if (j == i) continue;
          L = std::max(L, std::sqrt(oracle::sq({y(i, 0), y(i, 1), y(i, 2)}, {y(j, 0), y(j, 1), y(j, 2)})) / step);
        }
      }
    return L;
  };
  const double L = 2.0 * max_ratio(21);
  EXPECT_GT(L, 0.0);
  EXPECT_LE(max_ratio(81), L);
}

TEST(Domain, Samples) {
  const auto g2 = sample_domain(Domain::kSquare, 4, SamplingMode::kRegularGrid, 0);
  std::set<std::pair<double, double>> pts;
  for (std::size_t r = 0; r < 4; ++r) pts.insert({g2(r, 0), g2(r, 1)});
  EXPECT_EQ(pts, (std::set<std::pair<double, double>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}}));
  const auto g3 = sample_domain(Domain::kSquare, 9, SamplingMode::kRegularGrid, 0);
  for (std::size_t r = 0; r < 9; ++r)
    for (int k = 0; k < 2; ++k) EXPECT_EQ(std::fmod(g3(r, k), 0.5), 0.0);
  EXPECT_THROW(sample_domain(Domain::kSquare, 10, SamplingMode::kRegularGrid, 0), InvalidArgument);
  const auto f = sample_domain(Domain::kSphere, 100, SamplingMode::kRegularGrid, 0);
  const auto u = sample_domain(Domain::kSphere, 100, SamplingMode::kUniformRandom, 3);
  for (std::size_t r = 0; r < 100; ++r) {
    EXPECT_NEAR(std::hypot(f(r, 0), f(r, 1), f(r, 2)), 1.0, 1e-12);
    EXPECT_NEAR(std::hypot(u(r, 0), u(r, 1), u(r, 2)), 1.0, 1e-12);
  }
  const auto a = sample_domain(Domain::kSquare, 50, SamplingMode::kUniformRandom, 9);
  EXPECT_EQ(a, sample_domain(Domain::kSquare, 50, SamplingMode::kUniformRandom, 9));
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Latent, Interpolation) {
  const LatentCode a{{2, 0}}, b{{0, 2}};
  EXPECT_EQ(interpolate_latent(a, b, 0.0), a);
  EXPECT_EQ(interpolate_latent(a, b, 1.0), b);
  EXPECT_EQ(interpolate_latent(a, b, 0.5), (LatentCode{{1, 1}}));
  EXPECT_THROW(interpolate_latent(a, b, 1.5), InvalidArgument);
  EXPECT_THROW(interpolate_latent(a, LatentCode{{1}}, 0.5), InvalidArgument);
}

TEST(Baseline, ZeroWeightsAndParameterBudget) {
  PointsBaseline base({16, {8, 8}, 10}, 1);
  for (double& v : base.params().values()) v = 0.0;
  const auto y = points_baseline_decode(base, LatentCode{std::vector<double>(16, 0.3)});
  EXPECT_EQ(y.rows(), 10u);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);

  PointsBaseline full(BaselineConfig{}, 2);
  const auto x = LatentCode{std::vector<double>(128, 0.1)};
  EXPECT_EQ(points_baseline_decode(full, x), points_baseline_decode(full, x));
  AtlasModel atlas25({{32, 64, 128}, 128}, {25, {128, 64, 32}, Domain::kSquare}, 3);
  const double ratio = static_cast<double>(full.params().size()) / static_cast<double>(atlas25.decoder_parameter_count());
  EXPECT_GT(ratio, 0.5);
  EXPECT_LT(ratio, 2.0);
}

TEST(Config, Validation) {
  EXPECT_THROW(AtlasModel(small_enc(), {0, {8}, Domain::kSquare}, 1), InvalidArgument);
  EXPECT_THROW(AtlasModel(small_enc(), {1, {}, Domain::kSquare}, 1), InvalidArgument);
  EXPECT_THROW(AtlasModel({{8}, 0}, small_dec(), 1), InvalidArgument);
  EXPECT_THROW(AtlasModel(small_enc(), {2, {8}, Domain::kSphere}, 1), InvalidArgument);
  EXPECT_THROW(parse_domain("cube"), InvalidArgument);
  EXPECT_THROW(parse_sampling("grid-ish"), InvalidArgument);
}

TEST(Checkpoint, ModelRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "atlas_models_test";
  std::filesystem::create_directories(dir);
  AtlasModel m(small_enc(), small_dec(3), 8);
  save_model(m, dir / "m.ckpt", {{"note", "x"}});
  const auto l = load_model(dir / "m.ckpt");
  EXPECT_EQ(l.model.params(), m.params());
  EXPECT_EQ(l.model.n_patches(), 3u);
  EXPECT_EQ(l.metadata["note"], "x");

  AtlasModel other(small_enc(), small_dec(2), 8);
  diff::save_params(dir / "mismatch.ckpt", other.params());
  std::filesystem::copy_file(sidecar_path(dir / "m.ckpt"), sidecar_path(dir / "mismatch.ckpt"),
                             std::filesystem::copy_options::overwrite_existing);
  EXPECT_THROW(load_model(dir / "mismatch.ckpt"), IoError);

  {
    std::fstream f(dir / "m.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(load_model(dir / "m.ckpt"), IoError);
  EXPECT_THROW(load_model(dir / "missing.ckpt"), IoError);
}

// chamfer∘decoder∘encoder gradient, kink-screened.
TEST(Gradient, EndToEndMatchesFiniteDifferences) {
  AtlasModel m({{6}, 4}, {2, {5, 4}, Domain::kSquare}, 12);
  const auto cloud = random_cloud(12, 13);
  const auto target = random_cloud(10, 14).points;
  const auto samples = square_grid(2);
  auto build = [&](diff::Tape& t) {
    const auto latent = build_encoder(t, m, t.constant(cloud_matrix(cloud)));
    std::vector<diff::NodeId> patches;
    for (std::size_t p = 0; p < 2; ++p) patches.push_back(build_decoder(t, m, p, t.constant(samples), latent));
    t.custom(patches, std::make_shared<chamfer::ChamferOp>(target));
  };
  diff::Tape t;
  build(t);
  t.forward(m.params());
  const auto g = t.backward(m.params());
  const auto fd = oracle::central_diff(
      [&](const std::vector<double>& v) {
        diff::ParamStore q = m.params();
        q.values() = v;
        diff::Tape s;
        build(s);
        return s.forward(q)(0, 0);
      },
      m.params().values(), 1e-6);
  std::size_t compared = 0;
  for (std::size_t k = 0; k < fd.size(); ++k) {
    if (std::abs(g.d_values[k]) < 1e-8 && std::abs(fd[k]) < 1e-8) continue;
    EXPECT_LT(std::abs(g.d_values[k] - fd[k]) / std::max(1e-3, std::abs(fd[k])), 1e-5) << k;
    ++compared;
  }
  EXPECT_GT(compared, fd.size() / 3);
}
