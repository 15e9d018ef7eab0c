#include <gtest/gtest.h>

#include <cmath>

#include "atlas/meshing.hpp"
#include "oracles.hpp"

using namespace atlas;
using namespace atlas::meshing;
using models::Domain;

namespace {

models::AtlasModel model(std::size_t n, std::uint64_t seed = 1, Domain d = Domain::kSquare) {
  return models::AtlasModel({{8}, 4}, {n, {8, 6}, d}, seed);
}

void set_slot(models::AtlasModel& m, std::size_t slot, const std::vector<double>& v) {
  auto view = m.params().view(slot);
  ASSERT_EQ(view.size(), v.size());
  std::copy(v.begin(), v.end(), view.begin());
}

const LatentCode kX{{0.3, -0.2, 0.5, 0.1}};

}  // namespace

TEST(GridMesh, Counts) {
  const std::vector<std::pair<std::size_t, std::size_t>> cases{{1, 2}, {25, 10}, {3, 7}};
  for (auto [n, g] : cases) {
    const auto m = model(n);
    const auto mesh = mesh_from_patches(m, kX, {g});
    EXPECT_EQ(mesh.vertices.size(), n * g * g);
    EXPECT_EQ(mesh.faces.size(), 2 * n * (g - 1) * (g - 1));
    EXPECT_EQ(geometry::connected_components(mesh), n);
    EXPECT_NO_THROW(geometry::validate(mesh));
    ASSERT_TRUE(mesh.atlas);
    EXPECT_EQ(mesh.atlas->back().patch, n - 1);
  }
  const auto m = model(4);
  const auto two = mesh_from_patches(m, kX, {5, {1, 3}});
  EXPECT_EQ(two.vertices.size(), 50u);
  EXPECT_EQ(two.atlas->front().patch, 1u);
  EXPECT_THROW(mesh_from_patches(m, kX, {1}), InvalidArgument);
  EXPECT_THROW(mesh_from_patches(m, kX, {4, {4}}), InvalidArgument);
}

TEST(GridMesh, ConstructedDecoderGivesThePlanarGrid) {
  models::AtlasModel m({{4}, 2}, {1, {2}, Domain::kSquare}, 1);
  for (double& v : m.params().values()) v = 0.0;
  const auto& s = m.decoder(0);
  set_slot(m, s.w_domain, {1, 0, 0, 1});
  set_slot(m, s.layers[0].weight, {1, 0, 0, 0, 1, 0});
  const auto mesh = mesh_from_patches(m, LatentCode{{0.4, -1.0}}, {6});
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& a = (*mesh.atlas)[i];
    EXPECT_NEAR(mesh.vertices[i][0], std::tanh(a.u), 1e-12);
    EXPECT_NEAR(mesh.vertices[i][1], std::tanh(a.v), 1e-12);
    EXPECT_EQ(mesh.vertices[i][2], 0.0);
  }
}

TEST(GridMesh, BatchSizeAndThreadsDoNotChangeOutput) {
  const auto m = model(3, 2);
  const auto a = mesh_from_patches(m, kX, {9, {}, 4096, 1});
  const auto b = mesh_from_patches(m, kX, {9, {}, 7, 3});
  EXPECT_EQ(a.vertices, b.vertices);
  EXPECT_EQ(a.faces, b.faces);
}

TEST(SphereMesh, WatertightAndPassThrough) {
  const auto m = model(1, 3, Domain::kSphere);
  const auto mesh = mesh_from_sphere(m, kX, 3);
  EXPECT_TRUE(geometry::is_watertight(mesh));
  EXPECT_EQ(geometry::euler_characteristic(mesh), 2);
  EXPECT_THROW(mesh_from_sphere(model(1), kX, 2), InvalidArgument);
  EXPECT_THROW(mesh_from_patches(m, kX, {4}), InvalidArgument);

  // Hidden layer holds relu(p) and relu(−p); the output layer recombines them.
  models::AtlasModel id({{4}, 2}, {1, {6}, Domain::kSphere}, 1);
  for (double& v : id.params().values()) v = 0.0;
  const auto& s = id.decoder(0);
  set_slot(id, s.w_domain, {1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1});
  set_slot(id, s.layers[0].weight, {1, 0, 0, 0, 1, 0, 0, 0, 1, -1, 0, 0, 0, -1, 0, 0, 0, -1});
  const auto out = mesh_from_sphere(id, LatentCode{{0, 0}}, 2);
  const auto ico = geometry::icosphere(2);
  ASSERT_EQ(out.vertices.size(), ico.vertices.size());
  for (std::size_t i = 0; i < ico.vertices.size(); ++i)
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(out.vertices[i][k], std::tanh(ico.vertices[i][k]), 1e-12);
  EXPECT_EQ(out.faces, ico.faces);
}

TEST(Upsample, CountsRefinementAndBudget) {
  const auto m = model(4, 5);
  const auto r = upsample_points(m, kX, 49 * 4, models::SamplingMode::kRegularGrid, 0);
  for (const auto& p : r.points) EXPECT_EQ(p.size(), 49u);

  const auto g3 = decode_samples(m, kX, SampleSet{{models::square_grid(3)}});
  const auto g5 = decode_samples(m, kX, SampleSet{{models::square_grid(5)}});
  EXPECT_EQ(g3[0][0], g5[0][0]);    // (0,0)
  EXPECT_EQ(g3[0][4], g5[0][12]);   // centre
  EXPECT_EQ(g3[0][8], g5[0][24]);   // (1,1)

  const auto big = upsample_points(model(25, 6), kX, 122500, models::SamplingMode::kRegularGrid, 0, 4096);
  std::size_t total = 0;
  for (const auto& p : big.points) total += p.size();
  EXPECT_EQ(total, 122500u);
  EXPECT_LE(big.peak_batch_rows, 4096u);

  const auto rnd = make_samples(m, 10, models::SamplingMode::kUniformRandom, 3);
  EXPECT_EQ(rnd.per_patch[0].rows(), 3u);
  EXPECT_EQ(rnd.per_patch[3].rows(), 2u);
  EXPECT_THROW(make_samples(m, 3, models::SamplingMode::kUniformRandom, 3), InvalidArgument);
  EXPECT_THROW(make_samples(m, 12, models::SamplingMode::kRegularGrid, 3), InvalidArgument);
}

TEST(Correspondence, Transfer) {
  const auto m = model(2, 7);
  SampleSet s{{models::square_grid(4), models::square_grid(4)}};
  const auto coords = s.coords();
  std::vector<double> u;
  for (const auto& c : coords) u.push_back(c.u);
  const LatentCode other{{-0.5, 0.9, 0.0, 0.2}};

  const auto same = transfer_correspondence(m, kX, kX, s, u);
  EXPECT_EQ(same.reference_points, same.other_points);

  const auto t = transfer_correspondence(m, kX, other, s, std::vector<int>(coords.size(), 3));
  for (int v : t.values) EXPECT_EQ(v, 3);

  const auto byu = transfer_correspondence(m, kX, other, s, u);
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (std::size_t j = 0; j < coords.size(); ++j)
      if (coords[i].patch == coords[j].patch && coords[i].v == coords[j].v && coords[i].u < coords[j].u) {
        EXPECT_LT(byu.values[i], byu.values[j]);
        ++pairs;
      }
  EXPECT_GT(pairs, 0u);
  EXPECT_THROW(transfer_correspondence(m, kX, other, s, std::vector<double>(3)), InvalidArgument);
}
