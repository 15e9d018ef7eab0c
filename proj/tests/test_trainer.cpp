#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "atlas/trainer.hpp"
#include "oracles.hpp"

using namespace atlas;
using namespace atlas::trainer;

namespace {

models::EncoderConfig enc() { return {{8, 16}, 8}; }
models::DecoderConfig dec(std::size_t n = 2) { return {n, {16, 8}, models::Domain::kSquare}; }

std::vector<geometry::PointCloud> shapes() {
  std::vector<geometry::PointCloud> out;
  for (auto kind : {geometry::ShapeKind::kSphere, geometry::ShapeKind::kBox}) {
    const auto m = geometry::procedural(geometry::ShapeSpec::of(kind), 3);
    out.push_back(geometry::normalize_to_unit_box(geometry::sample_surface(m, 500, 3)).first);
  }
  return out;
}

TrainConfig small_cfg(std::uint64_t seed = 1) {
  TrainConfig c;
  c.steps = 30;
  c.shapes_per_step = 2;
  c.points_per_step = 50;  // 25 per patch
  c.target_points = 60;
  c.encoder_points = 40;
  c.eval_points = 200;
  c.seed = seed;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / "atlas_trainer_test" / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST(DrawSubset, DistinctAndDeterministic) {
  Rng a(5), b(5);
  const auto s = draw_subset(100, 30, a);
  EXPECT_EQ(s, draw_subset(100, 30, b));
  EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 30u);
  Rng c(1);
  const auto all = draw_subset(5, 9, c);  // capped at n
  EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), 5u);
}

TEST(Settings, ApplyAndRejectUnknown) {
  TrainConfig c;
  apply_setting(c, "learning_rate", "0.01");
  apply_setting(c, "sampling", "random");
  apply_setting(c, "train_encoder", "false");
  EXPECT_EQ(c.adam.rate, 0.01);
  EXPECT_EQ(c.sampling, models::SamplingMode::kUniformRandom);
  EXPECT_FALSE(c.train_encoder);
  try {
    apply_setting(c, "learning_rat", "1");
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rat"), std::string::npos);
  }
  EXPECT_THROW(apply_setting(c, "steps", "many"), InvalidArgument);
}

TEST(Trainer, Preconditions) {
  models::AtlasModel m(enc(), dec(3), 1);
  auto cfg = small_cfg();
  EXPECT_THROW(Trainer(m, shapes(), cfg), InvalidArgument);  // 50 not divisible by 3
  models::AtlasModel m2(enc(), dec(2), 1);
  cfg.points_per_step = 48;  // 24 per patch, not a square
  EXPECT_THROW(Trainer(m2, shapes(), cfg), InvalidArgument);
  cfg.sampling = models::SamplingMode::kUniformRandom;
  EXPECT_NO_THROW(Trainer(m2, shapes(), cfg));
  auto big = shapes();
  big[0].points[0] = {2.0, 0.0, 0.0};
  EXPECT_THROW(Trainer(m2, big, cfg), InvalidArgument);
  EXPECT_THROW(Trainer(m2, {}, cfg), InvalidArgument);
}

TEST(Trainer, ZeroStepsLeavesParameters) {
  models::AtlasModel m(enc(), dec(), 2);
  const auto before = m.params();
  auto cfg = small_cfg();
  cfg.steps = 0;
  const auto rep = train_autoencoder(shapes(), m, cfg);
  EXPECT_EQ(m.params(), before);
  EXPECT_TRUE(rep.trace.empty());
  EXPECT_TRUE(std::isfinite(rep.initial_loss));
  EXPECT_GT(rep.initial_loss, 0.0);
}

TEST(Trainer, LossDecreases) {
  models::AtlasModel m(enc(), dec(), 3);
  auto cfg = small_cfg();
  cfg.steps = 100;
  cfg.adam.rate = 3e-3;
  const auto rep = train_autoencoder(shapes(), m, cfg);
  ASSERT_EQ(rep.trace.size(), 100u);
  double tail = rep.trace.back().loss;
  for (std::size_t i = 90; i < 100; ++i) {
    EXPECT_TRUE(std::isfinite(rep.trace[i].loss));
    tail = std::min(tail, rep.trace[i].loss);
  }
  EXPECT_LT(tail, rep.trace.front().loss);
  EXPECT_NEAR(rep.trace[5].loss, rep.trace[5].forward_term + rep.trace[5].backward_term, 1e-9);
  EXPECT_TRUE(std::isfinite(rep.final_eval_cd));
}

TEST(Trainer, BitwiseDeterministicIncludingThreads) {
  auto run_once = [](unsigned threads) {
    models::AtlasModel m(enc(), dec(), 4);
    auto cfg = small_cfg(9);
    cfg.threads = threads;
    const auto rep = train_autoencoder(shapes(), m, cfg);
    return std::make_pair(m.params(), rep.trace.back().loss);
  };
  const auto a = run_once(1), b = run_once(1), c = run_once(3);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first, c.first);
}

TEST(Trainer, ResumeEqualsContinuous) {
  const auto dir = temp_dir("resume");
  auto cfg = small_cfg(5);
  models::AtlasModel cont(enc(), dec(), 6);
  Trainer a(cont, shapes(), cfg);
  for (int i = 0; i < 7; ++i) a.step();
  a.save_checkpoint(dir / "s7.ckpt");
  a.step();

  models::AtlasModel resumed(enc(), dec(), 6);
  Trainer b(resumed, shapes(), cfg);
  b.load_checkpoint(dir / "s7.ckpt");
  EXPECT_EQ(b.steps_done(), 7u);
  b.step();
  EXPECT_EQ(cont.params(), resumed.params());

  const auto loaded = models::load_model(dir / "s7.ckpt");
  EXPECT_EQ(loaded.metadata["step"], 7);
  EXPECT_EQ(loaded.metadata["seed"], 5);
}

TEST(Trainer, PeriodicCheckpoints) {
  const auto dir = temp_dir("periodic");
  auto cfg = small_cfg();
  cfg.steps = 10;
  cfg.checkpoint_every = 4;
  cfg.checkpoint_dir = dir;
  models::AtlasModel m(enc(), dec(), 1);
  const auto rep = train_autoencoder(shapes(), m, cfg);
  EXPECT_TRUE(std::filesystem::exists(dir / "step_4.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "step_8.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir / "step_10.ckpt"));
  EXPECT_EQ(rep.checkpoint_path, (dir / "step_8.ckpt").string());
  const auto log = format_log(rep.trace);
  EXPECT_EQ(log.substr(0, log.find('\n')), "step,loss,forward_term,backward_term,wallclock_ms");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 11);
}

TEST(Trainer, NonFiniteLossAbortsWithLastGood) {
  const auto dir = temp_dir("nan");
  models::AtlasModel m(enc(), dec(), 1);
  auto cfg = small_cfg();
  cfg.checkpoint_dir = dir;
  Trainer t(m, shapes(), cfg);
  t.step();
  m.params().values()[m.params().slot(m.decoder(1).w_domain).offset] = std::nan("");
  try {
    t.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.step(), 1u);
    EXPECT_EQ(e.last_good_checkpoint(), (dir / "last_good.ckpt").string());
    EXPECT_TRUE(std::filesystem::exists(e.last_good_checkpoint()));
  }
  EXPECT_EQ(t.steps_done(), 1u);
}

TEST(Trainer, FrozenEncoderKeepsEncoderWeights) {
  models::AtlasModel m(enc(), dec(), 2);
  const auto before = m.params();
  auto cfg = small_cfg();
  cfg.train_encoder = false;
  cfg.steps = 5;
  train_autoencoder(shapes(), m, cfg);
  for (const auto& s : m.params().layout()) {
    const auto a = before.view(before.find(s.name));
    const auto b = m.params().view(m.params().find(s.name));
    const bool same = std::equal(a.begin(), a.end(), b.begin());
    EXPECT_EQ(same, s.name.starts_with("encoder")) << s.name;
  }
}

TEST(Trainer, WeightDecayAddsPenaltyAndGradient) {
  models::AtlasModel m(enc(), dec(), 2);
  auto cfg = small_cfg();
  Trainer plain(m, shapes(), cfg);
  cfg.weight_decay = 0.01;
  Trainer decayed(m, shapes(), cfg);
  const auto a = plain.evaluate(0, true), b = decayed.evaluate(0, true);
  double sq = 0.0;
  for (double v : m.params().values()) sq += v * v;
  EXPECT_NEAR(b.loss - a.loss, 0.01 * sq, 1e-9);
  for (std::size_t k = 0; k < m.params().size(); ++k)
    EXPECT_NEAR(b.grad.d_values[k] - a.grad.d_values[k], 0.02 * m.params().values()[k], 1e-12);
}
