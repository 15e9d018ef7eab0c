#pragma once

// Optimization of the atlas objective: Adam on the summed Chamfer loss plus an
// optional λ‖θ‖² weight penalty. Domain samples and target subsets are redrawn
// every step from a stream keyed by (seed, step), so a run is reproducible and
// can be resumed from any checkpoint with bit-identical continuation.

#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "atlas/chamfer.hpp"
#include "atlas/checkpoint.hpp"
#include "atlas/config.hpp"
#include "atlas/diffcore.hpp"
#include "atlas/error.hpp"
#include "atlas/geometry.hpp"
#include "atlas/meshing.hpp"
#include "atlas/models.hpp"
#include "atlas/rng.hpp"
#include <nlohmann/json.hpp>

namespace atlas::trainer {

using geometry::PointCloud;
using geometry::Vec3;
using models::AtlasModel;
using models::LatentCode;
using models::SamplingMode;

struct AdamConfig {
  double rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t shapes_per_step = 1;
  std::size_t points_per_step = 2500;  // generated points, split evenly over the patches
  std::size_t target_points = 2500;    // target subset drawn per shape and step
  std::size_t encoder_points = 1024;   // encoder input subset per shape and step
  AdamConfig adam{};
  double weight_decay = 0.0;  // λ
  SamplingMode sampling = SamplingMode::kRegularGrid;
  std::uint64_t seed = 0;
  bool train_encoder = true;  // false: each shape keeps the latent it had at the start
  std::size_t eval_points = 2500;
  unsigned threads = 1;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::filesystem::path checkpoint_dir{};
};

/// Applies one `key = value` setting; throws naming the key if unknown.
inline void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
  using namespace config;
  if (key == "steps") cfg.steps = as_uint(key, value);
  else if (key == "shapes_per_step") cfg.shapes_per_step = as_uint(key, value);
  else if (key == "points_per_step") cfg.points_per_step = as_uint(key, value);
  else if (key == "target_points") cfg.target_points = as_uint(key, value);
  else if (key == "encoder_points") cfg.encoder_points = as_uint(key, value);
  else if (key == "learning_rate") cfg.adam.rate = as_double(key, value);
  else if (key == "beta1") cfg.adam.beta1 = as_double(key, value);
  else if (key == "beta2") cfg.adam.beta2 = as_double(key, value);
  else if (key == "adam_eps") cfg.adam.eps = as_double(key, value);
  else if (key == "weight_decay") cfg.weight_decay = as_double(key, value);
  else if (key == "sampling") cfg.sampling = models::parse_sampling(value);
  else if (key == "seed") cfg.seed = as_uint(key, value);
  else if (key == "train_encoder") cfg.train_encoder = as_bool(key, value);
  else if (key == "eval_points") cfg.eval_points = as_uint(key, value);
  else if (key == "threads") cfg.threads = static_cast<unsigned>(as_uint(key, value));
  else if (key == "checkpoint_every") cfg.checkpoint_every = as_uint(key, value);
  else if (key == "checkpoint_dir") cfg.checkpoint_dir = value;
  else throw InvalidArgument("unknown config key '" + key + "'");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"shapes_per_step", c.shapes_per_step},
          {"points_per_step", c.points_per_step},
          {"target_points", c.target_points},
          {"encoder_points", c.encoder_points},
          {"learning_rate", c.adam.rate},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"weight_decay", c.weight_decay},
          {"sampling", models::sampling_name(c.sampling)},
          {"seed", c.seed},
          {"train_encoder", c.train_encoder},
          {"eval_points", c.eval_points}};
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;  // Chamfer sum plus penalty
  double forward_term = 0.0;
  double backward_term = 0.0;
  double wallclock_ms = 0.0;
};

struct TrainReport {
  std::vector<StepRecord> trace;
  double initial_loss = 0.0;
  double wall_ms = 0.0;
  double final_eval_cd = 0.0;  // per-point mean, averaged over shapes
  std::string checkpoint_path;
  nlohmann::json config;
};

/// `step, loss, forward_term, backward_term, wallclock_ms` per line.
inline std::string format_log(const std::vector<StepRecord>& trace) {
  std::string out = "step,loss,forward_term,backward_term,wallclock_ms\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.3f\n", r.step, r.loss, r.forward_term, r.backward_term,
                  r.wallclock_ms);
    out += buf;
  }
  return out;
}

/// Indices of a random subset of size min(k, n), in draw order.
inline std::vector<std::size_t> draw_subset(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k >= n) return idx;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

inline constexpr std::uint64_t kEvalStream = 0xe7a1'0000'0000'0001ULL;

/// Latent of a shape from a fixed random subset of `encoder_points` points;
/// the subset depends only on (seed, index).
inline LatentCode shape_latent(const AtlasModel& model, const PointCloud& shape, std::size_t encoder_points,
                               std::uint64_t seed, std::size_t index) {
  Rng rng = Rng::stream(seed, kEvalStream + index);
  PointCloud sub;
  for (auto i : draw_subset(shape.size(), encoder_points, rng)) sub.points.push_back(shape.points[i]);
  return models::encode(model, sub);
}

/// Evaluation samples: the regular layout uses the largest per-patch grid
/// with at most eval_points/N points (at least 2×2); sphere uses a Fibonacci
/// lattice of exactly eval_points.
inline meshing::SampleSet eval_samples(const AtlasModel& model, std::size_t eval_points, SamplingMode mode,
                                       std::uint64_t seed) {
  if (model.domain() == models::Domain::kSquare && mode == SamplingMode::kRegularGrid) {
    auto g = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(eval_points / model.n_patches()))));
    g = std::max<std::size_t>(g, 2);
    return meshing::make_samples(model, model.n_patches() * g * g, mode, seed);
  }
  return meshing::make_samples(model, std::max(eval_points, model.n_patches()), mode, seed);
}

/// Per-point-mean Chamfer between decoded eval samples and the full cloud.
inline double eval_cd(const AtlasModel& model, const LatentCode& x, const PointCloud& target, std::size_t eval_points,
                      SamplingMode mode, std::uint64_t seed, unsigned threads = 1) {
  const auto samples = eval_samples(model, eval_points, mode, splitmix64(seed ^ kEvalStream));
  const auto points = meshing::decode_samples(model, x, samples);
  return chamfer::mean_chamfer(chamfer::chamfer_loss(points, target, threads));
}

class Trainer {
 public:
  Trainer(AtlasModel& model, std::vector<PointCloud> shapes, TrainConfig cfg)
      : model_(model), shapes_(std::move(shapes)), cfg_(std::move(cfg)) {
    if (shapes_.empty()) throw InvalidArgument("trainer: no training shapes");
    for (const auto& s : shapes_) {
      if (s.empty()) throw InvalidArgument("trainer: empty training shape");
      for (const auto& p : s.points)
        for (double c : p)
          if (!(std::abs(c) <= 1.0)) throw InvalidArgument("trainer: shapes must be normalized to the unit box");
    }
    const auto n = model_.n_patches();
    if (cfg_.points_per_step % n != 0)
      throw InvalidArgument("trainer: points_per_step must be divisible by the number of patches");
    if (cfg_.sampling == SamplingMode::kRegularGrid && model_.domain() == models::Domain::kSquare)
      models::grid_side(cfg_.points_per_step / n);
    if (cfg_.shapes_per_step == 0 || cfg_.target_points == 0 || cfg_.encoder_points == 0)
      throw InvalidArgument("trainer: batch sizes must be positive");
    m_.assign(model_.params().size(), 0.0);
    v_.assign(model_.params().size(), 0.0);
    for (std::size_t i = 0; i < shapes_.size(); ++i) frozen_.push_back(eval_latent(i));
    trainable_.assign(model_.params().size(), cfg_.train_encoder);
    for (const auto& s : model_.params().layout())
      if (s.name.starts_with("decoder"))
        std::fill(trainable_.begin() + static_cast<long>(s.offset),
                  trainable_.begin() + static_cast<long>(s.offset + s.size()), true);
  }

  std::size_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  /// Latent used for evaluation: the frozen latent, or the encoding of a
  /// fixed subset of the shape.
  LatentCode eval_latent(std::size_t shape) const {
    if (!cfg_.train_encoder && shape < frozen_.size()) return frozen_[shape];
    return shape_latent(model_, shapes_.at(shape), cfg_.encoder_points, cfg_.seed, shape);
  }

  /// Loss (Chamfer sum + penalty) and parameter gradient at the current
  /// parameters for the given step's draws.
  struct Evaluation {
    double loss = 0.0, forward_term = 0.0, backward_term = 0.0;
    diff::Grad grad;
  };

  Evaluation evaluate(std::size_t step, bool with_grad) const {
    Rng rng = Rng::stream(cfg_.seed, step);
    const std::size_t batch = std::min(cfg_.shapes_per_step, shapes_.size());
    const auto chosen = draw_subset(shapes_.size(), batch, rng);
    const auto samples = meshing::make_samples(model_, cfg_.points_per_step, cfg_.sampling, rng.next());

    diff::Tape tape;
    std::vector<std::shared_ptr<chamfer::ChamferOp>> ops;
    std::optional<diff::NodeId> total;
    std::vector<diff::NodeId> sample_nodes;
    for (const auto& m : samples.per_patch) sample_nodes.push_back(tape.constant(m));
    for (auto s : chosen) {
      const auto& shape = shapes_[s];
      diff::NodeId latent;
      if (cfg_.train_encoder) {
        const auto enc_idx = draw_subset(shape.size(), cfg_.encoder_points, rng);
        latent = models::build_encoder(tape, model_, tape.constant(models::cloud_matrix(subset(shape, enc_idx))));
      } else {
        latent = tape.constant(frozen_[s].as_row());
      }
      const auto tgt_idx = draw_subset(shape.size(), cfg_.target_points, rng);
      std::vector<Vec3> target;
      target.reserve(tgt_idx.size());
      for (auto i : tgt_idx) target.push_back(shape.points[i]);
      std::vector<diff::NodeId> patches;
      for (std::size_t p = 0; p < model_.n_patches(); ++p)
        patches.push_back(models::build_decoder(tape, model_, p, sample_nodes[p], latent));
      auto op = std::make_shared<chamfer::ChamferOp>(std::move(target), cfg_.threads);
      ops.push_back(op);
      const auto loss = tape.custom(patches, op);
      total = total ? tape.add(*total, loss) : loss;
    }
    tape.forward(model_.params());
    Evaluation ev;
    for (const auto& op : ops) {
      ev.forward_term += op->result().forward_term;
      ev.backward_term += op->result().backward_term;
    }
    double penalty = 0.0;
    if (cfg_.weight_decay != 0.0) {
      const auto& vals = model_.params().values();
      for (std::size_t k = 0; k < vals.size(); ++k)
        if (trainable_[k]) penalty += vals[k] * vals[k];
      penalty *= cfg_.weight_decay;
    }
    ev.loss = tape.value(*total)(0, 0) + penalty;
    if (with_grad) {
      ev.grad = tape.backward(model_.params());
      const auto& vals = model_.params().values();
      for (std::size_t k = 0; k < vals.size(); ++k) {
        if (!trainable_[k]) ev.grad.d_values[k] = 0.0;
        else if (cfg_.weight_decay != 0.0) ev.grad.d_values[k] += 2.0 * cfg_.weight_decay * vals[k];
      }
    }
    return ev;
  }

  /// One Adam step. Throws NumericError (parameters left at their last finite
  /// values) if the loss or gradient is not finite.
  StepRecord step() {
    const auto t0 = std::chrono::steady_clock::now();
    Evaluation ev = evaluate(step_, true);
    bool finite = std::isfinite(ev.loss);
    for (double g : ev.grad.d_values) finite = finite && std::isfinite(g);
    if (!finite) {
      std::string last_good;
      if (!cfg_.checkpoint_dir.empty()) {
        last_good = (cfg_.checkpoint_dir / "last_good.ckpt").string();
        save_checkpoint(last_good);
      }
      throw NumericError("non-finite loss at step " + std::to_string(step_), step_, last_good);
    }
    ++step_;
    auto& vals = model_.params().values();
    const auto& a = cfg_.adam;
    const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < vals.size(); ++k) {
      if (!trainable_[k]) continue;
      const double g = ev.grad.d_values[k];
      m_[k] = a.beta1 * m_[k] + (1.0 - a.beta1) * g;
      v_[k] = a.beta2 * v_[k] + (1.0 - a.beta2) * g * g;
      vals[k] -= a.rate * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + a.eps);
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return {step_ - 1, ev.loss, ev.forward_term, ev.backward_term, ms};
  }

  /// Model parameters followed by optimizer state, with a JSON sidecar.
  void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& extra = {}) const {
    diff::ParamStore all = model_.params();
    auto put = [&](const std::string& name, const std::vector<double>& v) {
      const auto id = all.add(name, v.size(), 1);
      std::copy(v.begin(), v.end(), all.view(id).begin());
    };
    put("optim.m", m_);
    put("optim.v", v_);
    put("trainer.step", {static_cast<double>(step_)});
    diff::save_params(path, all);
    nlohmann::json meta = models::config_json(model_);
    meta["train"] = to_json(cfg_);
    meta["seed"] = cfg_.seed;
    meta["step"] = step_;
    if (extra.is_object())
      for (auto& [k, v] : extra.items()) meta[k] = v;
    geometry::detail::write_file(models::sidecar_path(path), meta.dump(2) + "\n");
  }

  /// Restores parameters, optimizer state and step counter.
  void load_checkpoint(const std::filesystem::path& path) {
    const diff::ParamStore all = diff::load_params(path);
    auto& store = model_.params();
    for (std::size_t i = 0; i < store.layout().size(); ++i) {
      if (i >= all.layout().size() || all.slot(i).name != store.slot(i).name || all.slot(i).size() != store.slot(i).size())
        throw IoError(path.string() + ": checkpoint does not match the model layout");
      auto src = all.view(i);
      std::copy(src.begin(), src.end(), store.view(i).begin());
    }
    auto fetch = [&](const std::string& name) {
      if (!all.contains(name)) throw IoError(path.string() + ": checkpoint has no optimizer state '" + name + "'");
      auto v = all.view(all.find(name));
      return std::vector<double>(v.begin(), v.end());
    };
    m_ = fetch("optim.m");
    v_ = fetch("optim.v");
    if (m_.size() != store.size() || v_.size() != store.size())
      throw IoError(path.string() + ": optimizer state size mismatch");
    step_ = static_cast<std::size_t>(fetch("trainer.step").at(0));
  }

  double eval_cd(std::size_t shape) const {
    return trainer::eval_cd(model_, eval_latent(shape), shapes_[shape], cfg_.eval_points, cfg_.sampling, cfg_.seed,
                            cfg_.threads);
  }

  double mean_eval_cd() const {
    double s = 0.0;
    for (std::size_t i = 0; i < shapes_.size(); ++i) s += eval_cd(i);
    return s / static_cast<double>(shapes_.size());
  }

 private:
  static PointCloud subset(const PointCloud& c, const std::vector<std::size_t>& idx) {
    PointCloud out;
    out.points.reserve(idx.size());
    for (auto i : idx) out.points.push_back(c.points[i]);
    return out;
  }

  AtlasModel& model_;
  std::vector<PointCloud> shapes_;
  TrainConfig cfg_;
  std::vector<LatentCode> frozen_;
  std::vector<bool> trainable_;
  std::vector<double> m_, v_;
  std::size_t step_ = 0;
};

/// Runs `cfg.steps` steps (continuing from the trainer's current step) and
/// returns the report. Writes periodic checkpoints when configured.
inline TrainReport run(Trainer& trainer, std::size_t until_step) {
  const auto& cfg = trainer.config();
  TrainReport rep;
  rep.config = to_json(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  rep.initial_loss = trainer.evaluate(trainer.steps_done(), false).loss;
  while (trainer.steps_done() < until_step) {
    rep.trace.push_back(trainer.step());
    if (cfg.checkpoint_every && !cfg.checkpoint_dir.empty() && trainer.steps_done() % cfg.checkpoint_every == 0) {
      const auto path = cfg.checkpoint_dir / ("step_" + std::to_string(trainer.steps_done()) + ".ckpt");
      trainer.save_checkpoint(path);
      rep.checkpoint_path = path.string();
    }
  }
  rep.final_eval_cd = trainer.mean_eval_cd();
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline TrainReport train_autoencoder(const std::vector<PointCloud>& shapes, AtlasModel& model, const TrainConfig& cfg) {
  Trainer t(model, shapes, cfg);
  return run(t, cfg.steps);
}

struct OverfitResult {
  AtlasModel model;
  TrainReport report;
};

/// Fits one shape with the encoder frozen (unless cfg.train_encoder); the
/// model is initialised from cfg.seed.
inline OverfitResult overfit_single_shape(const PointCloud& target, const models::EncoderConfig& enc,
                                          const models::DecoderConfig& dec, TrainConfig cfg) {
  AtlasModel model(enc, dec, cfg.seed);
  Trainer t(model, {target}, cfg);
  auto rep = run(t, cfg.steps);
  return {std::move(model), std::move(rep)};
}

}  // namespace atlas::trainer
