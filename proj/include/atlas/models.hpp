#pragma once

// Trainable networks: the point-set encoder, the atlas decoder (N learnable
// parameterizations of the unit square, or one of the unit sphere) and the
// fixed-size points baseline.
//
// Decoder patch i maps a domain sample p and the latent code x to
//   tanh(W3 relu(W2 relu(W1 relu(W0 [x; p] + b0) + b1) + b2) + b3).
// The first layer's weight is stored split into its latent rows and its domain
// rows, so W0 [x; p] is computed as x·W0_latent (once per patch) plus
// p·W0_domain (per sample). The two forms are algebraically identical.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "atlas/checkpoint.hpp"
#include "atlas/diffcore.hpp"
#include "atlas/error.hpp"
#include "atlas/geometry.hpp"
#include "atlas/rng.hpp"
#include <nlohmann/json.hpp>

namespace atlas::models {

using diff::Matrix;
using diff::NodeId;
using diff::ParamStore;
using diff::Tape;

enum class Domain { kSquare, kSphere };

inline std::string_view domain_name(Domain d) { return d == Domain::kSquare ? "square2d" : "sphere3d"; }
inline Domain parse_domain(std::string_view s) {
  if (s == "square2d" || s == "square") return Domain::kSquare;
  if (s == "sphere3d" || s == "sphere") return Domain::kSphere;
  throw InvalidArgument("unknown domain '" + std::string(s) + "'");
}
inline std::size_t domain_dim(Domain d) { return d == Domain::kSquare ? 2 : 3; }

enum class SamplingMode { kRegularGrid, kUniformRandom };

inline std::string_view sampling_name(SamplingMode m) { return m == SamplingMode::kRegularGrid ? "regular" : "random"; }
inline SamplingMode parse_sampling(std::string_view s) {
  if (s == "regular" || s == "regular_grid" || s == "grid") return SamplingMode::kRegularGrid;
  if (s == "random" || s == "uniform_random") return SamplingMode::kUniformRandom;
  throw InvalidArgument("unknown sampling mode '" + std::string(s) + "'");
}

struct EncoderConfig {
  std::vector<std::size_t> per_point_widths{32, 64, 128};
  std::size_t latent_dim = 128;
};

struct DecoderConfig {
  std::size_t n_patches = 1;
  std::vector<std::size_t> hidden_widths{128, 64, 32};
  Domain domain = Domain::kSquare;
};

struct LatentCode {
  std::vector<double> x;

  std::size_t dim() const { return x.size(); }
  Matrix as_row() const { return Matrix(1, x.size(), x); }
  friend bool operator==(const LatentCode&, const LatentCode&) = default;
};

inline void validate(const EncoderConfig& c) {
  if (c.latent_dim == 0) throw InvalidArgument("encoder: latent_dim must be at least 1");
  for (auto w : c.per_point_widths)
    if (w == 0) throw InvalidArgument("encoder: layer widths must be at least 1");
}

inline void validate(const DecoderConfig& c) {
  if (c.n_patches == 0) throw InvalidArgument("decoder: n_patches must be at least 1");
  if (c.domain == Domain::kSphere && c.n_patches != 1)
    throw InvalidArgument("decoder: sphere domain uses exactly one parameterization");
  if (c.hidden_widths.empty()) throw InvalidArgument("decoder: at least one hidden layer is required");
  for (auto w : c.hidden_widths)
    if (w == 0) throw InvalidArgument("decoder: layer widths must be at least 1");
}

namespace detail {

inline void glorot_fill(ParamStore& store, std::size_t slot, Rng& rng) {
  const auto& s = store.slot(slot);
  const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
  for (double& v : store.view(slot)) v = limit * (2.0 * rng.uniform() - 1.0);
}

// Glorot limit for a first layer whose weight is split across two slots.
inline void glorot_fill(ParamStore& store, std::size_t slot, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : store.view(slot)) v = limit * (2.0 * rng.uniform() - 1.0);
}

inline std::string dec(std::size_t patch, const std::string& rest) {
  return "decoder" + std::to_string(patch) + "." + rest;
}

}  // namespace detail

/// Encoder plus N decoder parameter sets in one ParamStore.
class AtlasModel {
 public:
  AtlasModel(EncoderConfig enc, DecoderConfig dec, std::uint64_t seed) : enc_(std::move(enc)), dec_(std::move(dec)) {
    validate(enc_);
    validate(dec_);
    Rng rng(seed);
    std::size_t in = 3;
    for (std::size_t l = 0; l < enc_.per_point_widths.size(); ++l) {
      const auto w = enc_.per_point_widths[l];
      detail::glorot_fill(params_, params_.add("encoder.fc" + std::to_string(l) + ".weight", in, w), rng);
      params_.add("encoder.fc" + std::to_string(l) + ".bias", 1, w);
      in = w;
    }
    detail::glorot_fill(params_, params_.add("encoder.proj.weight", in, enc_.latent_dim), rng);
    params_.add("encoder.proj.bias", 1, enc_.latent_dim);

    const auto k = enc_.latent_dim, d = domain_dim(dec_.domain);
    for (std::size_t i = 0; i < dec_.n_patches; ++i) {
      const auto h0 = dec_.hidden_widths[0];
      detail::glorot_fill(params_, params_.add(detail::dec(i, "fc0.w_latent"), k, h0), k + d, h0, rng);
      detail::glorot_fill(params_, params_.add(detail::dec(i, "fc0.w_domain"), d, h0), k + d, h0, rng);
      params_.add(detail::dec(i, "fc0.bias"), 1, h0);
      std::size_t prev = h0;
      for (std::size_t l = 1; l <= dec_.hidden_widths.size(); ++l) {
        const auto w = l < dec_.hidden_widths.size() ? dec_.hidden_widths[l] : 3;
        detail::glorot_fill(params_, params_.add(detail::dec(i, "fc" + std::to_string(l) + ".weight"), prev, w), rng);
        params_.add(detail::dec(i, "fc" + std::to_string(l) + ".bias"), 1, w);
        prev = w;
      }
    }
    resolve_slots();
  }

  /// Wraps loaded parameters; throws if they do not match the configs.
  static AtlasModel from_params(EncoderConfig enc, DecoderConfig dec, ParamStore params) {
    AtlasModel m(enc, dec, 0);
    if (m.params_.layout() != params.layout()) throw InvalidArgument("model: parameter layout does not match config");
    m.params_ = std::move(params);
    return m;
  }

  const EncoderConfig& encoder_config() const { return enc_; }
  const DecoderConfig& decoder_config() const { return dec_; }
  std::size_t n_patches() const { return dec_.n_patches; }
  std::size_t latent_dim() const { return enc_.latent_dim; }
  Domain domain() const { return dec_.domain; }
  std::size_t decoder_input_dim() const { return enc_.latent_dim + domain_dim(dec_.domain); }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  struct Layer {
    std::size_t weight = 0, bias = 0;
  };
  struct DecoderSlots {
    std::size_t w_latent = 0, w_domain = 0, bias0 = 0;
    std::vector<Layer> layers;  // fc1 .. output
  };

  const std::vector<Layer>& encoder_layers() const { return enc_layers_; }
  const Layer& encoder_projection() const { return enc_proj_; }
  const DecoderSlots& decoder(std::size_t i) const { return dec_slots_.at(i); }

  /// Number of scalar parameters belonging to the decoders.
  std::size_t decoder_parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : params_.layout())
      if (s.name.starts_with("decoder")) n += s.size();
    return n;
  }

 private:
  void resolve_slots() {
    enc_layers_.clear();
    for (std::size_t l = 0; l < enc_.per_point_widths.size(); ++l)
      enc_layers_.push_back({params_.find("encoder.fc" + std::to_string(l) + ".weight"),
                             params_.find("encoder.fc" + std::to_string(l) + ".bias")});
    enc_proj_ = {params_.find("encoder.proj.weight"), params_.find("encoder.proj.bias")};
    dec_slots_.clear();
    for (std::size_t i = 0; i < dec_.n_patches; ++i) {
      DecoderSlots s;
      s.w_latent = params_.find(detail::dec(i, "fc0.w_latent"));
      s.w_domain = params_.find(detail::dec(i, "fc0.w_domain"));
      s.bias0 = params_.find(detail::dec(i, "fc0.bias"));
      for (std::size_t l = 1; l <= dec_.hidden_widths.size(); ++l)
        s.layers.push_back({params_.find(detail::dec(i, "fc" + std::to_string(l) + ".weight")),
                            params_.find(detail::dec(i, "fc" + std::to_string(l) + ".bias"))});
      dec_slots_.push_back(std::move(s));
    }
  }

  EncoderConfig enc_;
  DecoderConfig dec_;
  ParamStore params_;
  std::vector<Layer> enc_layers_;
  Layer enc_proj_;
  std::vector<DecoderSlots> dec_slots_;
};

// ---------------------------------------------------------------------------
// Graph builders

/// Shared per-point ReLU MLP, column-wise max pool, then a linear projection
/// to the latent dimension. `points` is n×3; returns a 1×k node.
inline NodeId build_encoder(Tape& tape, const AtlasModel& model, NodeId points) {
  NodeId h = points;
  for (const auto& l : model.encoder_layers())
    h = tape.relu(tape.add(tape.matmul(h, tape.param(l.weight)), tape.param(l.bias)));
  const NodeId pooled = tape.max_pool_rows(h);
  const auto& p = model.encoder_projection();
  return tape.add(tape.matmul(pooled, tape.param(p.weight)), tape.param(p.bias));
}

/// Decoder patch `patch` on P×d domain samples with a 1×k latent node.
/// Returns the P×3 output, or the pre-tanh affine output when `pre_tanh`.
inline NodeId build_decoder(Tape& tape, const AtlasModel& model, std::size_t patch, NodeId samples, NodeId latent,
                            bool pre_tanh = false) {
  if (patch >= model.n_patches()) throw InvalidArgument("decoder: patch index out of range");
  const auto& s = model.decoder(patch);
  const NodeId shared = tape.add(tape.matmul(latent, tape.param(s.w_latent)), tape.param(s.bias0));
  NodeId h = tape.relu(tape.add(tape.matmul(samples, tape.param(s.w_domain)), shared));
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const NodeId z = tape.add(tape.matmul(h, tape.param(s.layers[l].weight)), tape.param(s.layers[l].bias));
    const bool last = l + 1 == s.layers.size();
    h = last ? (pre_tanh ? z : tape.tanh(z)) : tape.relu(z);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Inference

inline Matrix cloud_matrix(const geometry::PointCloud& cloud) {
  Matrix m(cloud.size(), 3);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int k = 0; k < 3; ++k) m(i, k) = cloud.points[i][k];
  return m;
}

/// Max-pooled latent code of a point cloud (normals ignored).
inline LatentCode encode(const AtlasModel& model, const geometry::PointCloud& cloud) {
  if (cloud.empty()) throw InvalidArgument("encode: empty point cloud");
  Tape tape;
  build_encoder(tape, model, tape.constant(cloud_matrix(cloud)));
  return LatentCode{tape.forward(model.params()).data()};
}

namespace detail {

inline Matrix run_decoder(const AtlasModel& model, std::size_t patch, const Matrix& samples, const LatentCode& x,
                          bool pre_tanh = false) {
  if (x.dim() != model.latent_dim()) throw InvalidArgument("decode: latent dimension mismatch");
  if (samples.rows() == 0) return Matrix(0, 3);
  Tape tape;
  build_decoder(tape, model, patch, tape.constant(samples), tape.constant(x.as_row()), pre_tanh);
  return tape.forward(model.params());
}

}  // namespace detail

/// Decodes P×2 samples in the closed unit square through patch i.
inline Matrix decode_patch(const AtlasModel& model, std::size_t patch, const Matrix& samples, const LatentCode& x) {
  if (model.domain() != Domain::kSquare) throw InvalidArgument("decode_patch: model uses the sphere domain");
  if (samples.cols() != 2) throw InvalidArgument("decode_patch: samples must be P×2");
  for (double v : samples.data())
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("decode_patch: sample outside the unit square");
  return detail::run_decoder(model, patch, samples, x);
}

inline constexpr double kUnitSampleTolerance = 1e-6;

/// Decodes P×3 unit vectors through the single sphere parameterization.
inline Matrix decode_sphere(const AtlasModel& model, const Matrix& samples, const LatentCode& x) {
  if (model.domain() != Domain::kSphere) throw InvalidArgument("decode_sphere: model uses the square domain");
  if (samples.cols() != 3) throw InvalidArgument("decode_sphere: samples must be P×3");
  for (std::size_t r = 0; r < samples.rows(); ++r) {
    const double n = std::sqrt(samples(r, 0) * samples(r, 0) + samples(r, 1) * samples(r, 1) +
                               samples(r, 2) * samples(r, 2));
    if (std::abs(n - 1.0) > kUnitSampleTolerance) throw InvalidArgument("decode_sphere: sample is not a unit vector");
  }
  return detail::run_decoder(model, 0, samples, x);
}

/// Side length g of a g×g grid holding exactly n points; throws otherwise.
inline std::size_t grid_side(std::size_t n) {
  auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (g * g != n) throw InvalidArgument("regular grid needs a perfect-square point count, got " + std::to_string(n));
  return g;
}

/// Regular g×g lattice on [0,1]² including corners, row-major in (u, v).
inline Matrix square_grid(std::size_t g) {
  Matrix m(g * g, 2);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      m(i * g + j, 0) = g == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(g - 1);
      m(i * g + j, 1) = g == 1 ? 0.5 : static_cast<double>(j) / static_cast<double>(g - 1);
    }
  return m;
}

/// Fibonacci lattice on the unit sphere.
inline Matrix fibonacci_sphere(std::size_t n) {
  Matrix m(n, 3);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i);
    double p[3] = {r * std::cos(phi), r * std::sin(phi), z};
    const double len = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    for (int k = 0; k < 3; ++k) m(i, k) = p[k] / len;
  }
  return m;
}

/// P domain samples: square → P×2, sphere → P×3.
inline Matrix sample_domain(Domain domain, std::size_t count, SamplingMode mode, std::uint64_t seed) {
  if (mode == SamplingMode::kRegularGrid)
    return domain == Domain::kSquare ? square_grid(grid_side(count)) : fibonacci_sphere(count);
  Rng rng(seed);
  if (domain == Domain::kSquare) {
    Matrix m(count, 2);
    for (double& v : m.data()) v = rng.uniform();
    return m;
  }
  Matrix m(count, 3);
  for (std::size_t i = 0; i < count; ++i) {
    const double z = 2.0 * rng.uniform() - 1.0;
    const double phi = 2.0 * std::numbers::pi * rng.uniform();
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    double p[3] = {r * std::cos(phi), r * std::sin(phi), z};
    const double len = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    for (int k = 0; k < 3; ++k) m(i, k) = p[k] / len;
  }
  return m;
}

inline LatentCode interpolate_latent(const LatentCode& a, const LatentCode& b, double t) {
  if (a.dim() != b.dim()) throw InvalidArgument("interpolate_latent: dimension mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("interpolate_latent: t must lie in [0,1]");
  LatentCode out{std::vector<double>(a.dim())};
  for (std::size_t i = 0; i < a.dim(); ++i) out.x[i] = (1.0 - t) * a.x[i] + t * b.x[i];
  return out;
}

// ---------------------------------------------------------------------------
// Points baseline: latent → FC+BN+ReLU ×3 → FC(3P) → tanh

struct BaselineConfig {
  std::size_t latent_dim = 128;
  std::vector<std::size_t> hidden_widths{128, 128, 128};
  std::size_t n_points = 2500;
};

class PointsBaseline {
 public:
  PointsBaseline(BaselineConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.latent_dim == 0 || cfg_.n_points == 0 || cfg_.hidden_widths.empty())
      throw InvalidArgument("baseline: invalid configuration");
    Rng rng(seed);
    std::size_t in = cfg_.latent_dim;
    for (std::size_t l = 0; l < cfg_.hidden_widths.size(); ++l) {
      const auto w = cfg_.hidden_widths[l];
      const auto tag = "baseline.fc" + std::to_string(l);
      Layer layer;
      layer.weight = params_.add(tag + ".weight", in, w);
      detail::glorot_fill(params_, layer.weight, rng);
      layer.bias = params_.add(tag + ".bias", 1, w);
      layer.gamma = params_.add("baseline.bn" + std::to_string(l) + ".gamma", 1, w);
      for (double& v : params_.view(layer.gamma)) v = 1.0;
      layer.beta = params_.add("baseline.bn" + std::to_string(l) + ".beta", 1, w);
      layers_.push_back(layer);
      bn_.emplace_back(w);
      in = w;
    }
    out_.weight = params_.add("baseline.out.weight", in, 3 * cfg_.n_points);
    detail::glorot_fill(params_, out_.weight, rng);
    out_.bias = params_.add("baseline.out.bias", 1, 3 * cfg_.n_points);
  }

  struct Layer {
    std::size_t weight = 0, bias = 0, gamma = 0, beta = 0;
  };

  const BaselineConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::vector<diff::BatchNormState>& batch_norm_states() { return bn_; }

  /// `latents` is B×k; returns B×3P. Training mode normalizes over the batch.
  NodeId build(Tape& tape, NodeId latents, bool training) {
    NodeId h = latents;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const NodeId z = tape.add(tape.matmul(h, tape.param(L.weight)), tape.param(L.bias));
      h = tape.relu(tape.batch_norm(z, tape.param(L.gamma), tape.param(L.beta), &bn_[l], training));
    }
    return tape.tanh(tape.add(tape.matmul(h, tape.param(out_.weight)), tape.param(out_.bias)));
  }

 private:
  BaselineConfig cfg_;
  ParamStore params_;
  std::vector<Layer> layers_;
  Layer out_;
  std::vector<diff::BatchNormState> bn_;
};

/// Eval-mode decode of one latent into n_points × 3.
inline Matrix points_baseline_decode(PointsBaseline& baseline, const LatentCode& x) {
  if (x.dim() != baseline.config().latent_dim) throw InvalidArgument("baseline: latent dimension mismatch");
  Tape tape;
  baseline.build(tape, tape.constant(x.as_row()), false);
  const Matrix& flat = tape.forward(baseline.params());
  return Matrix(baseline.config().n_points, 3, flat.data());
}

// ---------------------------------------------------------------------------
// Checkpoints: parameter container plus a JSON sidecar at <path>.json

inline nlohmann::json config_json(const AtlasModel& m) {
  return {{"encoder", {{"per_point_widths", m.encoder_config().per_point_widths},
                       {"latent_dim", m.encoder_config().latent_dim}}},
          {"decoder", {{"n_patches", m.decoder_config().n_patches},
                       {"hidden_widths", m.decoder_config().hidden_widths},
                       {"domain", domain_name(m.domain())}}}};
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) { return p.string() + ".json"; }

inline void save_model(const AtlasModel& model, const std::filesystem::path& path, nlohmann::json extra = {}) {
  diff::save_params(path, model.params());
  nlohmann::json meta = config_json(model);
  if (!extra.is_null())
    for (auto& [k, v] : extra.items()) meta[k] = v;
  geometry::detail::write_file(sidecar_path(path), meta.dump(2) + "\n");
}

struct LoadedModel {
  AtlasModel model;
  nlohmann::json metadata;
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(geometry::detail::read_file(sidecar_path(path)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(sidecar_path(path).string() + ": " + e.what());
  }
  try {
    EncoderConfig enc{meta.at("encoder").at("per_point_widths").get<std::vector<std::size_t>>(),
                      meta.at("encoder").at("latent_dim").get<std::size_t>()};
    DecoderConfig dec{meta.at("decoder").at("n_patches").get<std::size_t>(),
                      meta.at("decoder").at("hidden_widths").get<std::vector<std::size_t>>(),
                      parse_domain(meta.at("decoder").at("domain").get<std::string>())};
    ParamStore loaded = diff::load_params(path);
    // Trainer checkpoints append optimizer state after the model slots.
    AtlasModel probe(enc, dec, 0);
    const auto n = probe.params().layout().size();
    if (loaded.layout().size() < n) throw IoError(path.string() + ": checkpoint is missing model parameters");
    std::vector<diff::ParamSlot> layout(loaded.layout().begin(), loaded.layout().begin() + static_cast<long>(n));
    const std::size_t count = n ? layout.back().offset + layout.back().size() : 0;
    std::vector<double> values(loaded.values().begin(), loaded.values().begin() + static_cast<long>(count));
    return {AtlasModel::from_params(enc, dec, ParamStore::from_layout(std::move(layout), std::move(values))), meta};
  } catch (const nlohmann::json::exception& e) {
    throw IoError(sidecar_path(path).string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace atlas::models
