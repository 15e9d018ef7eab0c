// atlas: synthesize shapes, train, mesh, evaluate, interpolate, transfer
// correspondences and check the ReLU region properties of a decoder.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "atlas/config.hpp"
#include "atlas/error.hpp"
#include "atlas/geometry.hpp"
#include "atlas/meshing.hpp"
#include "atlas/metrics.hpp"
#include "atlas/models.hpp"
#include "atlas/theory.hpp"
#include "atlas/trainer.hpp"

#ifndef ATLAS_GIT_DESCRIBE
#define ATLAS_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace atlas;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kNumeric = 3, kIo = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::string out = ".";
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value configuration file (overrides flags)");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--threads", c.threads, "worker threads (1 = bitwise deterministic)")->check(CLI::PositiveNumber);
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_flag("--force", c.force, "overwrite existing outputs");
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Output directory guard: lock file, refusal to overwrite without --force,
/// and a manifest written before any output and completed at the end.
class Run {
 public:
  Run(const std::string& command, const Common& c, std::vector<std::string> argv, json config)
      : dir_(c.out), force_(c.force) {
    fs::create_directories(dir_);
    lock_ = dir_ / ".atlas.lock";
    if (std::FILE* f = std::fopen(lock_.c_str(), "wx")) {
      std::fclose(f);
    } else {
      throw IoError(dir_.string() + ": output directory is locked by another run (" + lock_.string() + ")");
    }
    locked_ = true;
    manifest_ = {{"command", command},
                 {"argv", std::move(argv)},
                 {"config", std::move(config)},
                 {"seed", c.seed ? json(*c.seed) : json(nullptr)},
                 {"threads", c.threads},
                 {"git_describe", ATLAS_GIT_DESCRIBE},
                 {"started", now_iso()},
                 {"finished", nullptr},
                 {"outputs", json::array()}};
    try {
      write_manifest(claim("manifest.json", false));
    } catch (...) {
      fs::remove(lock_);
      throw;
    }
  }
  ~Run() {
    if (locked_) fs::remove(lock_);
  }
  Run(const Run&) = delete;
  Run& operator=(const Run&) = delete;

  /// Path for a new output; refuses existing files unless --force.
  fs::path claim(const std::string& name, bool record = true) {
    const fs::path p = dir_ / name;
    if (fs::exists(p) && !force_) throw IoError(p.string() + " exists (use --force to overwrite)");
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    if (record) manifest_["outputs"].push_back(p.string());
    return p;
  }

  json& manifest() { return manifest_; }

  void finish() {
    manifest_["finished"] = now_iso();
    write_manifest(dir_ / "manifest.json");
  }

 private:
  void write_manifest(const fs::path& p) { geometry::detail::write_file(p, manifest_.dump(2) + "\n"); }

  fs::path dir_, lock_;
  bool force_;
  bool locked_ = false;
  json manifest_;
};

config::KeyValues load_config(const Common& c) {
  return c.config.empty() ? config::KeyValues{} : config::load(c.config);
}

/// Applies `seed` and `threads` from the config file over the flags.
void override_common(Common& c, config::KeyValues& kv) {
  if (auto it = kv.find("seed"); it != kv.end()) c.seed = config::as_uint("seed", it->second);
  if (auto it = kv.find("threads"); it != kv.end())
    c.threads = static_cast<unsigned>(std::max<std::uint64_t>(1, config::as_uint("threads", it->second)));
}

struct Shape {
  std::string path;
  geometry::PointCloud cloud;                 // normalized
  std::optional<geometry::TriangleMesh> mesh;  // normalized with the same transform
};

/// Loads an OBJ (sampled to `points`) or XYZ cloud and normalizes it to the
/// unit box.
Shape load_shape(const std::string& path, std::size_t points, std::uint64_t seed) {
  Shape s;
  s.path = path;
  const auto ext = fs::path(path).extension().string();
  if (ext == ".obj") {
    auto mesh = geometry::read_obj(path);
    const auto t = geometry::unit_box_transform(mesh.vertices);
    mesh = geometry::transformed(std::move(mesh), t);
    s.cloud = geometry::sample_surface(mesh, points, seed);
    s.mesh = std::move(mesh);
  } else if (ext == ".xyz") {
    auto raw = geometry::read_xyz(path);
    s.cloud = geometry::normalize_to_unit_box(raw).first;
  } else {
    throw InvalidArgument(path + ": expected a .obj or .xyz file");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Model configuration keys

const std::set<std::string> kModelKeys{"n_patches", "hidden_widths", "encoder_widths", "latent_dim", "domain"};

std::pair<models::EncoderConfig, models::DecoderConfig> model_config(const config::KeyValues& kv) {
  models::EncoderConfig enc;
  models::DecoderConfig dec;
  for (const auto& [k, v] : kv) {
    if (k == "n_patches") dec.n_patches = config::as_uint(k, v);
    else if (k == "hidden_widths") dec.hidden_widths = config::as_size_list(k, v);
    else if (k == "encoder_widths") enc.per_point_widths = config::as_size_list(k, v);
    else if (k == "latent_dim") enc.latent_dim = config::as_uint(k, v);
    else if (k == "domain") dec.domain = models::parse_domain(v);
  }
  models::validate(enc);
  models::validate(dec);
  return {enc, dec};
}

// ---------------------------------------------------------------------------
// Loaded checkpoints and latents

struct Checkpoint {
  models::AtlasModel model;
  json meta;
};

Checkpoint load_checkpoint(const std::string& path) {
  auto lm = models::load_model(path);
  return {std::move(lm.model), std::move(lm.metadata)};
}

std::size_t encoder_points(const json& meta) {
  return meta.contains("train") ? meta["train"].value("encoder_points", std::size_t{1024}) : 1024;
}
std::uint64_t train_seed(const json& meta) { return meta.value("seed", std::uint64_t{0}); }

/// Stored latent when `path` is a training shape of the checkpoint,
/// otherwise the encoding of the shape.
models::LatentCode latent_for(const Checkpoint& ck, const Shape& shape) {
  if (ck.meta.contains("shapes") && ck.meta.contains("latents")) {
    const auto& names = ck.meta["shapes"];
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i].get<std::string>() == shape.path)
        return {ck.meta["latents"].at(i).get<std::vector<double>>()};
  }
  return trainer::shape_latent(ck.model, shape.cloud, encoder_points(ck.meta), train_seed(ck.meta), 0);
}

models::LatentCode stored_latent(const Checkpoint& ck, std::size_t index) {
  if (!ck.meta.contains("latents") || index >= ck.meta["latents"].size())
    throw InvalidArgument("checkpoint has no stored latent #" + std::to_string(index));
  return {ck.meta["latents"][index].get<std::vector<double>>()};
}

geometry::TriangleMesh decode_mesh(const models::AtlasModel& model, const models::LatentCode& x, std::size_t g,
                                   unsigned subdivisions, std::size_t batch, unsigned threads,
                                   std::vector<std::size_t> patches = {}) {
  if (model.domain() == models::Domain::kSphere) return meshing::mesh_from_sphere(model, x, subdivisions, batch);
  return meshing::mesh_from_patches(model, x, {g, std::move(patches), batch, threads});
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const Common& c0, const std::vector<std::string>& argv, const std::string& spec_path, bool suite,
              std::size_t points) {
  Common c = c0;
  auto kv = load_config(c);
  override_common(c, kv);
  struct Item {
    std::string name;
    geometry::ShapeSpec spec;
    unsigned resolution;
  };
  std::vector<Item> items;
  using K = geometry::ShapeKind;
  const std::uint64_t seed = c.seed.value_or(0);
  if (suite) {
    const std::vector<std::tuple<std::string, K, std::vector<double>>> defs{
        {"sphere", K::kSphere, {1.0}},
        {"torus", K::kTorus, {1.0, 0.35}},
        {"torus_thin", K::kTorus, {1.0, 0.15}},
        {"cube", K::kBox, {1.0, 1.0, 1.0}},
        {"slab", K::kBox, {2.0, 1.0, 0.3}},
        {"beam", K::kBox, {3.0, 0.5, 0.5}},
        {"plane", K::kPlane, {1.0, 1.0}},
        {"strip", K::kPlane, {3.0, 1.0}},
        {"two_planes", K::kTwoPlanes, {1.0, 1.0, 0.5}},
        {"two_planes_close", K::kTwoPlanes, {1.0, 1.0, 0.15}},
        {"capsule", K::kCapsule, {0.5, 1.0}},
        {"capsule_long", K::kCapsule, {0.3, 2.0}},
        {"sphere_small", K::kSphere, {0.5}},
    };
    for (const auto& [name, kind, params] : defs)
      items.push_back({name, geometry::ShapeSpec::of(kind, params, seed), kind == K::kSphere ? 3u : 24u});
  } else {
    if (spec_path.empty()) throw InvalidArgument("synth: give --spec <file> or --suite");
    const auto spec = config::load(spec_path);
    std::string name, kind_s;
    std::vector<double> params;
    unsigned resolution = 0;
    std::uint64_t spec_seed = seed;
    for (const auto& [k, v] : spec) {
      if (k == "kind") kind_s = v;
      else if (k == "name") name = v;
      else if (k == "parameters")
        for (const auto& p : config::as_list(v)) params.push_back(config::as_double(k, p));
      else if (k == "resolution") resolution = static_cast<unsigned>(config::as_uint(k, v));
      else if (k == "seed") spec_seed = config::as_uint(k, v);
      else if (k == "points") points = config::as_uint(k, v);
      else throw InvalidArgument("unknown spec key '" + k + "'");
    }
    if (kind_s.empty()) throw InvalidArgument("synth spec: missing 'kind'");
    const auto kind = geometry::parse_kind(kind_s);
    if (resolution == 0) resolution = kind == K::kSphere ? 3 : 24;
    items.push_back({name.empty() ? kind_s : name, geometry::ShapeSpec::of(kind, params, spec_seed), resolution});
  }
  for (const auto& it : items) geometry::validate(it.spec);

  json cfg = {{"points", points}, {"suite", suite}, {"spec", spec_path}};
  Run run("synth", c, argv, cfg);
  for (const auto& it : items) {
    auto mesh = geometry::procedural(it.spec, it.resolution);
    mesh = geometry::transformed(std::move(mesh), geometry::unit_box_transform(mesh.vertices));
    geometry::validate(mesh);
    geometry::write_obj(mesh, run.claim(it.name + ".obj"));
    geometry::write_xyz(geometry::sample_surface(mesh, points, splitmix64(it.spec.seed)), run.claim(it.name + ".xyz"));
    std::cout << it.name << ": " << mesh.vertices.size() << " vertices, " << mesh.faces.size() << " faces\n";
  }
  run.finish();
  return kOk;
}

int cmd_train(const Common& c0, const std::vector<std::string>& argv, const std::vector<std::string>& shape_paths,
              const std::string& resume, std::size_t shape_points) {
  Common c = c0;
  auto kv = load_config(c);
  override_common(c, kv);
  if (!c.seed) throw InvalidArgument("train: --seed is required");
  trainer::TrainConfig cfg;
  config::KeyValues model_kv;
  for (const auto& [k, v] : kv) {
    if (kModelKeys.contains(k)) model_kv[k] = v;
    else if (k != "threads") trainer::apply_setting(cfg, k, v);
  }
  cfg.seed = *c.seed;
  cfg.threads = c.threads;
  auto [enc, dec] = model_config(model_kv);
  if (shape_paths.empty()) throw InvalidArgument("train: no --shapes given");

  std::vector<geometry::PointCloud> clouds;
  for (std::size_t i = 0; i < shape_paths.size(); ++i)
    clouds.push_back(load_shape(shape_paths[i], shape_points, splitmix64(cfg.seed + i)).cloud);

  json echo = trainer::to_json(cfg);
  for (const auto& [k, v] : model_kv) echo[k] = v;
  echo["shapes"] = shape_paths;
  Run run("train", c, argv, echo);
  cfg.checkpoint_dir = fs::path(c.out) / "checkpoints";
  fs::create_directories(cfg.checkpoint_dir);

  models::AtlasModel model(enc, dec, cfg.seed);
  trainer::Trainer tr(model, clouds, cfg);
  if (!resume.empty()) tr.load_checkpoint(resume);
  const auto log_path = run.claim("train_log.csv");
  const auto ckpt_path = run.claim("model.ckpt");
  run.claim("model.ckpt.json");
  trainer::TrainReport rep;
  try {
    rep = trainer::run(tr, cfg.steps);
  } catch (const NumericError&) {
    run.finish();
    throw;
  }
  geometry::detail::write_file(log_path, trainer::format_log(rep.trace));

  json latents = json::array();
  for (std::size_t i = 0; i < clouds.size(); ++i) latents.push_back(tr.eval_latent(i).x);
  tr.save_checkpoint(ckpt_path, {{"shapes", shape_paths}, {"latents", latents}});

  json summary = {{"initial_loss", rep.initial_loss},
                  {"final_loss", rep.trace.empty() ? rep.initial_loss : rep.trace.back().loss},
                  {"final_eval_cd", rep.final_eval_cd},
                  {"steps", tr.steps_done()},
                  {"wall_ms", rep.wall_ms}};
  run.manifest()["report"] = summary;
  run.finish();
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

int cmd_mesh(const Common& c0, const std::vector<std::string>& argv, const std::string& ckpt, const std::string& shape,
             std::size_t shape_index, std::size_t g, std::string mode, unsigned subdivisions, std::size_t batch,
             const std::vector<std::size_t>& patches, std::size_t shape_points) {
  Common c = c0;
  auto kv = load_config(c);
  override_common(c, kv);
  auto ck = load_checkpoint(ckpt);
  const bool sphere = ck.model.domain() == models::Domain::kSphere;
  if (mode == "auto") mode = sphere ? "sphere" : "grid";
  if (mode != "grid" && mode != "sphere") throw InvalidArgument("mesh: --mode must be grid, sphere or auto");
  if ((mode == "sphere") != sphere)
    throw InvalidArgument("mesh: --mode " + mode + " does not match the checkpoint's " +
                          std::string(models::domain_name(ck.model.domain())) + " domain");
  const auto x = shape.empty() ? stored_latent(ck, shape_index)
                               : latent_for(ck, load_shape(shape, shape_points, train_seed(ck.meta)));
  json cfg = {{"checkpoint", ckpt}, {"shape", shape}, {"shape_index", shape_index}, {"g", g},
              {"mode", mode},       {"subdivisions", subdivisions}, {"batch", batch}};
  Run run("mesh", c, argv, cfg);
  const auto mesh = decode_mesh(ck.model, x, g, subdivisions, batch, c.threads, patches);
  geometry::write_obj(mesh, run.claim("mesh.obj"));
  run.finish();
  std::cout << "mesh.obj: " << mesh.vertices.size() << " vertices, " << mesh.faces.size() << " faces\n";
  return kOk;
}

int cmd_eval(const Common& c0, const std::vector<std::string>& argv, const std::string& ckpt,
             const std::vector<std::string>& shapes, std::size_t points, const std::string& sampling, std::size_t g,
             unsigned subdivisions, std::size_t metro_samples, std::size_t shape_points) {
  Common c = c0;
  auto kv = load_config(c);
  override_common(c, kv);
  auto ck = load_checkpoint(ckpt);
  const auto mode = models::parse_sampling(sampling);
  json cfg = {{"checkpoint", ckpt}, {"shapes", shapes},       {"points", points},
              {"sampling", sampling}, {"g", g}, {"subdivisions", subdivisions}, {"metro_samples", metro_samples}};
  Run run("eval", c, argv, cfg);
  const auto out_path = run.claim("eval.jsonl");
  std::string lines;
  auto emit = [&](json rec) {
    lines += rec.dump() + "\n";
    std::cout << rec.dump() << "\n";
  };
  const std::uint64_t seed = c.seed.value_or(train_seed(ck.meta));
  for (const auto& path : shapes) {
    const auto shape = load_shape(path, shape_points, train_seed(ck.meta));
    const auto x = latent_for(ck, shape);
    const auto samples = trainer::eval_samples(ck.model, points, mode, splitmix64(seed ^ trainer::kEvalStream));
    const auto generated = meshing::decode_samples(ck.model, x, samples);
    const double cd = metrics::eval_cd(generated, shape.cloud.points, c.threads);
    emit({{"shape", path}, {"metric", "chamfer"}, {"value", cd}, {"scaled", cd * metrics::kCdDisplayScale},
          {"scale", metrics::kCdDisplayScale}, {"generated_points", samples.size()}});
    const auto mesh = decode_mesh(ck.model, x, g, subdivisions, 4096, c.threads);
    if (shape.mesh) {
      const auto m = metrics::metro(mesh, *shape.mesh, metro_samples, seed, c.threads);
      emit({{"shape", path}, {"metric", "metro"}, {"value", m.symmetric_mean},
            {"scaled", m.symmetric_mean * metrics::kMetroDisplayScale}, {"scale", metrics::kMetroDisplayScale},
            {"forward_mean", m.forward_mean}, {"backward_mean", m.backward_mean}, {"samples_per_side", m.samples_per_side}});
    }
    if (mesh.atlas) {
      const auto d = metrics::uv_distortion(mesh);
      emit({{"shape", path}, {"metric", "area_distortion"}, {"value", d.E_a}, {"scaled", d.E_a}, {"scale", 1.0},
            {"excluded_triangles", d.excluded}});
      emit({{"shape", path}, {"metric", "stretch_distortion"}, {"value", d.E_s}, {"scaled", d.E_s}, {"scale", 1.0},
            {"excluded_triangles", d.excluded}});
    }
  }
  geometry::detail::write_file(out_path, lines);
  run.finish();
  return kOk;
}

int cmd_interp(const Common& c0, const std::vector<std::string>& argv, const std::string& ckpt, const std::string& a,
               const std::string& b, std::size_t steps, std::size_t g, unsigned subdivisions, std::size_t shape_points) {
  Common c = c0;
  auto kv = load_config(c);
  override_common(c, kv);
  if (steps < 2) throw InvalidArgument("interp: --steps must be at least 2");
  auto ck = load_checkpoint(ckpt);
  const auto xa = latent_for(ck, load_shape(a, shape_points, train_seed(ck.meta)));
  const auto xb = latent_for(ck, load_shape(b, shape_points, train_seed(ck.meta)));
  json cfg = {{"checkpoint", ckpt}, {"shape_a", a}, {"shape_b", b}, {"steps", steps}, {"g", g}};
  Run run("interp", c, argv, cfg);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(steps - 1);
    const auto mesh = decode_mesh(ck.model, models::interpolate_latent(xa, xb, t), g, subdivisions, 4096, c.threads);
    char name[32];
    std::snprintf(name, sizeof(name), "interp_%03zu.obj", k);
    geometry::write_obj(mesh, run.claim(name));
  }
  run.finish();
  return kOk;
}

geometry::Vec3 color_of(const std::string& mode, const geometry::AtlasCoord& a, std::size_t n_patches) {
  if (mode == "u") return {a.u, 0.2, 1.0 - a.u};
  if (mode == "v") return {0.2, a.v, 1.0 - a.v};
  if (mode == "uv") return {a.u, a.v, 0.5};
  if (mode == "patch") {
    Rng rng(splitmix64(a.patch + 1));
    (void)n_patches;
    return {rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)};
  }
  throw InvalidArgument("correspond: --color-mode must be u, v, uv or patch");
}

int cmd_correspond(const Common& c0, const std::vector<std::string>& argv, const std::string& ckpt,
                   const std::string& reference, const std::vector<std::string>& others, const std::string& color_mode,
                   std::size_t g, std::size_t shape_points) {
  Common c = c0;
  auto kv = load_config(c);
  override_common(c, kv);
  auto ck = load_checkpoint(ckpt);
  if (ck.model.domain() != models::Domain::kSquare) throw InvalidArgument("correspond: needs a square-domain model");
  (void)color_of(color_mode, {}, 1);
  const auto xr = latent_for(ck, load_shape(reference, shape_points, train_seed(ck.meta)));
  json cfg = {{"checkpoint", ckpt}, {"reference", reference}, {"others", others}, {"color_mode", color_mode}, {"g", g}};
  Run run("correspond", c, argv, cfg);

  meshing::SampleSet grid;
  grid.per_patch.assign(ck.model.n_patches(), models::square_grid(g));
  std::vector<geometry::Vec3> colors;
  for (const auto& a : grid.coords()) colors.push_back(color_of(color_mode, a, ck.model.n_patches()));

  auto ref_mesh = meshing::mesh_from_patches(ck.model, xr, {g, {}, 4096, c.threads});
  ref_mesh.colors = colors;
  geometry::write_obj(ref_mesh, run.claim("reference.obj"));
  for (std::size_t k = 0; k < others.size(); ++k) {
    const auto xo = latent_for(ck, load_shape(others[k], shape_points, train_seed(ck.meta)));
    const auto transfer = meshing::transfer_correspondence(ck.model, xr, xo, grid, colors);
    auto mesh = meshing::mesh_from_patches(ck.model, xo, {g, {}, 4096, c.threads});
    mesh.colors = transfer.values;
    char name[40];
    std::snprintf(name, sizeof(name), "other_%03zu.obj", k);
    geometry::write_obj(mesh, run.claim(name));
  }
  run.finish();
  return kOk;
}

int cmd_check_theory(const Common& c0, const std::vector<std::string>& argv, const std::string& ckpt,
                     std::size_t shape_index, std::size_t patch, const std::string& random_widths,
                     std::size_t mc_samples, bool study, const std::string& study_widths) {
  Common c = c0;
  auto kv = load_config(c);
  override_common(c, kv);
  theory::ReluNet net;
  json source;
  if (!ckpt.empty()) {
    auto ck = load_checkpoint(ckpt);
    net = theory::decoder_net(ck.model, patch, stored_latent(ck, shape_index));
    source = {{"checkpoint", ckpt}, {"shape_index", shape_index}, {"patch", patch}};
  } else {
    if (!c.seed) throw InvalidArgument("check-theory: a random network needs --seed");
    const auto widths = config::as_size_list("random", random_widths);
    net = theory::random_relu_net(widths, *c.seed);
    source = {{"random", widths}, {"seed", *c.seed}};
  }
  Run run("check-theory", c, argv, source);
  const auto en = theory::enumerate_regions(net);
  const auto rank = theory::check_rank2(en.regions);

  std::size_t missed = 0;
  double affine_residual = 0.0;
  Rng rng(c.seed.value_or(0) ^ 0x7e57ULL);
  for (std::size_t i = 0; i < mc_samples; ++i) {
    const Eigen::Vector2d x(rng.uniform(), rng.uniform());
    const auto idx = en.find(theory::pattern_at(net, x));
    if (idx == en.regions.size()) {
      ++missed;
      continue;
    }
    affine_residual = std::max(affine_residual, (en.regions[idx].map(x) - net(x)).cwiseAbs().maxCoeff());
  }
  json report = {{"source", source},
                 {"hidden_units", net.hidden_units()},
                 {"region_count", en.regions.size()},
                 {"region_count_bound", theory::region_count_bound(net)},
                 {"area_residual", en.area_residual},
                 {"rank2_area_fraction", rank.rank2_area_fraction},
                 {"min_sigma2", rank.min_sigma2},
                 {"rank_deficient_regions", rank.failing},
                 {"perturbations", en.perturbations.size()},
                 {"unresolved_probes", en.unresolved_probes},
                 {"monte_carlo_samples", mc_samples},
                 {"monte_carlo_missed", missed},
                 {"affine_residual", affine_residual}};
  if (study) {
    const auto widths = config::as_size_list("study-widths", study_widths);
    const auto rows = theory::approximation_study(theory::hemisphere_chart, widths, {1, 2, 3, 4, 5});
    json table = json::array();
    for (const auto& r : rows)
      table.push_back({{"width", r.width}, {"median_sup_error", r.median}, {"sup_errors", r.sup_errors},
                       {"failures", r.failures}});
    report["approximation_study"] = table;
  }
  if (net.output_dim() == 3) geometry::write_obj(theory::lifted_tessellation(en.regions), run.claim("tessellation.obj"));
  geometry::detail::write_file(run.claim("report.json"), report.dump(2) + "\n");
  run.finish();
  std::cout << report.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learnable-atlas surface generation: synthesis, training, meshing and evaluation"};
  app.require_subcommand(1);
  std::vector<std::string> args(argv, argv + argc);
  Common common;

  auto* synth = app.add_subcommand("synth", "Write procedural shapes as normalized OBJ + XYZ");
  add_common(synth, common);
  std::string spec_path;
  bool suite = false;
  std::size_t synth_points = 10000;
  synth->add_option("--spec", spec_path, "shape spec file (kind, parameters, resolution, seed, points, name)");
  synth->add_flag("--suite", suite, "emit the built-in 13-shape suite");
  synth->add_option("--points", synth_points, "points in each sampled cloud");

  auto* train = app.add_subcommand("train", "Train on one or more shapes");
  add_common(train, common);
  std::vector<std::string> train_shapes;
  std::string resume;
  std::size_t shape_points = 10000;
  train->add_option("--shapes", train_shapes, "training shapes (.obj or .xyz)")->required();
  train->add_option("--resume", resume, "trainer checkpoint to continue from");
  train->add_option("--shape-points", shape_points, "points sampled from OBJ inputs");

  auto* mesh = app.add_subcommand("mesh", "Decode a mesh for one shape");
  add_common(mesh, common);
  std::string ckpt, mesh_shape, mesh_mode = "auto";
  std::size_t shape_index = 0, g = 30, batch = 4096;
  unsigned subdivisions = 3;
  std::vector<std::size_t> patches;
  mesh->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  mesh->add_option("--shape", mesh_shape, "shape to encode (default: stored latent)");
  mesh->add_option("--shape-index", shape_index, "stored training latent to use");
  mesh->add_option("--g", g, "grid side per patch");
  mesh->add_option("--mode", mesh_mode, "grid, sphere or auto");
  mesh->add_option("--subdivisions", subdivisions, "icosphere level for sphere-domain models");
  mesh->add_option("--batch", batch, "decoder rows per evaluation");
  mesh->add_option("--patches", patches, "patch indices to emit (default all)");
  mesh->add_option("--shape-points", shape_points, "points sampled from OBJ inputs");

  auto* eval = app.add_subcommand("eval", "Chamfer, Metro and distortion records per shape");
  add_common(eval, common);
  std::vector<std::string> eval_shapes;
  std::size_t eval_points = 2500, metro_samples = 10000;
  std::string sampling = "regular";
  eval->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  eval->add_option("--shapes", eval_shapes, "reference shapes (.obj for Metro, .obj/.xyz for Chamfer)")->required();
  eval->add_option("--points", eval_points, "generated points for Chamfer");
  eval->add_option("--sampling", sampling, "regular or random");
  eval->add_option("--g", g, "grid side of the evaluated mesh");
  eval->add_option("--subdivisions", subdivisions, "icosphere level for sphere-domain models");
  eval->add_option("--metro-samples", metro_samples, "surface samples per side");
  eval->add_option("--shape-points", shape_points, "points sampled from OBJ inputs");

  auto* interp = app.add_subcommand("interp", "Meshes along the latent segment between two shapes");
  add_common(interp, common);
  std::string shape_a, shape_b;
  std::size_t interp_steps = 5;
  interp->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  interp->add_option("--shape-a", shape_a, "first shape")->required();
  interp->add_option("--shape-b", shape_b, "last shape")->required();
  interp->add_option("--steps", interp_steps, "number of meshes, endpoints included");
  interp->add_option("--g", g, "grid side per patch");
  interp->add_option("--subdivisions", subdivisions, "icosphere level for sphere-domain models");
  interp->add_option("--shape-points", shape_points, "points sampled from OBJ inputs");

  auto* corr = app.add_subcommand("correspond", "Transfer atlas colors from a reference shape to others");
  add_common(corr, common);
  std::string reference, color_mode = "uv";
  std::vector<std::string> others;
  corr->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  corr->add_option("--reference", reference, "reference shape")->required();
  corr->add_option("--others", others, "shapes receiving the colors")->required();
  corr->add_option("--color-mode", color_mode, "u, v, uv or patch");
  corr->add_option("--g", g, "grid side per patch");
  corr->add_option("--shape-points", shape_points, "points sampled from OBJ inputs");

  auto* theory_cmd = app.add_subcommand("check-theory", "Linear regions, rank-2 test and approximation study");
  add_common(theory_cmd, common);
  std::string random_widths = "2,8,3", study_widths = "4,16,64";
  std::size_t patch = 0, mc_samples = 100000;
  bool study = false;
  theory_cmd->add_option("--checkpoint", ckpt, "analyse a decoder patch at a stored latent");
  theory_cmd->add_option("--shape-index", shape_index, "stored training latent");
  theory_cmd->add_option("--patch", patch, "decoder patch");
  theory_cmd->add_option("--random", random_widths, "widths of a random network, e.g. 2,8,3");
  theory_cmd->add_option("--mc-samples", mc_samples, "Monte-Carlo samples for the coverage check");
  theory_cmd->add_flag("--study", study, "also run the hemisphere width study");
  theory_cmd->add_option("--study-widths", study_widths, "hidden widths for the study");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(common, args, spec_path, suite, synth_points);
    if (*train) return cmd_train(common, args, train_shapes, resume, shape_points);
    if (*mesh)
      return cmd_mesh(common, args, ckpt, mesh_shape, shape_index, g, mesh_mode, subdivisions, batch, patches,
                      shape_points);
    if (*eval)
      return cmd_eval(common, args, ckpt, eval_shapes, eval_points, sampling, g, subdivisions, metro_samples,
                      shape_points);
    if (*interp) return cmd_interp(common, args, ckpt, shape_a, shape_b, interp_steps, g, subdivisions, shape_points);
    if (*corr) return cmd_correspond(common, args, ckpt, reference, others, color_mode, g, shape_points);
    if (*theory_cmd)
      return cmd_check_theory(common, args, ckpt, shape_index, patch, random_widths, mc_samples, study, study_widths);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << " (step " << e.step() << ")";
    if (!e.last_good_checkpoint().empty()) std::cerr << "; last good checkpoint: " << e.last_good_checkpoint();
    std::cerr << "\n";
    return kNumeric;
  } catch (const InvalidArgument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
