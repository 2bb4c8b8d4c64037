// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include "faar/cli.hpp"

#include <functional>
#include <memory>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "faar/config.hpp"
#include "faar/oracle.hpp"
#include "faar/packed.hpp"
#include "faar/rounding.hpp"
#include "faar/stage1.hpp"
#include "faar/tensor_io.hpp"

namespace faar::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Command-line surface

struct Command {
  std::string name;
  StageScope scope = StageScope::none;
  CLI::App* app = nullptr;

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t block_size = 0;
  std::size_t steps = 0;
  double lr = 0, lambda_round = 0, lambda_kl = 0, tau = 0, beta_start = 0, beta_end = 0;
  std::map<std::string, CLI::Option*> opts;

  std::string weights, model, calib, rv_dir, rv, packed, reference, packed_manifest;
  std::size_t max_n = 0;
  std::size_t samples = 0;

  bool given(const std::string& flag) const {
    const auto it = opts.find(flag);
    return it != opts.end() && it->second->count() > 0;
  }

  void path_flag(const std::string& flag, std::string& target, const std::string& help) {
    opts[flag] = app->add_option("--" + flag, target, help);
  }
};

Command& add_command(std::vector<std::unique_ptr<Command>>& cmds, CLI::App& app, const std::string& name,
                     const std::string& help, StageScope scope) {
  auto c = std::make_unique<Command>();
  c->name = name;
  c->scope = scope;
  c->app = app.add_subcommand(name, help);
  c->opts["config"] = c->app->add_option("--config", c->config_path, "JSON run config; flags override it");
  c->opts["out-dir"] = c->app->add_option("-o,--out-dir", c->out_dir,
                                          fmt::format("output directory (default ${} or {})", kOutputDirEnv,
                                                      kDefaultOutputDir));
  c->opts["seed"] = c->app->add_option("--seed", c->seed, "random seed");
  c->opts["block-size"] = c->app->add_option("--block-size", c->block_size, "elements per scale block");
  if (scope != StageScope::none) {
    c->opts["steps"] = c->app->add_option("--steps", c->steps, "optimizer steps");
    c->opts["lr"] = c->app->add_option("--lr", c->lr, "Adam learning rate");
    c->opts["lambda-round"] = c->app->add_option("--lambda-round", c->lambda_round, "rounding regularizer weight");
    c->opts["beta-start"] = c->app->add_option("--beta-start", c->beta_start, "initial sigmoid temperature");
    c->opts["beta-end"] = c->app->add_option("--beta-end", c->beta_end, "final sigmoid temperature");
  }
  if (scope == StageScope::stage2) {
    c->opts["lambda-kl"] = c->app->add_option("--lambda-kl", c->lambda_kl, "KL term weight");
    c->opts["tau"] = c->app->add_option("--tau", c->tau, "softmax temperature");
  }
  cmds.push_back(std::move(c));
  return *cmds.back();
}

ConfigOverrides overrides_of(const Command& c) {
  ConfigOverrides o;
  if (c.given("seed")) o.seed = c.seed;
  if (c.given("block-size")) o.block_size = c.block_size;
  if (c.given("steps")) o.steps = c.steps;
  if (c.given("lr")) o.lr = c.lr;
  if (c.given("lambda-round")) o.lambda_round = c.lambda_round;
  if (c.given("lambda-kl")) o.lambda_kl = c.lambda_kl;
  if (c.given("tau")) o.tau = c.tau;
  if (c.given("beta-start")) o.beta_start = c.beta_start;
  if (c.given("beta-end")) o.beta_end = c.beta_end;
  return o;
}

// ---------------------------------------------------------------------------
// Run context: resolved config, output directory and the input guard.

class Run {
 public:
  Run(const Command& c, RunConfig cfg) : cfg_(std::move(cfg)) {
    out_dir_ = c.out_dir.empty() ? default_output_dir() : fs::path(c.out_dir);
    for (const auto& [flag, opt] : c.opts) {
      if (opt->count() == 0) continue;
      static const std::set<std::string> kPathFlags = {"weights", "model", "calib", "rv-dir", "rv",
                                                       "packed", "reference", "packed-manifest", "config"};
      if (kPathFlags.contains(flag)) cfg_.paths[flag] = opt->as<std::string>();
    }
    cfg_.paths["out-dir"] = out_dir_.string();
    std::error_code ec;
    fs::create_directories(out_dir_, ec);
    if (ec || !fs::is_directory(out_dir_))
      throw io::IoError(io::ErrorKind::file, "cannot create output directory '" + out_dir_.string() + "'");
  }

  const RunConfig& cfg() const { return cfg_; }

  void add_input(const fs::path& p) { inputs_.push_back(p); }

  fs::path output(const std::string& name) const {
    const fs::path p = out_dir_ / name;
    std::error_code ec;
    for (const auto& in : inputs_)
      if (fs::exists(p, ec) && fs::equivalent(p, in, ec))
        throw io::IoError(io::ErrorKind::file, "refusing to overwrite input file '" + in.string() + "'");
    return p;
  }

  /// Fails before any work is done if a planned output would replace an input.
  void reserve(const std::vector<std::string>& names) const {
    output("config.json");
    for (const auto& n : names) output(n);
  }

  void write_config() const { io::write_text_atomic(output("config.json"), dump_config(cfg_)); }

 private:
  RunConfig cfg_;
  fs::path out_dir_;
  std::vector<fs::path> inputs_;
};

RunConfig resolve_config(const Command& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  apply_overrides(cfg, overrides_of(c), c.scope);
  if (c.given("max-n")) cfg.oracle.max_n = c.max_n;
  if (c.given("samples")) cfg.study.samples = c.samples;
  cfg.command = c.name;
  cfg.paths.clear();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Shared helpers

Matrix load_matrix(Run& run, const std::string& path) {
  run.add_input(path);
  const Tensor t = io::load_tensor(path);
  if (t.shape.size() > 2) throw std::invalid_argument("'" + path + "' must be a 1-D or 2-D tensor");
  return to_matrix(t);
}

LinearLayer load_layer(Run& run, const std::string& path) {
  LinearLayer layer{fs::path(path).stem().string(), load_matrix(run, path)};
  layer.validate();
  return layer;
}

Matrix load_calib(Run& run, const std::string& path, std::size_t in_dim) {
  Matrix x = load_matrix(run, path);
  if (x.cols != in_dim)
    throw std::invalid_argument(fmt::format("calibration data has {} features, layer expects {}", x.cols, in_dim));
  return x;
}

double weight_mse(const Matrix& w, std::span<const double> wq) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.data.size(); ++i) s += (w.data[i] - wq[i]) * (w.data[i] - wq[i]);
  return s / static_cast<double>(w.data.size());
}

/// Output MSE per element of X W^T, with activations quantized as in Stage 1.
double output_mse(const LinearLayer& layer, const Matrix& x, std::span<const double> wq, std::size_t bs) {
  const CalibBatch batch = CalibBatch::from_inputs(x, bs);
  return reconstruction_mse(layer, std::span(&batch, 1), wq) / static_cast<double>(x.rows * layer.out_dim());
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw UsageError(msg);
}

void write_stage1_trace(const fs::path& p, const std::vector<Stage1TraceRow>& trace) {
  std::string s = "step,mse_term,reg_term,beta,total\n";
  for (const auto& r : trace)
    s += fmt::format("{},{},{},{},{}\n", r.step, r.mse_term, r.reg_term, r.beta, r.total);
  io::write_text_atomic(p, s);
}

void write_stage2_trace(const fs::path& p, const std::vector<Stage2TraceRow>& trace) {
  std::string s = "step,kl,mse,round,beta,total\n";
  for (const auto& r : trace)
    s += fmt::format("{},{},{},{},{},{}\n", r.step, r.kl, r.mse, r.round, r.beta, r.total);
  io::write_text_atomic(p, s);
}

struct ManifestEntry {
  std::string name;
  std::string file;
  Shape shape;
};

json packed_manifest_json(const std::vector<ManifestEntry>& layers) {
  json arr = json::array();
  for (const auto& e : layers) arr.push_back({{"name", e.name}, {"packed", e.file}, {"shape", e.shape}});
  return {{"format", "faar-packed"}, {"layers", arr}};
}

std::vector<std::pair<std::string, fs::path>> load_packed_manifest(Run& run, const fs::path& path) {
  run.add_input(path);
  json j;
  try {
    const auto bytes = io::read_file(path);
    j = json::parse(bytes.begin(), bytes.end());
    if (j.at("format") != "faar-packed") throw io::IoError(io::ErrorKind::malformed_header, "not a packed manifest");
    std::vector<std::pair<std::string, fs::path>> out;
    for (const auto& l : j.at("layers")) {
      fs::path p = l.at("packed").get<std::string>();
      if (p.is_relative()) p = path.parent_path() / p;
      run.add_input(p);
      out.emplace_back(l.at("name").get<std::string>(), p);
    }
    return out;
  } catch (const json::exception& e) {
    throw io::IoError(io::ErrorKind::malformed_header, "'" + path.string() + "': " + e.what());
  }
}

ModelFiles load_model_for(Run& run, const std::string& path) {
  run.add_input(path);
  ModelFiles m = load_model(path);
  for (const auto& p : m.weight_paths) run.add_input(p);
  return m;
}

/// Rounding variables whose hardened weights are exactly the dequantized q.
RoundingVars exact_vars(const nvfp4::QuantizedTensor& q) {
  RoundingVars rv = init_rounding_vars(nvfp4::dequantize(q), q.scales);
  std::fill(rv.v.begin(), rv.v.end(), 0.0);
  return rv;
}

/// Loads a checkpoint and checks it was built from `layer`'s weights.
io::RoundingCheckpoint load_checkpoint_for(Run& run, const fs::path& path, const LinearLayer& layer) {
  run.add_input(path);
  io::RoundingCheckpoint ck = io::load_rounding_vars(path);
  run.add_input(ck.source);
  const RoundingVars ref = init_rounding_vars(to_tensor(layer.weights), ck.rv.scales);
  if (ck.rv.shape != ref.shape || ck.rv.lower != ref.lower || ck.rv.sign != ref.sign)
    throw std::invalid_argument(
        fmt::format("checkpoint '{}' was not built from layer '{}'", path.string(), layer.name));
  return ck;
}

json export_layer(Run& run, const std::string& name, const RoundingVars& rv, std::size_t& violations) {
  const Hardened h = harden(rv);
  const nvfp4::QuantizedTensor q = to_quantized(rv, h.decisions);
  const io::ExportCheck chk = io::check_export(q);
  std::size_t interval = 0;
  try {
    if (decisions_from_codes(rv, q) != h.decisions) ++interval;
  } catch (const std::invalid_argument&) {
    ++interval;
  }
  violations += chk.total() + interval;
  const std::string file = name + ".nvf4";
  io::write_nvfp4(q, run.output(file));
  return {{"name", name},
          {"packed", file},
          {"node_violations", chk.node_violations},
          {"reencode_violations", chk.reencode_violations},
          {"scale_violations", chk.scale_violations},
          {"interval_violations", interval},
          {"roundtrip_ok", chk.roundtrip_ok}};
}

Matrix gaussian(std::size_t rows, std::size_t cols, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sd);
  Matrix m(rows, cols);
  for (double& x : m.data) x = dist(rng);
  return m;
}

// ---------------------------------------------------------------------------
// Subcommands. Each returns the JSON summary printed on stdout.

json cmd_quantize_rtn(Run& run, const Command& c) {
  require(c.weights.empty() != c.model.empty(), "quantize-rtn needs exactly one of --weights or --model");
  const std::size_t bs = run.cfg().block_size;
  std::vector<LinearLayer> layers;
  if (!c.weights.empty()) {
    layers.push_back(load_layer(run, c.weights));
  } else {
    layers = load_model_for(run, c.model).net.layers;
  }
  std::vector<std::string> planned = {"manifest.json"};
  for (const auto& layer : layers) planned.push_back(layer.name + ".nvf4");
  run.reserve(planned);
  json rows = json::array();
  std::vector<ManifestEntry> manifest;
  for (const auto& layer : layers) {
    const Tensor w = to_tensor(layer.weights);
    const auto q = nvfp4::quantize_rtn(w, nvfp4::compute_scales(w.values, bs));
    const std::string file = layer.name + ".nvf4";
    io::write_nvfp4(q, run.output(file));
    manifest.push_back({layer.name, file, q.shape});
    rows.push_back({{"name", layer.name},
                    {"packed", file},
                    {"weight_mse", weight_mse(layer.weights, nvfp4::dequantize(q).values)}});
  }
  if (!c.model.empty())
    io::write_text_atomic(run.output("manifest.json"), packed_manifest_json(manifest).dump(2) + "\n");
  return {{"command", c.name}, {"layers", rows}};
}

json cmd_stage1(Run& run, const Command& c) {
  require(c.weights.empty() != c.model.empty(), "faar-stage1 needs exactly one of --weights or --model");
  require(!c.calib.empty(), "faar-stage1 needs --calib");
  const Stage1Config cfg = run.cfg().stage1_config();

  std::vector<LinearLayer> layers;
  std::vector<fs::path> sources;
  std::vector<Stage1Result> results;
  std::vector<Matrix> inputs;
  if (!c.weights.empty()) {
    layers.push_back(load_layer(run, c.weights));
    sources.push_back(fs::absolute(c.weights));
    inputs.push_back(load_calib(run, c.calib, layers[0].in_dim()));
    run.reserve({layers[0].name + ".rv", layers[0].name + ".trace.csv"});
    const CalibBatch batch = CalibBatch::from_inputs(inputs[0], cfg.block_size);
    results.push_back(optimize_layer(layers[0], std::span(&batch, 1), cfg));
  } else {
    const ModelFiles m = load_model_for(run, c.model);
    layers = m.net.layers;
    for (const auto& p : m.weight_paths) sources.push_back(fs::absolute(p));
    const Matrix x = load_calib(run, c.calib, m.net.input_dim());
    std::vector<std::string> planned;
    for (const auto& layer : layers) {
      planned.push_back(layer.name + ".rv");
      planned.push_back(layer.name + ".trace.csv");
    }
    run.reserve(planned);
    inputs = forward(m.net, x, 1.0).inputs;
    results = calibrate_layers(m.net, x, cfg);
  }

  json rows = json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LinearLayer& layer = layers[l];
    const Stage1Result& r = results[l];
    io::save_rounding_vars({layer.name, sources[l], r.rv, cfg.beta_end}, run.output(layer.name + ".rv"));
    write_stage1_trace(run.output(layer.name + ".trace.csv"), r.trace);
    const CalibBatch batch = CalibBatch::from_inputs(inputs[l], cfg.block_size);
    const auto rtn = nvfp4::dequantize(nvfp4::quantize_rtn(to_tensor(layer.weights), r.rv.scales));
    rows.push_back({{"name", layer.name},
                    {"checkpoint", layer.name + ".rv"},
                    {"initial_total", r.trace.front().total},
                    {"final_total", r.trace.back().total},
                    {"rtn_mse", reconstruction_mse(layer, std::span(&batch, 1), rtn.values)},
                    {"faar_mse", reconstruction_mse(layer, std::span(&batch, 1), harden(r.rv).weights.values)}});
  }
  return {{"command", c.name}, {"layers", rows}};
}

json cmd_stage2(Run& run, const Command& c) {
  require(!c.model.empty() && !c.calib.empty() && !c.rv_dir.empty(),
          "faar-stage2 needs --model, --calib and --rv-dir");
  const ModelFiles m = load_model_for(run, c.model);
  const Matrix x = load_calib(run, c.calib, m.net.input_dim());
  std::vector<RoundingVars> rvs;
  std::vector<fs::path> sources;
  double stage1_beta = 0.0;
  for (std::size_t l = 0; l < m.net.layers.size(); ++l) {
    const auto& layer = m.net.layers[l];
    auto ck = load_checkpoint_for(run, fs::path(c.rv_dir) / (layer.name + ".rv"), layer);
    if (l == 0) stage1_beta = ck.beta;
    else if (ck.beta != stage1_beta)
      throw std::invalid_argument("rounding checkpoints were trained to different final temperatures");
    rvs.push_back(std::move(ck.rv));
    sources.push_back(ck.source);
  }
  std::vector<std::string> planned = {"stage2.trace.csv"};
  for (const auto& layer : m.net.layers) planned.push_back(layer.name + ".rv");
  run.reserve(planned);

  const Stage2Config cfg = run.cfg().stage2_config();
  const double kl_before = hardened_kl(m.net, x, rvs, cfg.tau, cfg.block_size);
  const Stage2Result r = align_model(m.net, rvs, x, cfg, stage1_beta);
  const double kl_after = hardened_kl(m.net, x, r.rvs, cfg.tau, cfg.block_size);

  json rows = json::array();
  for (std::size_t l = 0; l < m.net.layers.size(); ++l) {
    const auto& name = m.net.layers[l].name;
    io::save_rounding_vars({name, sources[l], r.rvs[l], r.trace.back().beta}, run.output(name + ".rv"));
    rows.push_back({{"name", name}, {"checkpoint", name + ".rv"}});
  }
  write_stage2_trace(run.output("stage2.trace.csv"), r.trace);
  return {{"command", c.name},
          {"layers", rows},
          {"initial_total", r.trace.front().total},
          {"final_total", r.trace.back().total},
          {"hardened_kl_before", kl_before},
          {"hardened_kl_after", kl_after}};
}

json cmd_harden(Run& run, const Command& c) {
  const bool single = !c.rv.empty();
  require(single != (!c.model.empty() || !c.rv_dir.empty()), "harden needs --rv, or --model with --rv-dir");
  std::vector<std::pair<std::string, RoundingVars>> items;
  if (single) {
    run.add_input(c.rv);
    auto ck = io::load_rounding_vars(c.rv);
    run.add_input(ck.source);
    items.emplace_back(ck.layer, std::move(ck.rv));
  } else {
    require(!c.model.empty() && !c.rv_dir.empty(), "harden needs both --model and --rv-dir");
    const ModelFiles m = load_model_for(run, c.model);
    for (const auto& layer : m.net.layers) {
      auto ck = load_checkpoint_for(run, fs::path(c.rv_dir) / (layer.name + ".rv"), layer);
      items.emplace_back(layer.name, std::move(ck.rv));
    }
  }

  std::vector<std::string> planned = {"manifest.json", "harden.json"};
  for (const auto& item : items) planned.push_back(item.first + ".nvf4");
  run.reserve(planned);

  std::size_t violations = 0;
  json rows = json::array();
  std::vector<ManifestEntry> manifest;
  for (const auto& [name, rv] : items) {
    rows.push_back(export_layer(run, name, rv, violations));
    manifest.push_back({name, name + ".nvf4", rv.shape});
  }
  if (!single) io::write_text_atomic(run.output("manifest.json"), packed_manifest_json(manifest).dump(2) + "\n");
  const json report = {{"command", c.name}, {"layers", rows}, {"violations", violations}};
  io::write_text_atomic(run.output("harden.json"), report.dump(2) + "\n");
  if (violations > 0)
    throw ValidationError(fmt::format("{} export checks failed, see harden.json", violations));
  return report;
}

json cmd_oracle(Run& run, const Command& c) {
  require(!c.weights.empty() && !c.calib.empty(), "oracle needs --weights and --calib");
  const LinearLayer layer = load_layer(run, c.weights);
  const Matrix x = load_calib(run, c.calib, layer.in_dim());
  run.reserve({layer.name + ".oracle.nvf4", "oracle.json"});
  const std::size_t bs = run.cfg().block_size;
  const CalibBatch batch = CalibBatch::from_inputs(x, bs);
  const auto scales = nvfp4::compute_scales(layer.weights.data, bs);
  const BruteForceResult r = brute_force_optimal(layer, std::span(&batch, 1), scales, run.cfg().oracle.max_n);
  const RoundingVars rv = init_rounding_vars(to_tensor(layer.weights), scales);
  const auto rtn = nvfp4::dequantize(nvfp4::quantize_rtn(to_tensor(layer.weights), scales));
  io::write_nvfp4(to_quantized(rv, r.decisions), run.output(layer.name + ".oracle.nvf4"));
  json report = {{"command", c.name},
                 {"layer", layer.name},
                 {"free_weights", r.free_weights},
                 {"assignments", r.assignments},
                 {"optimal_loss", r.loss},
                 {"rtn_loss", reconstruction_mse(layer, std::span(&batch, 1), rtn.values)},
                 {"decisions", r.decisions},
                 {"packed", layer.name + ".oracle.nvf4"}};
  io::write_text_atomic(run.output("oracle.json"), report.dump(2) + "\n");
  return report;
}

json cmd_study(Run& run, const Command& c, std::ostream& out) {
  require(c.weights.empty() == c.calib.empty(), "study takes --weights and --calib together, or neither");
  const RunConfig& cfg = run.cfg();
  LinearLayer layer;
  Matrix x;
  if (!c.weights.empty()) {
    layer = load_layer(run, c.weights);
    x = load_calib(run, c.calib, layer.in_dim());
  } else {
    layer = {"random", gaussian(cfg.study.rows, cfg.study.cols, 0.125, cfg.seed)};
    x = gaussian(cfg.study.batch, cfg.study.cols, 1.0, cfg.seed ^ 0x9E3779B97F4A7C15ull);
  }
  run.reserve({"study.json", "study.txt"});
  const CalibBatch batch = CalibBatch::from_inputs(x, cfg.block_size);
  const RoundingReport report = compare_rounding_study(layer, std::span(&batch, 1), cfg.study.samples, cfg.seed,
                                                       cfg.block_size, cfg.oracle.max_n);
  json j = to_json(report);
  j["layer"] = layer.name;
  io::write_text_atomic(run.output("study.json"), j.dump(2) + "\n");
  const std::string table = format_table(report);
  io::write_text_atomic(run.output("study.txt"), table);
  out << table;
  return json();
}

json cmd_eval_recon(Run& run, const Command& c) {
  const std::size_t bs = run.cfg().block_size;
  if (!c.packed_manifest.empty()) {
    require(c.packed.empty() && c.reference.empty() && !c.model.empty() && !c.calib.empty(),
            "eval-recon with --packed-manifest needs --model and --calib");
    const ModelFiles m = load_model_for(run, c.model);
    const auto files = load_packed_manifest(run, c.packed_manifest);
    const Matrix x = load_calib(run, c.calib, m.net.input_dim());
    if (files.size() != m.net.layers.size())
      throw std::invalid_argument("packed manifest and model have different layer counts");
    std::vector<RoundingVars> rvs;
    json rows = json::array();
    for (std::size_t l = 0; l < files.size(); ++l) {
      const auto& layer = m.net.layers[l];
      if (files[l].first != layer.name)
        throw std::invalid_argument(fmt::format("packed layer '{}' does not match model layer '{}'",
                                                files[l].first, layer.name));
      const auto q = io::read_nvfp4(files[l].second);
      if (q.shape != layer.weights.shape())
        throw std::invalid_argument("packed tensor '" + layer.name + "' has the wrong shape");
      rvs.push_back(exact_vars(q));
      rows.push_back({{"name", layer.name}, {"weight_mse", weight_mse(layer.weights, nvfp4::dequantize(q).values)}});
    }
    const double tau = run.cfg().stage2.tau;
    const ForwardPass teacher = forward(m.net, x, tau);
    const ForwardPass student = forward(m.net, x, tau, QuantizedMode{rvs, 0.0, true, true, bs});
    double mse = 0.0;
    for (std::size_t i = 0; i < teacher.h_last.data.size(); ++i) {
      const double d = teacher.h_last.data[i] - student.h_last.data[i];
      mse += d * d;
    }
    mse /= static_cast<double>(teacher.h_last.data.size());
    return {{"command", c.name},
            {"metric", "hidden_mse"},
            {"mse", mse},
            {"kl", kl_loss(teacher.probs, student.probs)},
            {"layers", rows}};
  }

  require(!c.packed.empty() && !c.reference.empty(), "eval-recon needs --packed and --reference");
  run.add_input(c.packed);
  const auto q = io::read_nvfp4(c.packed);
  const LinearLayer layer = load_layer(run, c.reference);
  if (element_count(q.shape) != layer.weights.size())
    throw std::invalid_argument("packed tensor and reference have different sizes");
  const Tensor wq = nvfp4::dequantize(q);
  json j = {{"command", c.name}, {"weight_mse", weight_mse(layer.weights, wq.values)}};
  if (c.calib.empty()) {
    j["metric"] = "weight_mse";
    j["mse"] = j["weight_mse"];
  } else {
    const Matrix x = load_calib(run, c.calib, layer.in_dim());
    j["metric"] = "output_mse";
    j["mse"] = output_mse(layer, x, wq.values, bs);
  }
  return j;
}

json cmd_make_demo(Run& run, const Command& c) {
  const RunConfig& cfg = run.cfg();
  const MicroNet net = MicroNet::random(cfg.micronet.dims, cfg.seed);
  json layers = json::array();
  for (const auto& layer : net.layers) {
    const std::string file = layer.name + ".tensor";
    io::save_tensor(to_tensor(layer.weights), run.output(file), layer.name);
    layers.push_back({{"name", layer.name}, {"weights", file}});
  }
  io::write_text_atomic(run.output("model.json"),
                        json({{"format", "faar-micronet"}, {"layers", layers}}).dump(2) + "\n");
  const Matrix x = gaussian(cfg.micronet.samples, net.input_dim(), 1.0, cfg.seed + 1);
  io::save_tensor(to_tensor(x), run.output("calib.tensor"), "calib");
  return {{"command", c.name}, {"model", "model.json"}, {"calib", "calib.tensor"}, {"dims", cfg.micronet.dims}};
}

int report_error(std::ostream& err, int code, const std::string& kind, const std::string& message,
                 json extra = json::object()) {
  json j = {{"error", kind}, {"message", message}, {"exit_code", code}};
  j.update(extra);
  err << j.dump() << "\n";
  return code;
}

}  // namespace

ModelFiles load_model(const fs::path& manifest) {
  ModelFiles m;
  json j;
  try {
    const auto bytes = io::read_file(manifest);
    j = json::parse(bytes.begin(), bytes.end());
    if (j.at("format") != "faar-micronet")
      throw io::IoError(io::ErrorKind::malformed_header, "'" + manifest.string() + "' is not a model manifest");
    for (const auto& l : j.at("layers")) {
      fs::path p = l.at("weights").get<std::string>();
      if (p.is_relative()) p = manifest.parent_path() / p;
      const Tensor t = io::load_tensor(p);
      if (t.shape.size() != 2) throw std::invalid_argument("layer weights must be 2-D: '" + p.string() + "'");
      m.net.layers.push_back({l.at("name").get<std::string>(), to_matrix(t)});
      m.weight_paths.push_back(p);
    }
  } catch (const json::exception& e) {
    throw io::IoError(io::ErrorKind::malformed_header, "'" + manifest.string() + "': " + e.what());
  }
  m.net.validate();
  for (const auto& layer : m.net.layers) layer.validate();
  return m;
}

int cli_dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"NVFP4 format-aware adaptive rounding toolkit", "faar"};
  app.require_subcommand(1, 1);

  std::vector<std::unique_ptr<Command>> cmds;
  auto& rtn = add_command(cmds, app, "quantize-rtn", "round-to-nearest NVFP4 export", StageScope::none);
  rtn.path_flag("weights", rtn.weights, "weight tensor");
  rtn.path_flag("model", rtn.model, "model manifest");

  auto& s1 = add_command(cmds, app, "faar-stage1", "layer-wise rounding optimization", StageScope::stage1);
  s1.path_flag("weights", s1.weights, "weight tensor");
  s1.path_flag("model", s1.model, "model manifest");
  s1.path_flag("calib", s1.calib, "calibration inputs [rows x in]");

  auto& s2 = add_command(cmds, app, "faar-stage2", "whole-network alignment", StageScope::stage2);
  s2.path_flag("model", s2.model, "model manifest");
  s2.path_flag("calib", s2.calib, "network inputs [rows x in]");
  s2.path_flag("rv-dir", s2.rv_dir, "directory of Stage 1 checkpoints");

  auto& hd = add_command(cmds, app, "harden", "export rounding checkpoints as packed NVFP4", StageScope::none);
  hd.path_flag("rv", hd.rv, "single rounding checkpoint");
  hd.path_flag("model", hd.model, "model manifest");
  hd.path_flag("rv-dir", hd.rv_dir, "directory of checkpoints");

  auto& orc = add_command(cmds, app, "oracle", "exhaustive optimal rounding of a small layer", StageScope::none);
  orc.path_flag("weights", orc.weights, "weight tensor");
  orc.path_flag("calib", orc.calib, "calibration inputs");
  orc.opts["max-n"] = orc.app->add_option("--max-n", orc.max_n, "largest free-weight count to enumerate");

  auto& st = add_command(cmds, app, "study", "compare rounding strategies on one layer", StageScope::none);
  st.path_flag("weights", st.weights, "weight tensor (default: random layer)");
  st.path_flag("calib", st.calib, "calibration inputs");
  st.opts["samples"] = st.app->add_option("--samples", st.samples, "stochastic rounding draws");
  st.opts["max-n"] = st.app->add_option("--max-n", st.max_n, "largest layer the optimum is computed for");

  auto& ev = add_command(cmds, app, "eval-recon", "reconstruction error of packed weights", StageScope::none);
  ev.path_flag("packed", ev.packed, "packed NVFP4 tensor");
  ev.path_flag("reference", ev.reference, "full-precision weight tensor");
  ev.path_flag("calib", ev.calib, "calibration inputs");
  ev.path_flag("packed-manifest", ev.packed_manifest, "manifest written by harden or quantize-rtn");
  ev.path_flag("model", ev.model, "model manifest");

  add_command(cmds, app, "make-demo", "write the bundled demo network and calibration set", StageScope::none);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::ostringstream dummy;
      return app.exit(e, out, dummy);
    }
    return report_error(err, kUsage, "usage", e.what());
  }

  Command* cmd = nullptr;
  for (auto& c : cmds)
    if (c->app->parsed()) cmd = c.get();
  if (cmd == nullptr) return report_error(err, kUsage, "usage", "no subcommand given");

  try {
    Run run(*cmd, resolve_config(*cmd));
    json summary;
    const std::string& n = cmd->name;
    if (n == "quantize-rtn") summary = cmd_quantize_rtn(run, *cmd);
    else if (n == "faar-stage1") summary = cmd_stage1(run, *cmd);
    else if (n == "faar-stage2") summary = cmd_stage2(run, *cmd);
    else if (n == "harden") summary = cmd_harden(run, *cmd);
    else if (n == "oracle") summary = cmd_oracle(run, *cmd);
    else if (n == "study") summary = cmd_study(run, *cmd, out);
    else if (n == "eval-recon") summary = cmd_eval_recon(run, *cmd);
    else summary = cmd_make_demo(run, *cmd);
    run.write_config();
    if (!summary.is_null()) out << summary.dump(2) << "\n";
    return kOk;
  } catch (const UsageError& e) {
    return report_error(err, kUsage, "usage", e.what());
  } catch (const ConfigError& e) {
    return report_error(err, kConfig, "config", e.what());
  } catch (const io::IoError& e) {
    return report_error(err, kIo, "io", e.what(), {{"io_kind", io::to_string(e.kind())}});
  } catch (const ValidationError& e) {
    return report_error(err, kValidation, "validation", e.what());
  } catch (const std::invalid_argument& e) {
    return report_error(err, kInvalidInput, "invalid_input", e.what());
  } catch (const std::runtime_error& e) {
    return report_error(err, kNumerical, "numerical", e.what());
  } catch (const std::exception& e) {
    return report_error(err, kInternal, "internal", e.what());
  }
}

}  // namespace faar::cli
