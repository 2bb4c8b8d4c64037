// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include "faar/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include <fmt/format.h>

namespace faar {

using nlohmann::json;

namespace {

class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("config: '{}' must be an object", where_));
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    out = convert<T>(*it, key);
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.contains(key)) throw ConfigError(fmt::format("config: unknown key '{}'", path(key)));
  }

 private:
  template <typename T>
  T convert(const json& v, const std::string& key) const {
    const auto bad = [&](const char* want) {
      return ConfigError(fmt::format("config: '{}' must be {}", path(key), want));
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw bad("a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) throw bad("a nonnegative integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw bad("a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw bad("a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!v.is_array()) throw bad("an array of nonnegative integers");
      T out;
      for (const auto& e : v) {
        if (!e.is_number_unsigned()) throw bad("an array of nonnegative integers");
        out.push_back(e.get<std::size_t>());
      }
      return out;
    } else if constexpr (std::is_same_v<T, std::map<std::string, std::string>>) {
      if (!v.is_object()) throw bad("an object of strings");
      T out;
      for (const auto& [k, e] : v.items()) {
        if (!e.is_string()) throw bad("an object of strings");
        out[k] = e.template get<std::string>();
      }
      return out;
    }
  }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_adam(Section& s, AdamParams& a) {
  s.read("lr", a.learning_rate);
  s.read("beta1", a.beta1);
  s.read("beta2", a.beta2);
  s.read("eps", a.epsilon);
}

json adam_json(const AdamParams& a) {
  return {{"lr", a.learning_rate}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.epsilon}};
}

const char* beta_mode_name(BetaMode m) { return m == BetaMode::restart ? "restart" : "continue"; }

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("config: " + msg);
}

}  // namespace

Stage1Config RunConfig::stage1_config() const {
  Stage1Config c;
  c.steps = stage1.steps;
  c.adam = stage1.adam;
  c.lambda_round = stage1.lambda_round;
  c.beta_start = stage1.beta_start;
  c.beta_end = stage1.beta_end;
  c.block_size = block_size;
  c.seed = seed;
  return c;
}

Stage2Config RunConfig::stage2_config() const {
  Stage2Config c;
  c.steps = stage2.steps;
  c.adam = stage2.adam;
  c.lambda_kl = stage2.lambda_kl;
  c.lambda_round = stage2.lambda_round;
  c.tau = stage2.tau;
  c.beta_mode = stage2.beta_mode;
  c.beta_start = stage2.beta_start;
  c.beta_end = stage2.beta_end;
  c.batch_size = stage2.batch_size;
  c.quantize_activations = stage2.quantize_activations;
  c.block_size = block_size;
  c.seed = seed;
  return c;
}

void RunConfig::validate() const {
  check(block_size >= 1, "block_size must be >= 1");
  for (const AdamParams* a : {&stage1.adam, &stage2.adam}) {
    check(a->learning_rate > 0.0, "learning rates must be > 0");
    check(a->beta1 >= 0.0 && a->beta1 < 1.0 && a->beta2 >= 0.0 && a->beta2 < 1.0,
          "Adam decay rates must lie in [0, 1)");
    check(a->epsilon > 0.0, "Adam eps must be > 0");
  }
  try {
    stage1_config().validate();
    stage2_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  check(micronet.dims.size() >= 3, "micronet.dims needs at least 3 entries");
  for (std::size_t d : micronet.dims) check(d >= 1, "micronet.dims entries must be >= 1");
  check(micronet.samples >= 1, "micronet.samples must be >= 1");
  check(oracle.max_n <= 62, "oracle.max_n must be <= 62");
  check(study.samples >= 1, "study.samples must be >= 1");
  check(study.rows >= 1 && study.cols >= 1 && study.batch >= 1, "study layer sizes must be >= 1");
}

RunConfig config_from_json(const json& j) {
  RunConfig cfg;
  Section top(j, "");
  top.read("command", cfg.command);
  top.read("seed", cfg.seed);
  top.read("block_size", cfg.block_size);
  if (const json* s1 = top.child("stage1")) {
    Section s(*s1, "stage1");
    s.read("steps", cfg.stage1.steps);
    read_adam(s, cfg.stage1.adam);
    s.read("lambda_round", cfg.stage1.lambda_round);
    s.read("beta_start", cfg.stage1.beta_start);
    s.read("beta_end", cfg.stage1.beta_end);
    s.finish();
  }
  if (const json* s2 = top.child("stage2")) {
    Section s(*s2, "stage2");
    s.read("steps", cfg.stage2.steps);
    read_adam(s, cfg.stage2.adam);
    s.read("lambda_kl", cfg.stage2.lambda_kl);
    s.read("lambda_round", cfg.stage2.lambda_round);
    s.read("tau", cfg.stage2.tau);
    std::string mode = beta_mode_name(cfg.stage2.beta_mode);
    s.read("beta_mode", mode);
    if (mode == "continue") cfg.stage2.beta_mode = BetaMode::continue_stage1;
    else if (mode == "restart") cfg.stage2.beta_mode = BetaMode::restart;
    else throw ConfigError("config: 'stage2.beta_mode' must be \"continue\" or \"restart\"");
    s.read("beta_start", cfg.stage2.beta_start);
    s.read("beta_end", cfg.stage2.beta_end);
    s.read("batch_size", cfg.stage2.batch_size);
    s.read("quantize_activations", cfg.stage2.quantize_activations);
    s.finish();
  }
  if (const json* m = top.child("micronet")) {
    Section s(*m, "micronet");
    s.read("dims", cfg.micronet.dims);
    s.read("samples", cfg.micronet.samples);
    s.finish();
  }
  if (const json* o = top.child("oracle")) {
    Section s(*o, "oracle");
    s.read("max_n", cfg.oracle.max_n);
    s.finish();
  }
  if (const json* st = top.child("study")) {
    Section s(*st, "study");
    s.read("samples", cfg.study.samples);
    s.read("rows", cfg.study.rows);
    s.read("cols", cfg.study.cols);
    s.read("batch", cfg.study.batch);
    s.finish();
  }
  top.read("paths", cfg.paths);
  top.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config: '{}' is not valid JSON: {}", path.string(), e.what()));
  }
  return config_from_json(j);
}

json to_json(const RunConfig& cfg) {
  json s1 = adam_json(cfg.stage1.adam);
  s1.update({{"steps", cfg.stage1.steps},
             {"lambda_round", cfg.stage1.lambda_round},
             {"beta_start", cfg.stage1.beta_start},
             {"beta_end", cfg.stage1.beta_end}});
  json s2 = adam_json(cfg.stage2.adam);
  s2.update({{"steps", cfg.stage2.steps},
             {"lambda_kl", cfg.stage2.lambda_kl},
             {"lambda_round", cfg.stage2.lambda_round},
             {"tau", cfg.stage2.tau},
             {"beta_mode", beta_mode_name(cfg.stage2.beta_mode)},
             {"beta_start", cfg.stage2.beta_start},
             {"beta_end", cfg.stage2.beta_end},
             {"batch_size", cfg.stage2.batch_size},
             {"quantize_activations", cfg.stage2.quantize_activations}});
  return {{"command", cfg.command},
          {"seed", cfg.seed},
          {"block_size", cfg.block_size},
          {"stage1", s1},
          {"stage2", s2},
          {"micronet", {{"dims", cfg.micronet.dims}, {"samples", cfg.micronet.samples}}},
          {"oracle", {{"max_n", cfg.oracle.max_n}}},
          {"study",
           {{"samples", cfg.study.samples},
            {"rows", cfg.study.rows},
            {"cols", cfg.study.cols},
            {"batch", cfg.study.batch}}},
          {"paths", cfg.paths}};
}

std::string dump_config(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

void apply_overrides(RunConfig& cfg, const ConfigOverrides& o, StageScope scope) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.block_size) cfg.block_size = *o.block_size;
  const bool stage_flag = o.steps || o.lr || o.lambda_round || o.beta_start || o.beta_end;
  if (scope == StageScope::none) {
    if (stage_flag || o.lambda_kl || o.tau)
      throw ConfigError("config: optimization flags only apply to faar-stage1 and faar-stage2");
    return;
  }
  if (scope == StageScope::stage1) {
    if (o.lambda_kl || o.tau) throw ConfigError("config: --lambda-kl and --tau only apply to faar-stage2");
    auto& s = cfg.stage1;
    if (o.steps) s.steps = *o.steps;
    if (o.lr) s.adam.learning_rate = *o.lr;
    if (o.lambda_round) s.lambda_round = *o.lambda_round;
    if (o.beta_start) s.beta_start = *o.beta_start;
    if (o.beta_end) s.beta_end = *o.beta_end;
    return;
  }
  auto& s = cfg.stage2;
  if (o.steps) s.steps = *o.steps;
  if (o.lr) s.adam.learning_rate = *o.lr;
  if (o.lambda_round) s.lambda_round = *o.lambda_round;
  if (o.lambda_kl) s.lambda_kl = *o.lambda_kl;
  if (o.tau) s.tau = *o.tau;
  if (o.beta_start) s.beta_start = *o.beta_start;
  if (o.beta_end) s.beta_end = *o.beta_end;
}

std::filesystem::path default_output_dir() {
  const char* env = std::getenv(kOutputDirEnv);
  if (env != nullptr && *env != '\0') return env;
  return kDefaultOutputDir;
}

}  // namespace faar
