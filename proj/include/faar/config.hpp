// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. One JSON document holds every tunable; parsing is strict
// (unknown keys and wrong types are errors) and to_json emits every field, so
// the config written beside a run's outputs re-parses to an equal value.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "faar/micronet.hpp"
#include "faar/oracle.hpp"
#include "faar/stage1.hpp"

namespace faar {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Environment variable naming the default output directory.
inline constexpr const char* kOutputDirEnv = "FAAR_OUTPUT_DIR";
inline constexpr const char* kDefaultOutputDir = "faar_out";

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::size_t block_size = nvfp4::kDefaultBlockSize;

  struct Stage1 {
    std::size_t steps = 500;
    AdamParams adam{};
    double lambda_round = 0.01;
    double beta_start = 4.0;
    double beta_end = 40.0;
    bool operator==(const Stage1&) const = default;
  } stage1;

  struct Stage2 {
    std::size_t steps = 2500;
    AdamParams adam{1e-4, 0.9, 0.999, 1e-8};
    double lambda_kl = 1.0;
    double lambda_round = 0.01;
    double tau = 1.0;
    BetaMode beta_mode = BetaMode::continue_stage1;
    double beta_start = 4.0;
    double beta_end = 40.0;
    std::size_t batch_size = 0;
    bool quantize_activations = true;
    bool operator==(const Stage2&) const = default;
  } stage2;

  struct MicroNetSection {
    std::vector<std::size_t> dims = kDefaultMicroNetDims;
    std::size_t samples = 256;  // demo calibration rows
    bool operator==(const MicroNetSection&) const = default;
  } micronet;

  struct OracleSection {
    std::size_t max_n = kDefaultMaxBruteForce;
    bool operator==(const OracleSection&) const = default;
  } oracle;

  struct StudySection {
    std::size_t samples = 100;
    std::size_t rows = 64;   // random layer used when no weights are given
    std::size_t cols = 64;
    std::size_t batch = 128;
    bool operator==(const StudySection&) const = default;
  } study;

  /// Input and output locations of the run, echoed for provenance.
  std::map<std::string, std::string> paths;

  Stage1Config stage1_config() const;
  Stage2Config stage2_config() const;

  /// Throws ConfigError on out-of-range values.
  void validate() const;

  bool operator==(const RunConfig&) const = default;
};

/// Strict parse. Missing keys keep their defaults.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);
/// Stable text form (sorted keys, round-trip precision).
std::string dump_config(const RunConfig& cfg);

/// Flag values that override a config file. Stage-scoped values go to the
/// stage the subcommand runs.
struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> block_size;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<double> lambda_round;
  std::optional<double> lambda_kl;
  std::optional<double> tau;
  std::optional<double> beta_start;
  std::optional<double> beta_end;
};

enum class StageScope { none, stage1, stage2 };

void apply_overrides(RunConfig& cfg, const ConfigOverrides& o, StageScope scope);

/// FAAR_OUTPUT_DIR if set and non-empty, else kDefaultOutputDir.
std::filesystem::path default_output_dir();

}  // namespace faar
