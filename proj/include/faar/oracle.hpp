// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Ground truth and baselines for rounding decisions: exhaustive search over
// all lower/upper assignments of a small layer, stochastic rounding, and a
// side-by-side comparison of rounding strategies on one layer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "faar/nvfp4.hpp"
#include "faar/rounding.hpp"
#include "faar/stage1.hpp"

namespace faar {

inline constexpr std::size_t kDefaultMaxBruteForce = 20;

enum class Execution { serial, parallel };

struct BruteForceResult {
  Decisions decisions;  // full-length; frozen elements are 0
  double loss = 0.0;    // reconstruction MSE at the optimum
  std::size_t free_weights = 0;
  std::uint64_t assignments = 0;
};

/// Exhaustive minimization of the reconstruction MSE over all 2^N choices of
/// the N non-frozen weights. Ties go to the lexicographically smallest
/// decision vector. Throws std::invalid_argument when N > max_n.
BruteForceResult brute_force_optimal(const LinearLayer& layer, std::span<const CalibBatch> batches,
                                     const nvfp4::ScaleSet& scales,
                                     std::size_t max_n = kDefaultMaxBruteForce,
                                     Execution exec = Execution::parallel);

/// Rounds each element up with probability equal to its relative position
/// inside its bracketing interval, so the expected normalized value is the
/// clamped input.
nvfp4::QuantizedTensor stochastic_round_sample(const Tensor& w, const nvfp4::ScaleSet& scales,
                                               std::mt19937_64& rng);

struct StrategyRow {
  std::string label;
  double mean = 0.0;
  double std = 0.0;
  double min = 0.0;
  std::size_t samples = 1;
};

struct RoundingReport {
  std::vector<StrategyRow> rows;  // baseline, lower, upper, stochastic, stochastic-best, [optimal]
  std::vector<double> stochastic_losses;
  std::size_t stochastic_better_than_rtn = 0;
  std::size_t free_weights = 0;
  bool optimum_computed = false;
  std::vector<std::uint64_t> seeds;

  const StrategyRow& row(const std::string& label) const;
  bool has_row(const std::string& label) const;
};

/// Reconstruction loss of RTN, all-lower, all-upper, n_samples stochastic
/// draws and, when the layer has at most max_n free weights, the optimum.
RoundingReport compare_rounding_study(const LinearLayer& layer, std::span<const CalibBatch> batches,
                                      std::size_t n_samples, std::uint64_t seed,
                                      std::size_t block_size = nvfp4::kDefaultBlockSize,
                                      std::size_t max_n = kDefaultMaxBruteForce);

nlohmann::json to_json(const RoundingReport& report);

/// Aligned text table, one row per strategy.
std::string format_table(const RoundingReport& report);

}  // namespace faar
