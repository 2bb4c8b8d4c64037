// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include "faar/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "faar/kernels.hpp"

namespace faar {

namespace {

struct Candidate {
  std::uint64_t mask = 0;
  double loss = std::numeric_limits<double>::infinity();
};

class AssignmentSpace {
 public:
  AssignmentSpace(const RoundingVars& rv, const ReconstructionObjective& objective)
      : rv_(rv), objective_(objective) {
    for (std::size_t i = 0; i < rv.size(); ++i)
      if (!rv.frozen[i]) free_.push_back(i);
  }

  std::size_t free_count() const { return free_.size(); }

  // Bit (N-1-k) of mask selects free weight k, so numeric order of masks is
  // lexicographic order of decision vectors.
  Decisions decisions(std::uint64_t mask) const {
    Decisions d(rv_.size(), 0);
    const std::size_t n = free_.size();
    for (std::size_t k = 0; k < n; ++k) d[free_[k]] = (mask >> (n - 1 - k)) & 1u;
    return d;
  }

  double loss(std::uint64_t mask) const {
    return objective_.mse(hard_weights(rv_, decisions(mask)).values);
  }

  Candidate best_in(std::uint64_t begin, std::uint64_t end) const {
    Candidate best;
    for (std::uint64_t m = begin; m < end; ++m) {
      const double l = loss(m);
      if (l < best.loss) best = {m, l};
    }
    return best;
  }

 private:
  const RoundingVars& rv_;
  const ReconstructionObjective& objective_;
  std::vector<std::size_t> free_;
};

Candidate search_parallel(const AssignmentSpace& space, std::uint64_t total) {
  const std::uint64_t chunks =
      std::min<std::uint64_t>(total, static_cast<std::uint64_t>(kernels::max_threads()) * 8);
  std::vector<Candidate> partial(chunks);
  const auto nchunks = static_cast<std::int64_t>(chunks);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t c = 0; c < nchunks; ++c) {
    const std::uint64_t begin = total * static_cast<std::uint64_t>(c) / chunks;
    const std::uint64_t end = total * static_cast<std::uint64_t>(c + 1) / chunks;
    partial[c] = space.best_in(begin, end);
  }
  // Merging in chunk order with a strict comparison keeps the serial tie rule.
  Candidate best;
  for (const auto& p : partial)
    if (p.loss < best.loss) best = p;
  return best;
}

double mean_of(const std::vector<double>& xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

StrategyRow single(std::string label, double loss) { return {std::move(label), loss, 0.0, loss, 1}; }

}  // namespace

BruteForceResult brute_force_optimal(const LinearLayer& layer, std::span<const CalibBatch> batches,
                                     const nvfp4::ScaleSet& scales, std::size_t max_n,
                                     Execution exec) {
  layer.validate();
  const RoundingVars rv = init_rounding_vars(to_tensor(layer.weights), scales);
  const ReconstructionObjective objective(layer, batches);
  const AssignmentSpace space(rv, objective);

  const std::size_t n = space.free_count();
  if (n > max_n || n >= 63)
    throw std::invalid_argument(fmt::format(
        "brute_force_optimal: layer '{}' has {} free weights, exceeding max_n = {}", layer.name, n,
        max_n));

  const std::uint64_t total = std::uint64_t{1} << n;
  const Candidate best =
      exec == Execution::serial ? space.best_in(0, total) : search_parallel(space, total);
  return {space.decisions(best.mask), best.loss, n, total};
}

nvfp4::QuantizedTensor stochastic_round_sample(const Tensor& w, const nvfp4::ScaleSet& scales,
                                               std::mt19937_64& rng) {
  const RoundingVars rv = init_rounding_vars(w, scales);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Decisions d(rv.size(), 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (rv.frozen[i]) continue;
    d[i] = unit(rng) < rv.v[i];
  }
  return to_quantized(rv, d);
}

const StrategyRow& RoundingReport::row(const std::string& label) const {
  for (const auto& r : rows)
    if (r.label == label) return r;
  throw std::out_of_range("rounding report has no row '" + label + "'");
}

bool RoundingReport::has_row(const std::string& label) const {
  return std::any_of(rows.begin(), rows.end(), [&](const auto& r) { return r.label == label; });
}

RoundingReport compare_rounding_study(const LinearLayer& layer, std::span<const CalibBatch> batches,
                                      std::size_t n_samples, std::uint64_t seed,
                                      std::size_t block_size, std::size_t max_n) {
  if (n_samples == 0) throw std::invalid_argument("compare_rounding_study: n_samples must be >= 1");
  layer.validate();
  const Tensor w = to_tensor(layer.weights);
  const nvfp4::ScaleSet scales = nvfp4::compute_scales(w.values, block_size);
  const RoundingVars rv = init_rounding_vars(w, scales);
  const ReconstructionObjective objective(layer, batches);
  auto loss_of = [&](const Decisions& d) { return objective.mse(hard_weights(rv, d).values); };

  RoundingReport report;
  report.seeds = {seed};
  report.free_weights = rv.active_count();

  const double rtn = loss_of(decisions_from_codes(rv, nvfp4::quantize_rtn(w, scales)));
  report.rows.push_back(single("baseline", rtn));
  report.rows.push_back(single("lower", loss_of(Decisions(rv.size(), 0))));
  report.rows.push_back(single("upper", loss_of(Decisions(rv.size(), 1))));

  std::mt19937_64 rng(seed);
  report.stochastic_losses.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const auto q = stochastic_round_sample(w, scales, rng);
    const double l = loss_of(decisions_from_codes(rv, q));
    report.stochastic_losses.push_back(l);
    if (l < rtn) ++report.stochastic_better_than_rtn;
  }
  const auto& sl = report.stochastic_losses;
  const double mean = mean_of(sl);
  const double best = *std::min_element(sl.begin(), sl.end());
  report.rows.push_back({"stochastic", mean, sample_std(sl, mean), best, n_samples});
  report.rows.push_back(single("stochastic-best", best));

  if (report.free_weights <= max_n) {
    const BruteForceResult opt = brute_force_optimal(layer, batches, scales, max_n);
    report.rows.push_back(single("optimal", opt.loss));
    report.optimum_computed = true;
  }
  return report;
}

nlohmann::json to_json(const RoundingReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows)
    rows.push_back({{"strategy", r.label},
                    {"loss", r.mean},
                    {"mean", r.mean},
                    {"std", r.std},
                    {"min", r.min},
                    {"samples", r.samples}});
  return {{"loss_metric", "layer output reconstruction MSE (sum of squared errors)"},
          {"rows", rows},
          {"stochastic_losses", report.stochastic_losses},
          {"stochastic_better_than_rtn", report.stochastic_better_than_rtn},
          {"free_weights", report.free_weights},
          {"optimum_computed", report.optimum_computed},
          {"seeds", report.seeds}};
}

std::string format_table(const RoundingReport& report) {
  std::ostringstream out;
  out << fmt::format("{:<18} {:>28}\n", "Rounding scheme", "Reconstruction MSE");
  out << std::string(47, '-') << '\n';
  for (const auto& r : report.rows) {
    if (r.label == "stochastic") {
      out << fmt::format("{:<18} {:>28}\n", r.label, fmt::format("{:.6g} +/- {:.3g}", r.mean, r.std));
    } else {
      out << fmt::format("{:<18} {:>28.6g}\n", r.label, r.mean);
    }
  }
  out << fmt::format("{} of {} stochastic samples beat the baseline\n",
                     report.stochastic_better_than_rtn, report.stochastic_losses.size());
  return out.str();
}

}  // namespace faar
