// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include "faar/rounding.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace faar {

std::size_t RoundingVars::active_count() const {
  return static_cast<std::size_t>(std::count(frozen.begin(), frozen.end(), 0));
}

void BetaSchedule::validate() const {
  if (!(beta_start > 0.0) || !(beta_end >= beta_start))
    throw std::invalid_argument("beta schedule requires beta_end >= beta_start > 0");
  if (total_steps == 0) throw std::invalid_argument("beta schedule requires total_steps >= 1");
}

RoundingVars init_rounding_vars(const Tensor& w, const nvfp4::ScaleSet& scales) {
  nvfp4::check_scales(scales, w.size());
  const std::size_t n = w.size();
  RoundingVars rv;
  rv.shape = w.shape;
  rv.scales = scales;
  rv.v.resize(n);
  rv.lower.resize(n);
  rv.upper.resize(n);
  rv.sign.resize(n);
  rv.scale_prod.resize(n);
  rv.frozen.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = w.values[i];
    if (!std::isfinite(x)) throw std::invalid_argument("init_rounding_vars: non-finite weight");
    const double sp = scales.scale_product(i);
    const double mag = std::min(std::abs(x) / sp, nvfp4::kMaxNode);
    const nvfp4::Interval iv = nvfp4::find_interval(mag);
    rv.lower[i] = iv.lower;
    rv.upper[i] = iv.upper;
    rv.sign[i] = x < 0.0 ? -1.0 : 1.0;
    rv.scale_prod[i] = sp;
    rv.frozen[i] = iv.span() == 0.0;
    rv.v[i] = rv.frozen[i] ? 0.0 : (mag - iv.lower) / iv.span();
  }
  return rv;
}

double soft_round(double v, double beta) { return 1.0 / (1.0 + std::exp(-beta * (v - 0.5))); }

double soft_round_slope(double v, double beta) {
  const double h = soft_round(v, beta);
  return beta * h * (1.0 - h);
}

std::vector<double> soft_quantize(const RoundingVars& rv, double beta) {
  std::vector<double> out(rv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double node = rv.frozen[i] ? rv.lower[i]
                                     : rv.lower[i] + soft_round(rv.v[i], beta) * rv.span(i);
    out[i] = rv.sign[i] * node * rv.scale_prod[i];
  }
  return out;
}

std::vector<double> soft_quantize_slope(const RoundingVars& rv, double beta) {
  std::vector<double> out(rv.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (rv.frozen[i]) continue;
    out[i] = rv.sign[i] * rv.span(i) * rv.scale_prod[i] * soft_round_slope(rv.v[i], beta);
  }
  return out;
}

RegLoss round_reg_loss(const RoundingVars& rv) {
  RegLoss r;
  r.grad.assign(rv.size(), 0.0);
  const std::size_t n = rv.active_count();
  if (n == 0) return r;
  const double inv_n = 1.0 / static_cast<double>(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < rv.size(); ++i) {
    if (rv.frozen[i]) continue;
    const double c = 2.0 * rv.v[i] - 1.0;
    sum += 1.0 - c * c;
    r.grad[i] = -4.0 * c * inv_n;
  }
  r.loss = sum * inv_n;
  return r;
}

double beta_at(const BetaSchedule& schedule, std::size_t step) {
  if (step > schedule.total_steps)
    throw std::invalid_argument("beta_at: step " + std::to_string(step) + " exceeds total_steps " +
                                std::to_string(schedule.total_steps));
  const double t = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
  return schedule.beta_start + (schedule.beta_end - schedule.beta_start) * t;
}

void clip_vars(RoundingVars& rv) {
  for (double& x : rv.v) x = std::clamp(x, 0.0, 1.0);
}

Tensor hard_weights(const RoundingVars& rv, const Decisions& decisions) {
  if (decisions.size() != rv.size()) throw std::invalid_argument("hard_weights: size mismatch");
  std::vector<double> out(rv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double node = decisions[i] && !rv.frozen[i] ? rv.upper[i] : rv.lower[i];
    out[i] = rv.sign[i] * node * rv.scale_prod[i];
  }
  return Tensor{rv.shape, std::move(out)};
}

Hardened harden(const RoundingVars& rv) {
  Decisions d(rv.size(), 0);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = !rv.frozen[i] && rv.v[i] >= 0.5;
  Tensor w = hard_weights(rv, d);
  return {std::move(d), std::move(w)};
}

nvfp4::QuantizedTensor to_quantized(const RoundingVars& rv, const Decisions& decisions) {
  if (decisions.size() != rv.size()) throw std::invalid_argument("to_quantized: size mismatch");
  nvfp4::QuantizedTensor q{rv.shape, std::vector<nvfp4::Code>(rv.size()), rv.scales};
  for (std::size_t i = 0; i < rv.size(); ++i) {
    const double node = decisions[i] && !rv.frozen[i] ? rv.upper[i] : rv.lower[i];
    const int idx = nvfp4::node_index(node);
    q.codes[i] = nvfp4::make_code(static_cast<std::size_t>(idx), rv.sign[i] < 0.0);
  }
  return q;
}

Decisions decisions_from_codes(const RoundingVars& rv, const nvfp4::QuantizedTensor& q) {
  if (q.codes.size() != rv.size()) throw std::invalid_argument("decisions_from_codes: size mismatch");
  Decisions d(rv.size(), 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double mag = std::abs(nvfp4::decode(q.codes[i]));
    if (mag == rv.lower[i]) continue;
    if (mag != rv.upper[i])
      throw std::invalid_argument("decisions_from_codes: code " + std::to_string(i) +
                                  " is outside its bracketing interval");
    d[i] = 1;
  }
  return d;
}

}  // namespace faar
