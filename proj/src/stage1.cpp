// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include "faar/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "faar/kernels.hpp"

namespace faar {

void LinearLayer::validate() const {
  if (weights.size() == 0) throw std::invalid_argument("layer '" + name + "': empty weight matrix");
  for (double w : weights.data)
    if (!std::isfinite(w)) throw std::invalid_argument("layer '" + name + "': non-finite weight");
}

Matrix quantize_activations(const Matrix& x, std::size_t block_size) {
  if (block_size == 0) throw std::invalid_argument("quantize_activations: block_size must be >= 1");
  Matrix out(x.rows, x.cols);
  if (x.size() == 0) return out;
  double amax = 0.0;
  for (double v : x.data) {
    if (!std::isfinite(v)) throw std::invalid_argument("quantize_activations: non-finite input");
    amax = std::max(amax, std::abs(v));
  }
  const double global = nvfp4::global_scale(amax);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto row = x.row(r);
    auto dst = out.row(r);
    for (std::size_t begin = 0; begin < x.cols; begin += block_size) {
      const std::size_t end = std::min(x.cols, begin + block_size);
      double block_amax = 0.0;
      for (std::size_t c = begin; c < end; ++c) block_amax = std::max(block_amax, std::abs(row[c]));
      const double scale = nvfp4::block_scale(block_amax, global) * global;
      for (std::size_t c = begin; c < end; ++c)
        dst[c] = nvfp4::decode(nvfp4::rtn_code(row[c], scale)) * scale;
    }
  }
  return out;
}

CalibBatch CalibBatch::from_inputs(Matrix x, std::size_t block_size) {
  Matrix xq = quantize_activations(x, block_size);
  return {std::move(x), std::move(xq)};
}

CalibBatch CalibBatch::unquantized(Matrix x) {
  Matrix copy = x;
  return {std::move(x), std::move(copy)};
}

void Stage1Config::validate() const {
  if (steps == 0) throw std::invalid_argument("stage1: steps must be >= 1");
  if (!(adam.learning_rate > 0.0)) throw std::invalid_argument("stage1: learning rate must be > 0");
  if (!(lambda_round >= 0.0)) throw std::invalid_argument("stage1: lambda_round must be >= 0");
  if (block_size == 0) throw std::invalid_argument("stage1: block_size must be >= 1");
  BetaSchedule{beta_start, beta_end, steps}.validate();
}

namespace {

void check_shapes(const LinearLayer& layer, std::span<const CalibBatch> batches,
                  std::size_t n_weights) {
  if (batches.empty()) throw std::invalid_argument("stage1: calibration set is empty");
  if (n_weights != layer.weights.size())
    throw std::invalid_argument("stage1: rounding variables do not match layer '" + layer.name + "'");
  for (const auto& b : batches) {
    if (b.x.cols != layer.in_dim() || b.x_q.cols != layer.in_dim() || b.x.rows != b.x_q.rows)
      throw std::invalid_argument("stage1: calibration batch shape mismatch for layer '" +
                                  layer.name + "'");
  }
}

double squared_norm(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data) s += x * x;
  return s;
}

}  // namespace

ReconstructionObjective::ReconstructionObjective(const LinearLayer& layer,
                                                 std::span<const CalibBatch> batches)
    : layer_(&layer), batches_(batches) {
  check_shapes(layer, batches, layer.weights.size());
  y_fp_.reserve(batches.size());
  for (const auto& b : batches) y_fp_.push_back(kernels::gemm_nt(b.x, layer.weights));
}

Matrix ReconstructionObjective::as_matrix(std::span<const double> wq) const {
  if (wq.size() != layer_->weights.size())
    throw std::invalid_argument("reconstruction: weight count mismatch for layer '" + layer_->name + "'");
  return Matrix(layer_->out_dim(), layer_->in_dim(), std::vector<double>(wq.begin(), wq.end()));
}

double ReconstructionObjective::mse(std::span<const double> wq) const {
  const Matrix w = as_matrix(wq);
  double total = 0.0;
  for (std::size_t k = 0; k < batches_.size(); ++k) {
    Matrix r = kernels::gemm_nt(batches_[k].x_q, w);
    for (std::size_t i = 0; i < r.size(); ++i) r.data[i] -= y_fp_[k].data[i];
    total += squared_norm(r);
  }
  return total;
}

Matrix ReconstructionObjective::mse_grad(std::span<const double> wq) const {
  const Matrix w = as_matrix(wq);
  Matrix grad(w.rows, w.cols);
  for (std::size_t k = 0; k < batches_.size(); ++k) {
    Matrix r = kernels::gemm_nt(batches_[k].x_q, w);
    for (std::size_t i = 0; i < r.size(); ++i) r.data[i] -= y_fp_[k].data[i];
    const Matrix g = kernels::gemm_tn(r, batches_[k].x_q);
    for (std::size_t i = 0; i < g.size(); ++i) grad.data[i] += 2.0 * g.data[i];
  }
  return grad;
}

double reconstruction_mse(const LinearLayer& layer, std::span<const CalibBatch> batches,
                          std::span<const double> wq) {
  return ReconstructionObjective(layer, batches).mse(wq);
}

namespace {

Stage1Terms terms_for(const ReconstructionObjective& obj, const RoundingVars& rv, double beta,
                      double lambda_round) {
  Stage1Terms t;
  t.mse = obj.mse(soft_quantize(rv, beta));
  t.reg = round_reg_loss(rv).loss;
  t.total = t.mse + lambda_round * t.reg;
  return t;
}

std::vector<double> grad_for(const ReconstructionObjective& obj, const RoundingVars& rv,
                             double beta, double lambda_round) {
  const Matrix dwq = obj.mse_grad(soft_quantize(rv, beta));
  const std::vector<double> slope = soft_quantize_slope(rv, beta);
  const RegLoss reg = round_reg_loss(rv);
  std::vector<double> grad(rv.size(), 0.0);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (rv.frozen[i]) continue;
    grad[i] = dwq.data[i] * slope[i] + lambda_round * reg.grad[i];
  }
  return grad;
}

}  // namespace

Stage1Terms stage1_terms(const LinearLayer& layer, std::span<const CalibBatch> batches,
                         const RoundingVars& rv, double beta, double lambda_round) {
  check_shapes(layer, batches, rv.size());
  return terms_for(ReconstructionObjective(layer, batches), rv, beta, lambda_round);
}

double stage1_loss(const LinearLayer& layer, const CalibBatch& batch, const RoundingVars& rv,
                   double beta, double lambda_round) {
  return stage1_terms(layer, std::span(&batch, 1), rv, beta, lambda_round).total;
}

std::vector<double> stage1_grad(const LinearLayer& layer, std::span<const CalibBatch> batches,
                                const RoundingVars& rv, double beta, double lambda_round) {
  check_shapes(layer, batches, rv.size());
  return grad_for(ReconstructionObjective(layer, batches), rv, beta, lambda_round);
}

std::vector<double> stage1_grad(const LinearLayer& layer, const CalibBatch& batch,
                                const RoundingVars& rv, double beta, double lambda_round) {
  return stage1_grad(layer, std::span(&batch, 1), rv, beta, lambda_round);
}

RoundingVars init_layer_vars(const LinearLayer& layer, std::size_t block_size) {
  layer.validate();
  const Tensor w = to_tensor(layer.weights);
  return init_rounding_vars(w, nvfp4::compute_scales(w.values, block_size));
}

Stage1Result optimize_layer(const LinearLayer& layer, std::span<const CalibBatch> calib,
                            const Stage1Config& cfg) {
  return optimize_layer(layer, calib, cfg, init_layer_vars(layer, cfg.block_size));
}

Stage1Result optimize_layer(const LinearLayer& layer, std::span<const CalibBatch> calib,
                            const Stage1Config& cfg, RoundingVars initial) {
  cfg.validate();
  layer.validate();
  check_shapes(layer, calib, initial.size());

  const BetaSchedule schedule{cfg.beta_start, cfg.beta_end, cfg.steps};
  Stage1Result result{std::move(initial), {}};
  RoundingVars& rv = result.rv;
  result.trace.reserve(cfg.steps + 1);
  Adam adam(rv.size(), cfg.adam);
  const ReconstructionObjective objective(layer, calib);

  auto record = [&](std::size_t step, double beta) {
    const Stage1Terms t = terms_for(objective, rv, beta, cfg.lambda_round);
    if (!std::isfinite(t.total))
      throw std::runtime_error("optimize_layer: loss became non-finite at step " +
                               std::to_string(step) + " of layer '" + layer.name + "'");
    result.trace.push_back({step, t.mse, t.reg, beta, t.total});
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double beta = beta_at(schedule, step);
    record(step, beta);
    const std::vector<double> grad = grad_for(objective, rv, beta, cfg.lambda_round);
    adam.step(rv.v, grad);
    clip_vars(rv);
  }
  record(cfg.steps, beta_at(schedule, cfg.steps));
  return result;
}

}  // namespace faar
