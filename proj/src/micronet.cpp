// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include "faar/micronet.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "faar/kernels.hpp"

namespace faar {

namespace {

constexpr double kProbFloor = 1e-12;

void require_finite(const Matrix& m, const char* what) {
  for (double x : m.data)
    if (!std::isfinite(x)) throw std::runtime_error(fmt::format("stage 2: non-finite {}", what));
}

Matrix relu(const Matrix& z) {
  Matrix h = z;
  for (double& x : h.data) x = x > 0.0 ? x : 0.0;
  return h;
}

double squared_distance(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s;
}

Matrix rows_slice(const Matrix& m, std::size_t begin, std::size_t count) {
  Matrix out(count, m.cols);
  for (std::size_t r = 0; r < count; ++r) {
    const auto src = m.row((begin + r) % m.rows);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

void check_rvs(const MicroNet& net, std::span<const RoundingVars> rvs) {
  if (rvs.size() != net.layers.size())
    throw std::invalid_argument(fmt::format("expected {} rounding-variable sets, got {}",
                                            net.layers.size(), rvs.size()));
  for (std::size_t l = 0; l < rvs.size(); ++l)
    if (rvs[l].size() != net.layers[l].weights.size())
      throw std::invalid_argument(
          fmt::format("rounding variables of layer {} do not match its weights", l));
}

}  // namespace

std::vector<std::size_t> MicroNet::dims() const {
  std::vector<std::size_t> d;
  if (layers.empty()) return d;
  d.push_back(layers.front().in_dim());
  for (const auto& l : layers) d.push_back(l.out_dim());
  return d;
}

void MicroNet::validate() const {
  if (layers.size() < 2) throw std::invalid_argument("micro-network needs at least 2 layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].validate();
    if (l > 0 && layers[l].in_dim() != layers[l - 1].out_dim())
      throw std::invalid_argument(fmt::format("layer {} expects {} inputs but layer {} emits {}", l,
                                              layers[l].in_dim(), l - 1, layers[l - 1].out_dim()));
  }
}

MicroNet MicroNet::random(const std::vector<std::size_t>& dims, std::uint64_t seed) {
  if (dims.size() < 3) throw std::invalid_argument("micro-network needs at least 2 layers");
  std::mt19937_64 rng(seed);
  MicroNet net;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (dims[l] == 0 || dims[l + 1] == 0) throw std::invalid_argument("layer dims must be positive");
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(dims[l])));
    Matrix w(dims[l + 1], dims[l]);
    for (double& x : w.data) x = dist(rng);
    net.layers.push_back({fmt::format("fc{}", l + 1), std::move(w)});
  }
  return net;
}

Matrix softmax_rows(const Matrix& logits, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softmax: tau must be positive");
  Matrix p(logits.rows, logits.cols);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto z = logits.row(r);
    auto out = p.row(r);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) {
      out[c] = std::exp((z[c] - zmax) / tau);
      sum += out[c];
    }
    for (double& x : out) x /= sum;
  }
  return p;
}

ForwardPass forward(const MicroNet& net, const Matrix& x, double tau,
                    const std::optional<QuantizedMode>& mode) {
  net.validate();
  if (x.cols != net.input_dim())
    throw std::invalid_argument(
        fmt::format("forward: input has {} features, network expects {}", x.cols, net.input_dim()));
  if (mode) check_rvs(net, mode->rvs);

  const std::size_t n_layers = net.layers.size();
  ForwardPass pass;
  pass.inputs.reserve(n_layers);
  pass.weights.reserve(n_layers);
  pass.pre.reserve(n_layers);

  Matrix act = x;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const LinearLayer& layer = net.layers[l];
    if (mode) {
      const RoundingVars& rv = mode->rvs[l];
      std::vector<double> w =
          mode->hard ? harden(rv).weights.values : soft_quantize(rv, mode->beta);
      pass.weights.emplace_back(layer.out_dim(), layer.in_dim(), std::move(w));
      pass.inputs.push_back(mode->quantize_activations
                                ? quantize_activations(act, mode->block_size)
                                : act);
    } else {
      pass.weights.push_back(layer.weights);
      pass.inputs.push_back(act);
    }
    pass.pre.push_back(kernels::gemm_nt(pass.inputs.back(), pass.weights.back()));
    if (l + 1 < n_layers) act = relu(pass.pre.back());
  }
  pass.h_last = std::move(act);
  pass.logits = pass.pre.back();
  pass.probs = softmax_rows(pass.logits, tau);
  return pass;
}

double kl_loss(const Matrix& p_fp, const Matrix& p_q) {
  if (p_fp.rows != p_q.rows || p_fp.cols != p_q.cols || p_fp.rows == 0)
    throw std::invalid_argument("kl_loss: distribution shapes differ");
  auto check = [](const Matrix& p, const char* which) {
    for (std::size_t r = 0; r < p.rows; ++r) {
      double sum = 0.0;
      for (double x : p.row(r)) {
        if (!(x >= 0.0)) throw std::invalid_argument(fmt::format("kl_loss: {} has a negative entry", which));
        sum += x;
      }
      if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument(fmt::format("kl_loss: {} row {} sums to {}", which, r, sum));
    }
  };
  check(p_fp, "P_fp");
  check(p_q, "P_q");
  double total = 0.0;
  for (std::size_t i = 0; i < p_fp.size(); ++i) {
    const double p = p_fp.data[i];
    if (p == 0.0) continue;
    total += p * std::log(p / std::max(p_q.data[i], kProbFloor));
  }
  return total / static_cast<double>(p_fp.rows);
}

void Stage2Config::validate() const {
  if (!(adam.learning_rate > 0.0)) throw std::invalid_argument("stage2: learning rate must be > 0");
  if (!(lambda_kl >= 0.0) || !(lambda_round >= 0.0))
    throw std::invalid_argument("stage2: loss weights must be >= 0");
  if (!(tau > 0.0)) throw std::invalid_argument("stage2: tau must be > 0");
  if (!(beta_start > 0.0) || !(beta_end >= beta_start))
    throw std::invalid_argument("stage2: requires beta_end >= beta_start > 0");
  if (block_size == 0) throw std::invalid_argument("stage2: block_size must be >= 1");
}

Stage2Parts stage2_loss(const ForwardPass& teacher, const ForwardPass& student,
                        std::span<const RoundingVars> rvs, const Stage2Config& cfg) {
  if (teacher.h_last.rows != student.h_last.rows || teacher.h_last.cols != student.h_last.cols)
    throw std::invalid_argument("stage2_loss: hidden-state shapes differ");
  Stage2Parts parts;
  parts.kl = kl_loss(teacher.probs, student.probs);
  parts.mse = squared_distance(teacher.h_last, student.h_last);
  for (const auto& rv : rvs) parts.round += round_reg_loss(rv).loss;
  parts.total = cfg.lambda_kl * parts.kl + parts.mse + cfg.lambda_round * parts.round;
  return parts;
}

Stage2Gradient backprop_stage2(const MicroNet& net, const Matrix& x, const ForwardPass& teacher,
                               std::span<const RoundingVars> rvs, double beta,
                               const Stage2Config& cfg) {
  check_rvs(net, rvs);
  const QuantizedMode mode{rvs, beta, false, cfg.quantize_activations, cfg.block_size};
  const ForwardPass student = forward(net, x, cfg.tau, mode);
  require_finite(student.logits, "student logits");

  Stage2Gradient out;
  out.parts = stage2_loss(teacher, student, rvs, cfg);
  if (!std::isfinite(out.parts.total)) throw std::runtime_error("stage 2: non-finite loss");

  const std::size_t n_layers = net.layers.size();
  const std::size_t batch = x.rows;
  const double inv_batch = 1.0 / static_cast<double>(batch);

  // KL through softmax(z / tau): dL/dq_c = -p_c / (B q_c) where the floor is inactive.
  Matrix dz(batch, net.num_classes());
  for (std::size_t r = 0; r < batch; ++r) {
    const auto p = teacher.probs.row(r);
    const auto q = student.probs.row(r);
    auto d = dz.row(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < d.size(); ++c) {
      d[c] = (p[c] > 0.0 && q[c] > kProbFloor) ? -p[c] / q[c] * inv_batch : 0.0;
      dot += q[c] * d[c];
    }
    for (std::size_t c = 0; c < d.size(); ++c)
      d[c] = cfg.lambda_kl * q[c] * (d[c] - dot) / cfg.tau;
  }

  std::vector<Matrix> dw(n_layers);
  Matrix dh;  // gradient w.r.t. the ReLU output feeding layer l + 1
  for (std::size_t l = n_layers; l-- > 0;) {
    if (l + 1 < n_layers) {
      // dz = dh * relu'(pre); subgradient 0 at 0.
      dz = dh;
      const Matrix& pre = student.pre[l];
      for (std::size_t i = 0; i < dz.size(); ++i)
        if (!(pre.data[i] > 0.0)) dz.data[i] = 0.0;
    }
    dw[l] = kernels::gemm_tn(dz, student.inputs[l]);
    if (l == 0) break;
    // Straight-through: d(input of l) passes unchanged to the ReLU output of l - 1.
    dh = kernels::gemm_nn(dz, student.weights[l]);
    if (l == n_layers - 1) {
      for (std::size_t i = 0; i < dh.size(); ++i)
        dh.data[i] += 2.0 * (student.h_last.data[i] - teacher.h_last.data[i]);
    }
  }

  out.dv.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::vector<double> slope = soft_quantize_slope(rvs[l], beta);
    const RegLoss reg = round_reg_loss(rvs[l]);
    auto& g = out.dv[l];
    g.assign(rvs[l].size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (rvs[l].frozen[i]) continue;
      g[i] = dw[l].data[i] * slope[i] + cfg.lambda_round * reg.grad[i];
      if (!std::isfinite(g[i]))
        throw std::runtime_error(fmt::format("stage 2: non-finite gradient in layer {}", l));
    }
  }
  return out;
}

Stage2Result align_model(const MicroNet& net, std::vector<RoundingVars> rvs, const Matrix& data,
                         const Stage2Config& cfg, double stage1_beta_end) {
  cfg.validate();
  net.validate();
  check_rvs(net, rvs);
  if (data.rows == 0) throw std::invalid_argument("align_model: empty calibration data");

  const double start = cfg.beta_mode == BetaMode::restart ? cfg.beta_start : stage1_beta_end;
  const BetaSchedule schedule{start, std::max(start, cfg.beta_end), std::max<std::size_t>(cfg.steps, 1)};
  schedule.validate();

  const bool full_batch = cfg.batch_size == 0 || cfg.batch_size >= data.rows;
  const std::size_t bs = full_batch ? data.rows : cfg.batch_size;
  const ForwardPass full_teacher = forward(net, data, cfg.tau);

  Stage2Result result{std::move(rvs), {}};
  result.trace.reserve(cfg.steps + 1);
  std::vector<Adam> opt;
  for (const auto& rv : result.rvs) opt.emplace_back(rv.size(), cfg.adam);

  auto batch_for = [&](std::size_t step) {
    return full_batch ? data : rows_slice(data, (step * bs) % data.rows, bs);
  };

  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    const double beta = beta_at(schedule, std::min(step, schedule.total_steps));
    const Matrix x = batch_for(step);
    const ForwardPass teacher = full_batch ? full_teacher : forward(net, x, cfg.tau);
    if (step == cfg.steps) {
      const QuantizedMode mode{result.rvs, beta, false, cfg.quantize_activations, cfg.block_size};
      const Stage2Parts p = stage2_loss(teacher, forward(net, x, cfg.tau, mode), result.rvs, cfg);
      if (!std::isfinite(p.total))
        throw std::runtime_error(fmt::format("align_model: loss became non-finite at step {}", step));
      result.trace.push_back({step, p.kl, p.mse, p.round, beta, p.total});
      break;
    }
    const Stage2Gradient g = backprop_stage2(net, x, teacher, result.rvs, beta, cfg);
    if (!std::isfinite(g.parts.total))
      throw std::runtime_error(fmt::format("align_model: loss became non-finite at step {}", step));
    result.trace.push_back(
        {step, g.parts.kl, g.parts.mse, g.parts.round, beta, g.parts.total});
    for (std::size_t l = 0; l < result.rvs.size(); ++l) {
      opt[l].step(result.rvs[l].v, g.dv[l]);
      clip_vars(result.rvs[l]);
    }
  }
  return result;
}

std::vector<Stage1Result> calibrate_layers(const MicroNet& net, const Matrix& data,
                                           const Stage1Config& cfg) {
  net.validate();
  const ForwardPass teacher = forward(net, data, 1.0);
  std::vector<Stage1Result> out;
  out.reserve(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const CalibBatch batch = CalibBatch::from_inputs(teacher.inputs[l], cfg.block_size);
    out.push_back(optimize_layer(net.layers[l], std::span(&batch, 1), cfg));
  }
  return out;
}

std::vector<RoundingVars> init_net_vars(const MicroNet& net, std::size_t block_size) {
  std::vector<RoundingVars> rvs;
  rvs.reserve(net.layers.size());
  for (const auto& layer : net.layers) rvs.push_back(init_layer_vars(layer, block_size));
  return rvs;
}

double hardened_kl(const MicroNet& net, const Matrix& data, std::span<const RoundingVars> rvs,
                   double tau, std::size_t block_size) {
  const ForwardPass teacher = forward(net, data, tau);
  const ForwardPass student = forward(net, data, tau, QuantizedMode{rvs, 0.0, true, true, block_size});
  return kl_loss(teacher.probs, student.probs);
}

}  // namespace faar
