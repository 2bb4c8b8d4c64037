// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "faar/oracle.hpp"
#include "faar/stage1.hpp"
#include "test_support.hpp"

namespace faar {
namespace {

using testing::Gen;

nvfp4::ScaleSet unit_scales(std::size_t n) {
  return nvfp4::ScaleSet{1.0, std::vector<double>(nvfp4::block_count(n, 16), 1.0), 16};
}

/// Independent Stage 1 objective written directly from its definition.
double oracle_stage1_loss(const Matrix& w, const Matrix& x, const Matrix& xq, const RoundingVars& rv,
                          double beta, double lambda) {
  Matrix wq(w.rows, w.cols);
  double reg = 0.0;
  std::size_t active = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double h = 1.0 / (1.0 + std::exp(-beta * (rv.v[i] - 0.5)));
    const double span = rv.upper[i] - rv.lower[i];
    wq.data[i] = rv.sign[i] * (rv.lower[i] + (span > 0 ? h * span : 0.0)) * rv.scale_prod[i];
    if (span > 0) {
      reg += 1.0 - (2 * rv.v[i] - 1) * (2 * rv.v[i] - 1);
      ++active;
    }
  }
  const double mse = testing::frob2(testing::naive_nt(x, w), testing::naive_nt(xq, wq));
  return mse + lambda * (active ? reg / active : 0.0);
}

TEST(QuantizeActivations, Examples) {
  EXPECT_EQ(quantize_activations(Matrix(3, 20)), Matrix(3, 20));
  // amax = 2688 * 2^-12 makes both scales exact, so nodes times 448 * 2^-12 survive.
  Matrix x(1, 8);
  for (std::size_t i = 0; i < 8; ++i) x.data[i] = (i % 2 ? -1.0 : 1.0) * testing::kGrid[i] * 0.109375;
  EXPECT_EQ(quantize_activations(x, 8), x);
}

TEST(QuantizeActivations, GaussianRowsWithinHalfInterval) {
  Gen g(21);
  const Matrix x = g.matrix(16, 40);
  const Matrix xq = quantize_activations(x, 16);
  double gmax = 0.0;
  for (double v : x.data) gmax = std::max(gmax, std::abs(v));
  const double global = nvfp4::global_scale(gmax);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t c0 = 0; c0 < x.cols; c0 += 16) {
      const std::size_t c1 = std::min(x.cols, c0 + 16);
      double amax = 0.0;
      for (std::size_t c = c0; c < c1; ++c) amax = std::max(amax, std::abs(x(r, c)));
      const double sp = nvfp4::block_scale(amax, global) * global;
      for (std::size_t c = c0; c < c1; ++c) {
        const double mag = std::min(std::abs(x(r, c)) / sp, 6.0);
        const auto iv = nvfp4::find_interval(mag);
        EXPECT_LE(std::abs(xq(r, c) - std::copysign(mag * sp, x(r, c))), iv.span() / 2 * sp * (1 + 1e-12));
      }
    }
  }
}

TEST(Stage1Loss, OnGridLayerIsExact) {
  LinearLayer layer{"grid", Matrix(2, 2, {1.0, -0.5, 3.0, 6.0})};
  const auto rv = init_rounding_vars(to_tensor(layer.weights), unit_scales(4));
  const CalibBatch batch = CalibBatch::unquantized(Gen(1).matrix(5, 2));
  EXPECT_EQ(stage1_loss(layer, batch, rv, 1e6, 0.5), 0.0);
}

TEST(Stage1Loss, ZeroInputLeavesRegularizerOnly) {
  Gen g(2);
  LinearLayer layer{"l", g.matrix(3, 4)};
  auto rv = init_rounding_vars(to_tensor(layer.weights), nvfp4::compute_scales(layer.weights.data));
  const CalibBatch batch = CalibBatch::from_inputs(Matrix(6, 4));
  const double lambda = 0.3;
  EXPECT_DOUBLE_EQ(stage1_loss(layer, batch, rv, 10.0, lambda), lambda * round_reg_loss(rv).loss);
}

TEST(Stage1Loss, HandBuiltTwoByTwoMatchesOracle) {
  LinearLayer layer{"h", Matrix(2, 2, {1.2, -0.7, 2.6, 0.2})};
  auto rv = init_rounding_vars(to_tensor(layer.weights), unit_scales(4));
  rv.v = {0.1, 0.8, 0.45, 0.6};
  const Matrix x(3, 2, {0.5, -1.0, 2.0, 0.25, -1.5, 1.0});
  const CalibBatch batch = CalibBatch::from_inputs(x, 16);
  const double got = stage1_loss(layer, batch, rv, 6.0, 0.05);
  const double want = oracle_stage1_loss(layer.weights, x, batch.x_q, rv, 6.0, 0.05);
  EXPECT_LE(testing::relative_error(got, want), 1e-13);
  EXPECT_THROW(stage1_loss(layer, CalibBatch::from_inputs(Matrix(3, 3)), rv, 6.0, 0.05), std::invalid_argument);
}

TEST(Stage1Grad, FrozenAndFlatSigmoid) {
  LinearLayer layer{"f", Matrix(1, 3, {9.0, 1.2, 2.2})};
  auto rv = init_rounding_vars(to_tensor(layer.weights), unit_scales(3));
  const CalibBatch batch = CalibBatch::unquantized(Gen(3).matrix(4, 3));
  ASSERT_TRUE(rv.frozen[0]);
  const auto g = stage1_grad(layer, batch, rv, 5.0, 0.1);
  EXPECT_EQ(g[0], 0.0);
  const auto flat = stage1_grad(layer, batch, rv, 0.0, 0.0);
  for (double x : flat) EXPECT_EQ(x, 0.0);
}

TEST(Stage1Grad, MatchesCentralDifferences) {
  Gen g(4);
  for (int trial = 0; trial < 10; ++trial) {
    LinearLayer layer{"r", g.matrix(4, 4)};
    auto rv = init_rounding_vars(to_tensor(layer.weights), nvfp4::compute_scales(layer.weights.data));
    for (std::size_t i = 0; i < rv.size(); ++i)
      if (!rv.frozen[i]) rv.v[i] = g.uniform(0.05, 0.95);
    const CalibBatch batch = CalibBatch::from_inputs(g.matrix(8, 4));
    const double beta = g.uniform(2.0, 12.0), lambda = 0.01;
    const auto grad = stage1_grad(layer, batch, rv, beta, lambda);
    for (std::size_t i = 0; i < rv.size(); ++i) {
      if (rv.frozen[i]) continue;
      const double fd = testing::central_difference(
          rv.v, i, 1e-6, [&] { return stage1_loss(layer, batch, rv, beta, lambda); });
      EXPECT_LE(std::abs(grad[i] - fd), 1e-5 * std::max(std::abs(fd), 1e-3)) << trial << " " << i;
    }
  }
}

TEST(OptimizeLayer, OnGridLayerReproducesRtn) {
  LinearLayer layer{"grid", Matrix(2, 4, {0.5, -1.0, 2.0, 3.0, -4.0, 6.0, 1.5, 0.0})};
  const CalibBatch batch = CalibBatch::from_inputs(Gen(5).matrix(16, 4));
  Stage1Config cfg;
  cfg.steps = 50;
  const auto r = optimize_layer(layer, std::span(&batch, 1), cfg);
  const auto scales = nvfp4::compute_scales(layer.weights.data);
  EXPECT_EQ(harden(r.rv).weights.values,
            nvfp4::dequantize(nvfp4::quantize_rtn(to_tensor(layer.weights), scales)).values);
  EXPECT_EQ(r.trace.size(), cfg.steps + 1);
}

TEST(OptimizeLayer, DeterministicAndClipped) {
  Gen g(6);
  LinearLayer layer{"d", g.matrix(16, 16, 0.125)};
  const CalibBatch batch = CalibBatch::from_inputs(g.matrix(64, 16));
  Stage1Config cfg;
  cfg.steps = 100;
  const auto a = optimize_layer(layer, std::span(&batch, 1), cfg);
  const auto b = optimize_layer(layer, std::span(&batch, 1), cfg);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t k = 0; k < a.trace.size(); ++k) {
    EXPECT_EQ(a.trace[k].total, b.trace[k].total);
    EXPECT_EQ(a.trace[k].beta, b.trace[k].beta);
  }
  EXPECT_EQ(a.rv.v, b.rv.v);
  for (double v : a.rv.v) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(a.trace.front().beta, 4.0);
  EXPECT_EQ(a.trace.back().beta, 40.0);
}

TEST(OptimizeLayer, DescendsAtFixedTemperature) {
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Gen g(100 + seed);
    LinearLayer layer{"s", g.matrix(16, 16, 0.125)};
    const CalibBatch batch = CalibBatch::from_inputs(g.matrix(64, 16));
    Stage1Config cfg;
    cfg.steps = 200;
    cfg.beta_start = cfg.beta_end = 10.0;
    const auto r = optimize_layer(layer, std::span(&batch, 1), cfg);
    ok += r.trace.back().total <= r.trace.front().total;
  }
  EXPECT_EQ(ok, 20);
}

// Property under the default 4 -> 40 ramp: final trace value <= initial on
// >= 95% of seeds (64x64 layers, 500 steps).
TEST(OptimizeLayer, TraceFinalNotAboveInitialUnderDefaultSchedule) {
  int ok = 0;
  const int seeds = 20;
  for (int seed = 0; seed < seeds; ++seed) {
    Gen g(200 + seed);
    LinearLayer layer{"s", g.matrix(64, 64, 0.125)};
    const CalibBatch batch = CalibBatch::from_inputs(g.matrix(128, 64));
    const auto r = optimize_layer(layer, std::span(&batch, 1), Stage1Config{});
    ok += r.trace.back().total <= r.trace.front().total;
  }
  EXPECT_GE(ok, 19) << ok << " of " << seeds << " seeds ended at or below their step-0 loss";
}

TEST(OptimizeLayer, HardenedNotWorseThanRtnOnMostSeeds) {
  int ok = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Gen g(400 + seed);
    LinearLayer layer{"s", g.matrix(32, 32, 0.125)};
    const CalibBatch batch = CalibBatch::from_inputs(g.matrix(128, 32));
    const auto r = optimize_layer(layer, std::span(&batch, 1), Stage1Config{});
    const auto rtn = nvfp4::dequantize(nvfp4::quantize_rtn(to_tensor(layer.weights), r.rv.scales));
    ok += reconstruction_mse(layer, std::span(&batch, 1), harden(r.rv).weights.values) <=
          reconstruction_mse(layer, std::span(&batch, 1), rtn.values);
  }
  EXPECT_GE(ok, 9);
}

TEST(OptimizeLayer, FourWeightLayerNearBruteForce) {
  int within = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Gen g(300 + seed);
    LinearLayer layer{"tiny", g.matrix(2, 2)};
    const CalibBatch batch = CalibBatch::from_inputs(g.matrix(128, 2));
    const auto r = optimize_layer(layer, std::span(&batch, 1), Stage1Config{});
    const auto best = brute_force_optimal(layer, std::span(&batch, 1), r.rv.scales);
    const double got = reconstruction_mse(layer, std::span(&batch, 1), harden(r.rv).weights.values);
    EXPECT_GE(got, best.loss * (1 - 1e-12));
    within += got <= best.loss * 1.01 || got - best.loss <= 1e-12;
  }
  EXPECT_GE(within, 9);
}

TEST(OptimizeLayer, RejectsBadInputs) {
  LinearLayer layer{"b", Matrix(2, 2, {1.0, 2.0, 3.0, 4.0})};
  EXPECT_THROW(optimize_layer(layer, {}, Stage1Config{}), std::invalid_argument);
  Stage1Config cfg;
  cfg.steps = 0;
  const CalibBatch batch = CalibBatch::unquantized(Matrix(2, 2, 1.0));
  EXPECT_THROW(optimize_layer(layer, std::span(&batch, 1), cfg), std::invalid_argument);
  cfg.steps = 10;
  // Outputs overflow to infinity, so the loss is not finite.
  LinearLayer wide{"w", Matrix(1, 2, {1e30, -1e30})};
  const CalibBatch huge = CalibBatch::unquantized(Matrix(2, 2, 1e300));
  EXPECT_THROW(optimize_layer(wide, std::span(&huge, 1), cfg), std::runtime_error);
  LinearLayer beyond_fp32{"b", Matrix(1, 2, {1e300, 1.0})};
  EXPECT_THROW(optimize_layer(beyond_fp32, std::span(&batch, 1), cfg), std::invalid_argument);
}

}  // namespace
}  // namespace faar
