// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "faar/oracle.hpp"
#include "test_support.hpp"

namespace faar {
namespace {

using testing::Gen;

nvfp4::ScaleSet unit_scales(std::size_t n) {
  return nvfp4::ScaleSet{1.0, std::vector<double>(nvfp4::block_count(n, 16), 1.0), 16};
}

/// Exhaustive search written from scratch: enumerate decision vectors in
/// lexicographic order and keep the first strict minimum.
std::pair<Decisions, double> oracle_search(const LinearLayer& layer, const Matrix& x, const Matrix& xq,
                                           const nvfp4::ScaleSet& scales) {
  const auto& w = layer.weights.data;
  std::vector<std::size_t> free;
  std::vector<double> lo(w.size()), hi(w.size()), sp(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    sp[i] = scales.scale_product(i);
    const double mag = std::min(std::abs(w[i]) / sp[i], 6.0);
    std::size_t k = 0;
    while (k + 1 < testing::kGrid.size() && testing::kGrid[k + 1] <= mag) ++k;
    lo[i] = testing::kGrid[k];
    hi[i] = k + 1 < testing::kGrid.size() ? testing::kGrid[k + 1] : testing::kGrid[k];
    if (hi[i] != lo[i]) free.push_back(i);
  }
  const Matrix y = testing::naive_nt(x, layer.weights);
  Decisions best;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::uint64_t m = 0; m < (std::uint64_t{1} << free.size()); ++m) {
    Decisions d(w.size(), 0);
    for (std::size_t k = 0; k < free.size(); ++k) d[free[k]] = (m >> (free.size() - 1 - k)) & 1;
    Matrix wq(layer.weights.rows, layer.weights.cols);
    for (std::size_t i = 0; i < w.size(); ++i)
      wq.data[i] = (w[i] < 0 ? -1.0 : 1.0) * (d[i] ? hi[i] : lo[i]) * sp[i];
    const double l = testing::frob2(y, testing::naive_nt(xq, wq));
    if (l < best_loss) {
      best_loss = l;
      best = d;
    }
  }
  return {best, best_loss};
}

TEST(BruteForce, TwoWeightExample) {
  // w = (1.2, 2.6) with x = I: the best choice is the nearest node per weight.
  LinearLayer layer{"two", Matrix(1, 2, {1.2, 2.6})};
  const CalibBatch batch = CalibBatch::unquantized(Matrix(2, 2, {1.0, 0.0, 0.0, 1.0}));
  const auto r = brute_force_optimal(layer, std::span(&batch, 1), unit_scales(2));
  EXPECT_EQ(r.decisions, (Decisions{0, 1}));
  EXPECT_NEAR(r.loss, 0.2 * 0.2 + 0.4 * 0.4, 1e-15);
  EXPECT_EQ(r.free_weights, 2u);
  EXPECT_EQ(r.assignments, 4u);
}

TEST(BruteForce, TieGoesToLexicographicallySmallest) {
  // Both choices of a single weight at 1.25 are equally good.
  LinearLayer layer{"tie", Matrix(1, 1, {1.25})};
  const CalibBatch batch = CalibBatch::unquantized(Matrix(1, 1, {1.0}));
  const auto r = brute_force_optimal(layer, std::span(&batch, 1), unit_scales(1));
  EXPECT_EQ(r.decisions, (Decisions{0}));
}

TEST(BruteForce, RejectsTooManyFreeWeights) {
  Gen g(1);
  LinearLayer layer{"big", g.matrix(5, 5)};
  const CalibBatch batch = CalibBatch::from_inputs(g.matrix(8, 5));
  const auto scales = nvfp4::compute_scales(layer.weights.data);
  const auto n = init_rounding_vars(to_tensor(layer.weights), scales).active_count();
  ASSERT_GT(n, 20u);
  try {
    brute_force_optimal(layer, std::span(&batch, 1), scales, 20);
    FAIL() << "expected an exception";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("max_n = 20"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find(std::to_string(n) + " free weights"), std::string::npos);
  }
}

TEST(BruteForce, MatchesIndependentSearchSerialAndParallel) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Gen g(10 + seed);
    const std::size_t rows = 1 + g.index(3), cols = 2 + g.index(3);
    LinearLayer layer{"r", g.matrix(rows, cols)};
    const CalibBatch batch = CalibBatch::from_inputs(g.matrix(16, cols));
    const auto scales = nvfp4::compute_scales(layer.weights.data);
    const auto ser = brute_force_optimal(layer, std::span(&batch, 1), scales, 20, Execution::serial);
    const auto par = brute_force_optimal(layer, std::span(&batch, 1), scales, 20, Execution::parallel);
    EXPECT_EQ(ser.decisions, par.decisions);
    EXPECT_EQ(ser.loss, par.loss);
    const auto [d, loss] = oracle_search(layer, batch.x, batch.x_q, scales);
    EXPECT_EQ(ser.decisions, d) << seed;
    EXPECT_LE(testing::relative_error(ser.loss, loss), 1e-12);
  }
}

TEST(BruteForce, OptimumBoundsEveryHardening) {
  Gen g(30);
  LinearLayer layer{"c", g.matrix(3, 4)};
  const CalibBatch batch = CalibBatch::from_inputs(g.matrix(32, 4));
  const auto scales = nvfp4::compute_scales(layer.weights.data);
  const auto best = brute_force_optimal(layer, std::span(&batch, 1), scales);
  std::mt19937_64 rng(3);
  for (int k = 0; k < 200; ++k) {
    const auto q = stochastic_round_sample(to_tensor(layer.weights), scales, rng);
    const double l = reconstruction_mse(layer, std::span(&batch, 1), nvfp4::dequantize(q).values);
    EXPECT_GE(l, best.loss * (1 - 1e-12));
  }
  const auto rtn = nvfp4::dequantize(nvfp4::quantize_rtn(to_tensor(layer.weights), scales));
  EXPECT_GE(reconstruction_mse(layer, std::span(&batch, 1), rtn.values), best.loss * (1 - 1e-12));
}

TEST(StochasticRound, Examples) {
  std::mt19937_64 rng(0);
  // On-node and clamped values never move.
  const auto q = stochastic_round_sample(Tensor({3}, {1.5, -4.0, 9.0}), unit_scales(3), rng);
  EXPECT_EQ(nvfp4::dequantize(q).values, (std::vector<double>{1.5, -4.0, 6.0}));
}

TEST(StochasticRound, UnbiasedAndBracketed) {
  const std::vector<double> w = {1.2, -0.3, 2.75, 4.9, 0.05};
  const auto scales = unit_scales(w.size());
  std::mt19937_64 rng(42);
  const std::size_t n = 100000;
  std::vector<double> mean(w.size(), 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const auto deq = nvfp4::dequantize(stochastic_round_sample(Tensor({w.size()}, w), scales, rng));
    for (std::size_t i = 0; i < w.size(); ++i) {
      const auto iv = nvfp4::find_interval(std::abs(w[i]));
      const double mag = std::abs(deq.values[i]);
      ASSERT_TRUE(mag == iv.lower || mag == iv.upper);
      mean[i] += deq.values[i];
    }
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double span = nvfp4::find_interval(std::abs(w[i])).span();
    // Five standard errors of a Bernoulli with variance at most 1/4.
    EXPECT_NEAR(mean[i] / n, w[i], 5 * span * 0.5 / std::sqrt(static_cast<double>(n))) << i;
  }
}

TEST(Study, StructureAndRunningMinimum) {
  Gen g(7);
  LinearLayer layer{"s", g.matrix(2, 3)};
  const CalibBatch batch = CalibBatch::from_inputs(g.matrix(20, 3));
  const auto r = compare_rounding_study(layer, std::span(&batch, 1), 50, 5);
  const std::vector<std::string> labels = {"baseline", "lower", "upper", "stochastic",
                                           "stochastic-best", "optimal"};
  ASSERT_EQ(r.rows.size(), labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) EXPECT_EQ(r.rows[i].label, labels[i]);
  EXPECT_TRUE(r.optimum_computed);
  EXPECT_EQ(r.stochastic_losses.size(), 50u);
  double running = std::numeric_limits<double>::infinity(), prev = running;
  for (double l : r.stochastic_losses) {
    running = std::min(running, l);
    EXPECT_LE(running, prev);
    prev = running;
  }
  EXPECT_EQ(r.row("stochastic-best").mean, running);
  const double opt = r.row("optimal").mean;
  for (const auto& row : r.rows) EXPECT_GE(row.min, opt * (1 - 1e-12)) << row.label;
  std::size_t better = 0;
  for (double l : r.stochastic_losses) better += l < r.row("baseline").mean;
  EXPECT_EQ(better, r.stochastic_better_than_rtn);

  const auto again = compare_rounding_study(layer, std::span(&batch, 1), 50, 5);
  EXPECT_EQ(again.stochastic_losses, r.stochastic_losses);
  const auto j = to_json(r);
  EXPECT_EQ(j["rows"].size(), labels.size());
  EXPECT_NE(format_table(r).find("stochastic-best"), std::string::npos);
  EXPECT_THROW(r.row("missing"), std::out_of_range);
  EXPECT_THROW(compare_rounding_study(layer, std::span(&batch, 1), 0, 5), std::invalid_argument);
}

TEST(Study, OnGridLayerTiesAcrossStrategies) {
  constexpr double u = 0.109375;  // 448 * 2^-12: both scale levels exact
  LinearLayer layer{"grid", Matrix(2, 2, {1.0 * u, -3.0 * u, 0.5 * u, 6.0 * u})};
  const CalibBatch batch = CalibBatch::unquantized(Gen(8).matrix(10, 2));
  const auto r = compare_rounding_study(layer, std::span(&batch, 1), 20, 1);
  for (const char* label : {"baseline", "lower", "stochastic", "stochastic-best", "optimal"})
    EXPECT_EQ(r.row(label).mean, 0.0) << label;
}

TEST(Study, LargeLayerSkipsOptimum) {
  Gen g(9);
  LinearLayer layer{"big", g.matrix(8, 8)};
  const CalibBatch batch = CalibBatch::from_inputs(g.matrix(16, 8));
  const auto r = compare_rounding_study(layer, std::span(&batch, 1), 10, 2);
  EXPECT_FALSE(r.optimum_computed);
  EXPECT_FALSE(r.has_row("optimal"));
  EXPECT_EQ(r.rows.size(), 5u);
}

}  // namespace
}  // namespace faar
