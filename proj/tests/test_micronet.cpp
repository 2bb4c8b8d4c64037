// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "faar/micronet.hpp"
#include "test_support.hpp"

namespace faar {
namespace {

using testing::Gen;

/// Straight-line student loss with activation quantization off.
double oracle_stage2_total(const MicroNet& net, const Matrix& x, std::span<const RoundingVars> rvs,
                           double beta, const Stage2Config& cfg) {
  auto run = [&](bool quantized) {
    Matrix act = x;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      Matrix w = net.layers[l].weights;
      if (quantized) w.data = soft_quantize(rvs[l], beta);
      Matrix z = testing::naive_nt(act, w);
      if (l + 1 == net.layers.size()) return std::pair{z, act};
      for (double& v : z.data) v = std::max(v, 0.0);
      act = z;
    }
    return std::pair{Matrix{}, Matrix{}};
  };
  const auto [zt, ht] = run(false);
  const auto [zs, hs] = run(true);
  double kl = 0.0;
  for (std::size_t r = 0; r < zt.rows; ++r) {
    double st = 0.0, ss = 0.0;
    for (std::size_t c = 0; c < zt.cols; ++c) {
      st += std::exp(zt(r, c) / cfg.tau);
      ss += std::exp(zs(r, c) / cfg.tau);
    }
    for (std::size_t c = 0; c < zt.cols; ++c) {
      const double p = std::exp(zt(r, c) / cfg.tau) / st;
      const double q = std::exp(zs(r, c) / cfg.tau) / ss;
      kl += p * std::log(p / q);
    }
  }
  kl /= static_cast<double>(zt.rows);
  double reg = 0.0;
  for (const auto& rv : rvs) reg += round_reg_loss(rv).loss;
  return cfg.lambda_kl * kl + testing::frob2(ht, hs) + cfg.lambda_round * reg;
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Gen g(1);
  const Matrix z = g.matrix(20, 7, 30.0);
  const Matrix p = softmax_rows(z, 0.7);
  Matrix shifted = z;
  for (double& v : shifted.data) v += 1000.0;
  const Matrix ps = softmax_rows(shifted, 0.7);
  for (std::size_t r = 0; r < p.rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < p.cols; ++c) {
      s += p(r, c);
      EXPECT_NEAR(p(r, c), ps(r, c), 1e-12);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(softmax_rows(z, 0.0), std::invalid_argument);
}

TEST(Forward, HandComputedTwoLayerNet) {
  MicroNet net;
  net.layers.push_back({"a", Matrix(2, 2, {1.0, -1.0, 0.5, 2.0})});
  net.layers.push_back({"b", Matrix(2, 2, {1.0, 1.0, -1.0, 0.0})});
  const Matrix x(1, 2, {1.0, 2.0});
  const auto f = forward(net, x, 1.0);
  // pre0 = (1 - 2, 0.5 + 4) = (-1, 4.5); relu = (0, 4.5); logits = (4.5, 0).
  EXPECT_EQ(f.pre[0], Matrix(1, 2, {-1.0, 4.5}));
  EXPECT_EQ(f.h_last, Matrix(1, 2, {0.0, 4.5}));
  EXPECT_EQ(f.logits, Matrix(1, 2, {4.5, 0.0}));
  EXPECT_NEAR(f.probs(0, 0), 1.0 / (1.0 + std::exp(-4.5)), 1e-15);
  EXPECT_THROW(forward(net, Matrix(1, 3), 1.0), std::invalid_argument);
}

TEST(Forward, HardModeOnGridNetMatchesTeacher) {
  // Node multiples of 448 * 2^-12 with a block max at 6 of them: scales are exact.
  constexpr double u = 0.109375;
  MicroNet net;
  net.layers.push_back({"a", Matrix(2, 2, {1.0 * u, -1.5 * u, 3.0 * u, 6.0 * u})});
  net.layers.push_back({"b", Matrix(2, 2, {0.5 * u, 2.0 * u, -4.0 * u, 6.0 * u})});
  const auto rvs = init_net_vars(net, 16);
  const Matrix x = Gen(2).matrix(4, 2);
  const auto t = forward(net, x, 1.0);
  const auto s = forward(net, x, 1.0, QuantizedMode{rvs, 40.0, true, false, 16});
  EXPECT_EQ(t.logits, s.logits);
}

TEST(KlLoss, Examples) {
  const Matrix p(2, 3, {0.2, 0.3, 0.5, 1.0, 0.0, 0.0});
  EXPECT_EQ(kl_loss(p, p), 0.0);
  EXPECT_NEAR(kl_loss(Matrix(1, 2, {1.0, 0.0}), Matrix(1, 2, {0.5, 0.5})), std::log(2.0), 1e-15);
  // Flooring keeps a zero student probability finite.
  EXPECT_NEAR(kl_loss(Matrix(1, 2, {0.5, 0.5}), Matrix(1, 2, {1.0, 0.0})),
              0.5 * std::log(0.5 / 1.0) + 0.5 * std::log(0.5 / 1e-12), 1e-12);
  EXPECT_THROW(kl_loss(Matrix(1, 2, {0.5, 0.6}), p), std::invalid_argument);
  EXPECT_THROW(kl_loss(Matrix(1, 2, {0.5, 0.6}), Matrix(1, 2, {0.5, 0.5})), std::invalid_argument);
}

TEST(KlLoss, NonNegativeOnRandomDistributions) {
  Gen g(3);
  for (int k = 0; k < 200; ++k) {
    const Matrix p = softmax_rows(g.matrix(5, 6, 3.0), 1.0);
    const Matrix q = softmax_rows(g.matrix(5, 6, 3.0), 1.0);
    EXPECT_GE(kl_loss(p, q), -1e-15);
  }
}

TEST(Stage2Loss, DecomposesIntoWeightedParts) {
  const MicroNet net = MicroNet::random({6, 8, 5}, 4);
  const auto rvs = init_net_vars(net, 16);
  const Matrix x = Gen(4).matrix(10, 6);
  Stage2Config cfg;
  cfg.lambda_kl = 0.7;
  cfg.lambda_round = 0.3;
  const auto t = forward(net, x, 1.0);
  const auto s = forward(net, x, 1.0, QuantizedMode{rvs, 9.0, false, true, 16});
  const auto parts = stage2_loss(t, s, rvs, cfg);
  EXPECT_DOUBLE_EQ(parts.total, 0.7 * parts.kl + parts.mse + 0.3 * parts.round);
  EXPECT_EQ(parts.kl, kl_loss(t.probs, s.probs));
  EXPECT_DOUBLE_EQ(parts.mse, testing::frob2(t.h_last, s.h_last));
  EXPECT_DOUBLE_EQ(parts.round, round_reg_loss(rvs[0]).loss + round_reg_loss(rvs[1]).loss);
  const auto self = stage2_loss(t, t, rvs, cfg);
  EXPECT_EQ(self.kl, 0.0);
  EXPECT_EQ(self.mse, 0.0);
}

TEST(Backprop, MatchesCentralDifferencesAndStraightLineOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Gen g(50 + seed);
    const MicroNet net = MicroNet::random({5, 8, 6, 4}, seed);
    auto rvs = init_net_vars(net, 16);
    for (auto& rv : rvs)
      for (std::size_t i = 0; i < rv.size(); ++i)
        if (!rv.frozen[i]) rv.v[i] = g.uniform(0.05, 0.95);
    const Matrix x = g.matrix(7, 5);
    Stage2Config cfg;
    cfg.quantize_activations = false;
    cfg.lambda_kl = 1.3;
    cfg.tau = 1.5;
    cfg.lambda_round = 0.02;
    const double beta = g.uniform(3.0, 10.0);
    const auto teacher = forward(net, x, cfg.tau);
    const auto grad = backprop_stage2(net, x, teacher, rvs, beta, cfg);
    EXPECT_LE(testing::relative_error(grad.parts.total, oracle_stage2_total(net, x, rvs, beta, cfg)), 1e-12);

    double max_rel = 0.0;
    for (std::size_t l = 0; l < rvs.size(); ++l) {
      for (std::size_t i = 0; i < rvs[l].size(); ++i) {
        if (rvs[l].frozen[i]) {
          EXPECT_EQ(grad.dv[l][i], 0.0);
          continue;
        }
        const double fd = testing::central_difference(rvs[l].v, i, 1e-6, [&] {
          return oracle_stage2_total(net, x, rvs, beta, cfg);
        });
        max_rel = std::max(max_rel, std::abs(grad.dv[l][i] - fd) / std::max(std::abs(fd), 1e-3));
      }
    }
    EXPECT_LE(max_rel, 1e-4) << "seed " << seed;
  }
}

TEST(Backprop, FrozenElementsGetZeroGradient) {
  const MicroNet net = MicroNet::random({4, 6, 3}, 9);
  auto rvs = init_net_vars(net, 16);
  // Pin element 0 at the top node, as init does for clamped weights.
  rvs[0].lower[0] = rvs[0].upper[0] = 6.0;
  rvs[0].v[0] = 0.0;
  rvs[0].frozen[0] = 1;
  const Matrix x = Gen(9).matrix(5, 4);
  Stage2Config cfg;
  const auto g = backprop_stage2(net, x, forward(net, x, 1.0), rvs, 10.0, cfg);
  EXPECT_EQ(g.dv[0][0], 0.0);
}

TEST(AlignModel, ZeroStepsLeavesVarsAndTeacherUnchanged) {
  const MicroNet net = MicroNet::random({6, 10, 4}, 11);
  const MicroNet copy = net;
  const auto rvs = init_net_vars(net, 16);
  const Matrix x = Gen(11).matrix(12, 6);
  Stage2Config cfg;
  cfg.steps = 0;
  const auto r = align_model(net, rvs, x, cfg);
  ASSERT_EQ(r.rvs.size(), rvs.size());
  for (std::size_t l = 0; l < rvs.size(); ++l) EXPECT_EQ(r.rvs[l].v, rvs[l].v);
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_EQ(r.trace[0].beta, 40.0);
  cfg.steps = 20;
  const auto r2 = align_model(net, rvs, x, cfg);
  EXPECT_EQ(r2.trace.size(), 21u);
  for (std::size_t l = 0; l < net.layers.size(); ++l) EXPECT_EQ(net.layers[l].weights, copy.layers[l].weights);
}

TEST(AlignModel, DeterministicAndBetaSchedules) {
  const MicroNet net = MicroNet::random({6, 10, 4}, 12);
  const auto rvs = init_net_vars(net, 16);
  const Matrix x = Gen(12).matrix(24, 6);
  Stage2Config cfg;
  cfg.steps = 30;
  cfg.batch_size = 8;
  const auto a = align_model(net, rvs, x, cfg, 20.0);
  const auto b = align_model(net, rvs, x, cfg, 20.0);
  for (std::size_t l = 0; l < rvs.size(); ++l) EXPECT_EQ(a.rvs[l].v, b.rvs[l].v);
  EXPECT_EQ(a.trace.front().beta, 20.0);
  EXPECT_EQ(a.trace.back().beta, 40.0);
  cfg.beta_mode = BetaMode::restart;
  cfg.beta_start = 2.0;
  cfg.beta_end = 8.0;
  const auto c = align_model(net, rvs, x, cfg, 20.0);
  EXPECT_EQ(c.trace.front().beta, 2.0);
  EXPECT_EQ(c.trace.back().beta, 8.0);
  for (const auto& rv : c.rvs)
    for (double v : rv.v) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
}

TEST(AlignModel, RejectsMismatchedVars) {
  const MicroNet net = MicroNet::random({6, 10, 4}, 13);
  auto rvs = init_net_vars(net, 16);
  rvs.pop_back();
  EXPECT_THROW(align_model(net, rvs, Matrix(4, 6, 1.0), Stage2Config{}), std::invalid_argument);
  EXPECT_THROW(align_model(net, init_net_vars(net, 16), Matrix(0, 6), Stage2Config{}),
               std::invalid_argument);
}

}  // namespace
}  // namespace faar
