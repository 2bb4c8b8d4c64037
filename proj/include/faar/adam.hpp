// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace faar {

struct AdamParams {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  bool operator==(const AdamParams&) const = default;
};

/// Adaptive-moment optimizer with bias correction over one flat parameter
/// vector. Zero gradients leave both moments at zero, so parameters that
/// never receive gradient never move.
class Adam {
 public:
  Adam(std::size_t n, AdamParams params) : params_(params), m_(n, 0.0), v_(n, 0.0) {
    if (!(params.learning_rate > 0.0) || !(params.epsilon > 0.0))
      throw std::invalid_argument("adam: learning rate and epsilon must be positive");
    if (!(params.beta1 >= 0.0 && params.beta1 < 1.0) || !(params.beta2 >= 0.0 && params.beta2 < 1.0))
      throw std::invalid_argument("adam: decay rates must lie in [0, 1)");
  }

  void step(std::span<double> x, std::span<const double> grad) {
    if (x.size() != m_.size() || grad.size() != m_.size())
      throw std::invalid_argument("adam: parameter size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(params_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(params_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m_[i] = params_.beta1 * m_[i] + (1.0 - params_.beta1) * grad[i];
      v_[i] = params_.beta2 * v_[i] + (1.0 - params_.beta2) * grad[i] * grad[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      x[i] -= params_.learning_rate * mhat / (std::sqrt(vhat) + params_.epsilon);
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  AdamParams params_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

}  // namespace faar
