#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "uq/tensor.hpp"

namespace uq {

struct AdamConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second-moment accumulators for one parameter tensor.
struct AdamState {
  Tensor m, v;
  static AdamState like(const Tensor& p) {
    return {Tensor::zeros(p.shape()), Tensor::zeros(p.shape())};
  }
};

/// One bias-corrected Adam update, in place. t is the 1-based step count.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state,
                      const AdamConfig& cfg, std::int64_t t) {
  if (!param.same_shape(grad) || !param.same_shape(state.m)) {
    throw std::invalid_argument("adam_step: param/grad/state shapes disagree");
  }
  if (t < 1) throw std::invalid_argument("adam_step: step count must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    param[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

/// Convenience wrapper tracking state and step count for a parameter list.
class AdamOptimizer {
 public:
  AdamOptimizer(const std::vector<Tensor*>& params, AdamConfig cfg)
      : params_(params), cfg_(cfg) {
    for (const Tensor* p : params_) states_.push_back(AdamState::like(*p));
  }

  /// grads[i] pairs with the i-th parameter passed at construction.
  void step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size()) {
      throw std::invalid_argument("AdamOptimizer: gradient count mismatch");
    }
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      adam_step(*params_[i], grads[i], states_[i], cfg_, t_);
    }
  }

  std::int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<AdamState>& states() const { return states_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<AdamState> states_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

}  // namespace uq
