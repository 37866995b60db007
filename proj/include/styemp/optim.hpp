#pragma once

#include <cmath>
#include <vector>

#include "styemp/checkpoint.hpp"
#include "styemp/error.hpp"
#include "styemp/tensor.hpp"

namespace styemp {

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.0;  // 0 keeps the update momentum-free
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm cap; <= 0 disables
};

/// Adaptive per-parameter optimizer with bias-corrected moment estimates.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg.lr > 0) || cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1 || !(cfg.eps > 0))
      throw ContractError("optimizer: invalid hyperparameters");
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  const ParamList<T>& params() const { return params_; }
  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::size_t steps() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Global L2 norm of the current gradients.
  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_)
      if (p.tensor.has_grad())
        for (T g : p.tensor.grad()) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
  }

  /// One update from the accumulated gradients, which are then cleared.
  /// Returns the pre-clipping gradient norm.
  double step() {
    const double norm = grad_norm();
    if (!std::isfinite(norm)) throw ContractError("optimizer: non-finite gradient");
    const double clip = cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double c1 = cfg_.beta1 > 0 ? 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)) : 1.0;
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].tensor;
      if (!p.has_grad()) continue;
      auto data = p.mutable_data();
      auto grad = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = static_cast<double>(grad[i]) * clip;
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g * g;
        const double update = cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        data[i] = static_cast<T>(static_cast<double>(data[i]) - update);
      }
    }
    zero_grad();
    return norm;
  }

 private:
  ParamList<T> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace styemp
