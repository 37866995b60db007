#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "styemp/checkpoint.hpp"
#include "styemp/error.hpp"
#include "styemp/tensor.hpp"

namespace styemp {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences, entry by entry:
///   err = |analytic - numeric| / max(1, |analytic|, |numeric|).
/// `loss_fn` must be deterministic and build its graph from `params`.
/// `max_entries_per_param` > 0 checks an evenly strided subset of each
/// parameter.
inline GradCheckReport grad_check_report(const std::function<Tensor<double>()>& loss_fn,
                                         std::vector<Tensor<double>> params, double eps = 1e-5,
                                         std::size_t max_entries_per_param = 0) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = loss_fn();
    if (!std::isfinite(loss.item())) throw ContractError("grad_check: loss is not finite");
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  auto evaluate = [&] {
    NoGradScope<double> no_grad;
    const double v = loss_fn().item();
    if (!std::isfinite(v)) throw ContractError("grad_check: non-finite loss under perturbation");
    return v;
  };

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    const std::size_t n = data.size();
    std::size_t stride = 1;
    if (max_entries_per_param > 0 && n > max_entries_per_param)
      stride = (n + max_entries_per_param - 1) / max_entries_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double original = data[i];
      data[i] = original + eps;
      const double plus = evaluate();
      data[i] = original - eps;
      const double minus = evaluate();
      data[i] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++report.entries_checked;
      if (err > report.max_rel_error || report.entries_checked == 1) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_param = pi;
        report.worst_entry = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

inline double grad_check(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> params,
                         double eps = 1e-5) {
  return grad_check_report(loss_fn, std::move(params), eps).max_rel_error;
}

inline std::vector<Tensor<double>> tensors_of(const ParamList<double>& params) {
  std::vector<Tensor<double>> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

inline double grad_check(const std::function<Tensor<double>()>& loss_fn, const ParamList<double>& params,
                         double eps = 1e-5) {
  return grad_check(loss_fn, tensors_of(params), eps);
}

}  // namespace styemp
