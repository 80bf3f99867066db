#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "qid/numerics/tensor.hpp"

namespace qid {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;  // scalar entries compared
  std::size_t skipped = 0;  // entries of frozen parameters
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares tape gradients of `loss_fn` against central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h for every entry of every parameter
/// that requires grad. `loss_fn` must rebuild the graph from the current
/// parameter values on each call. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport grad_check_report(const std::function<Tensor<double>()>& loss_fn,
                                         std::vector<Tensor<double>> params, double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  Tape<double> tape;
  double base = 0.0;
  {
    auto scope = tape.record();
    auto loss = loss_fn();
    base = loss.item();
    backward(loss, tape);
  }
  {
    const double again = loss_fn().item();
    if (again != base) throw ContractError("grad_check: loss function is not deterministic");
  }

  GradCheckReport report;
  for (auto& p : params) {
    if (!p.requires_grad()) {
      report.skipped += p.numel();
      continue;
    }
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss_fn().item();
      values[i] = saved - h;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_analytic = analytic[i];
        report.worst_numeric = numeric;
      }
      ++report.checked;
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

inline double grad_check(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> params,
                         double h = 1e-5) {
  return grad_check_report(loss_fn, std::move(params), h).max_relative_error;
}

}  // namespace qid
