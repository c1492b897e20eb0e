#pragma once

// Central-difference gradient verification. Given a closure that rebuilds a
// scalar loss from a set of parameter tensors, every analytic derivative is
// compared against (f(θ+h) - f(θ-h)) / 2h with h scaled to the parameter's
// magnitude. The difference quotient is always accumulated in double.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "graphmft/tensor.hpp"

namespace graphmft {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t num_params = 0;        // scalar entries checked
  std::string worst_param;           // name of tensor holding the worst entry
  std::size_t worst_index = 0;       // flat index within that tensor
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool pass(double tol) const { return max_rel_err <= tol; }
};

template <typename Real>
struct NamedParam {
  std::string name;
  Tensor<Real> tensor;
};

// loss_fn must rebuild the graph from the current parameter values on every
// call (perturbed evaluations included), and the whole computation must be
// deterministic for the comparison to mean anything.
template <typename Real>
GradCheckReport grad_check(const std::function<Tensor<Real>()>& loss_fn,
                           std::vector<NamedParam<Real>> params, Real eps) {
  GradCheckReport report;

  for (auto& p : params) p.tensor.zero_grad();
  Tensor<Real> loss = loss_fn();
  backward(loss);

  for (auto& p : params) {
    std::vector<Real> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    for (std::size_t i = 0; i < p.tensor.size(); ++i) {
      const Real saved = p.tensor.at(i);
      const Real h = eps * std::max(Real(1), std::abs(saved));

      p.tensor.at(i) = saved + h;
      const double f_plus = static_cast<double>(loss_fn().item());
      p.tensor.at(i) = saved - h;
      const double f_minus = static_cast<double>(loss_fn().item());
      p.tensor.at(i) = saved;

      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[i]);
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});

      ++report.num_params;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace graphmft
