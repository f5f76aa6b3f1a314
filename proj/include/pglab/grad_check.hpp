#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace pglab {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "param[idx]" of the worst entry
  int checked = 0;
};

// Compares reverse-mode gradients of a scalar-valued function against central
// finite differences over every element of every parameter. The function must
// rebuild its computation from the parameter values on each call.
//
// Relative error is |a - n| / max(1, |a|, |n|) so near-zero gradients are
// judged on absolute error.
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  double epsilon = 1e-5,
                                  const std::vector<std::string>& names = {}) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw AutodiffError("grad_check: epsilon " + std::to_string(epsilon) +
                        " outside [1e-7, 1e-3]");
  }
  // Analytic pass.
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic(params.size());
  {
    Graph g;
    Tensor loss = f();
    if (!std::isfinite(loss.value())) {
      throw AutodiffError("grad_check: loss is not finite");
    }
    g.backward(loss);
    for (std::size_t k = 0; k < params.size(); ++k) {
      analytic[k] = params[k].has_grad() ? params[k].grad()
                                         : std::vector<double>(params[k].size(), 0.0);
    }
  }

  // Numeric pass — no graph, plain forward evaluations.
  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p.value(i);
      p.value(i) = orig + epsilon;
      const double fp = f().value();
      p.value(i) = orig - epsilon;
      const double fm = f().value();
      p.value(i) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw AutodiffError("grad_check: perturbed loss is not finite");
      }
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double a = analytic[k][i];
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        const std::string base =
            k < names.size() ? names[k] : "param" + std::to_string(k);
        res.worst = base + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace pglab
