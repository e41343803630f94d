#pragma once

#include <functional>
#include <vector>

#include "useg/autodiff.hpp"

namespace useg {

// Central finite-difference oracle. `f` must build a scalar graph from the
// given leaves; the analytic gradient from one backward pass is compared to
// (f(x+eps*e) - f(x-eps*e)) / (2*eps) for every coordinate of every input
// that requires gradients. Returns the max relative error
// |a-n| / max(|a|,|n|,1e-8). Instantiate with T=double for the shadow check.
template <typename T>
double grad_check(
    const std::function<Variable<T>(const std::vector<Variable<T>>&)>& f,
    std::vector<Variable<T>> inputs, double eps) {
  if (eps < 1e-6 || eps > 1e-2) {
    throw ValueError("grad_check eps must lie in [1e-6, 1e-2]");
  }
  for (auto& v : inputs) v->zero_grad();
  Variable<T> out = f(inputs);
  if (out->value.size() != 1) {
    throw ValueError("grad_check expects a scalar-valued f");
  }
  backward(out);

  NoGradGuard no_grad;  // numeric evaluations need values only
  double max_rel = 0.0;
  for (auto& v : inputs) {
    if (!v->requires_grad) continue;
    Tensor<T> analytic =
        v->grad_live ? v->grad : zeros_like(v->value);
    for (std::int64_t i = 0; i < v->value.size(); ++i) {
      const T saved = v->value[i];
      v->value[i] = saved + static_cast<T>(eps);
      const double fp = static_cast<double>(f(inputs)->value[0]);
      v->value[i] = saved - static_cast<T>(eps);
      const double fm = static_cast<double>(f(inputs)->value[0]);
      v->value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace useg
