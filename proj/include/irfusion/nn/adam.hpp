#pragma once

#include <cmath>
#include <vector>

#include "irfusion/nn/tensor.hpp"

namespace irfusion::nn {

// Bias-corrected Adam over a fixed parameter list. Gradients are left in
// place; callers zero them explicitly when the accumulation window ends.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, T lr, T beta1 = T(0.9),
               T beta2 = T(0.999), T eps = T(1e-8)) {
  for (Parameter<T>* p : params) {
    p->step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(p->step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(p->step));
    for (size_t i = 0; i < p->value.size(); ++i) {
      const T g = p->grad.v[i];
      p->m.v[i] = beta1 * p->m.v[i] + (T(1) - beta1) * g;
      p->s.v[i] = beta2 * p->s.v[i] + (T(1) - beta2) * g * g;
      const T mhat = static_cast<T>(p->m.v[i] / bc1);
      const T shat = static_cast<T>(p->s.v[i] / bc2);
      p->value.v[i] -= lr * mhat / (static_cast<T>(std::sqrt(static_cast<double>(shat))) + eps);
    }
  }
}

}  // namespace irfusion::nn
