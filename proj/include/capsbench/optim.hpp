#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "capsbench/tensor.hpp"

namespace capsbench {

// Trainable tensor plus its ADAM state. The step count t is per parameter
// and only ever increases.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> m, v;
  int64_t t = 0;

  size_t numel() const { return value.numel(); }
};

template <typename T>
struct AdamOptions {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

// Bias-corrected ADAM update. A missing gradient buffer counts as a zero
// gradient. Gradients are cleared after the step.
template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, const AdamOptions<T>& opt = {}) {
  for (Parameter<T>* p : params) {
    auto node = p->value.node();
    const size_t n = p->numel();
    if (p->m.size() != n) {
      p->m.assign(n, T(0));
      p->v.assign(n, T(0));
    }
    p->t += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(opt.beta1), static_cast<double>(p->t)));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(opt.beta2), static_cast<double>(p->t)));
    const bool has_grad = !node->grad.empty();
    for (size_t i = 0; i < n; ++i) {
      const T g = has_grad ? node->grad[i] : T(0);
      p->m[i] = opt.beta1 * p->m[i] + (T(1) - opt.beta1) * g;
      p->v[i] = opt.beta2 * p->v[i] + (T(1) - opt.beta2) * g * g;
      const T mhat = p->m[i] / bc1;
      const T vhat = p->v[i] / bc2;
      node->value[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
    node->grad.clear();
  }
}

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (Parameter<T>* p : params) p->value.zero_grad();
}

}  // namespace capsbench
