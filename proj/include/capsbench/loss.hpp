#pragma once

#include <vector>

#include "capsbench/tensor.hpp"

namespace capsbench {

// Margin loss over class probabilities:
//   L = mean_b (1/M) sum_j [ T_j max(0, 0.9 - p_j)^2
//                            + 0.5 (1-T_j) max(0, p_j - 0.1)^2 ]
// Targets are 0/1 and receive no gradient. The squared hinge is C^1, so the
// subgradient at the corners is 0 from the inactive side.
template <typename T>
Tensor<T> margin_loss(const Tensor<T>& probs, const Tensor<T>& targets,
                      T pos_margin = T(0.9), T neg_margin = T(0.1), T neg_weight = T(0.5)) {
  if (probs.rank() != 2) throw ConfigError("margin_loss: probabilities must be [B,M]");
  detail::check_same_shape(probs, targets, "margin_loss");
  const int B = probs.dim(0), M = probs.dim(1);
  const T* p = probs.data();
  const T* t = targets.data();
  double total = 0.0;
  for (size_t i = 0; i < probs.numel(); ++i) {
    const T pos = std::max(T(0), pos_margin - p[i]);
    const T neg = std::max(T(0), p[i] - neg_margin);
    total += static_cast<double>(t[i] * pos * pos + neg_weight * (T(1) - t[i]) * neg * neg);
  }
  const T loss = static_cast<T>(total / (static_cast<double>(B) * M));

  auto pn = probs.node();
  auto tn = targets.node();
  return make_op<T>(Shape{}, std::vector<T>{loss}, {probs, targets},
                    [pn, tn, B, M, pos_margin, neg_margin, neg_weight](TensorNode<T>& o) {
                      if (!pn->needs_grad) return;
                      pn->ensure_grad();
                      const T g = o.grad[0] / (static_cast<T>(B) * static_cast<T>(M));
                      for (size_t i = 0; i < pn->value.size(); ++i) {
                        const T pi = pn->value[i];
                        const T ti = tn->value[i];
                        const T pos = std::max(T(0), pos_margin - pi);
                        const T neg = std::max(T(0), pi - neg_margin);
                        pn->grad[i] += g * (ti * T(-2) * pos + neg_weight * (T(1) - ti) * T(2) * neg);
                      }
                    });
}

// One-hot/one-or-two-hot target rows for margin loss.
template <typename T>
Tensor<T> make_targets(const std::vector<std::vector<int>>& labels_per_sample, int classes) {
  const int B = static_cast<int>(labels_per_sample.size());
  Tensor<T> t({B, classes});
  for (int b = 0; b < B; ++b)
    for (int lab : labels_per_sample[b]) t.data()[static_cast<size_t>(b) * classes + lab] = T(1);
  return t;
}

}  // namespace capsbench
