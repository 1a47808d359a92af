#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/core/tensor.hpp"

namespace diffks {

struct AdamConfig {
  double lr = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Throws NumericalError naming the first parameter with a non-finite gradient.
template <class T>
void check_gradients(const std::vector<ParamGroup<T>>& groups) {
  for (const auto& g : groups)
    for (const auto* p : g.params)
      for (std::size_t i = 0; i < p->grad.size(); ++i)
        if (!std::isfinite(p->grad[i]))
          throw NumericalError("non-finite gradient in " + p->name + " at index " + std::to_string(i));
}

template <class T>
double global_grad_norm(const std::vector<ParamGroup<T>>& groups) {
  double sq = 0.0;
  for (const auto& g : groups)
    for (const auto* p : g.params)
      for (T x : p->grad) sq += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(sq);
}

/// Rescales all gradients so their global L2 norm is at most max_norm (0 disables).
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::vector<ParamGroup<T>>& groups, double max_norm) {
  const double norm = global_grad_norm(groups);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<T>(max_norm / norm);
    for (auto& g : groups)
      for (auto* p : g.params)
        for (auto& x : p->grad) x *= scale;
  }
  return norm;
}

/// Bias-corrected Adam over every group, then zeroes the gradients. Each group keeps
/// its own step count. Nothing is updated if any gradient is non-finite.
template <class T>
void adam_step(std::vector<ParamGroup<T>>& groups, const AdamConfig& cfg) {
  check_gradients(groups);
  for (auto& g : groups) {
    ++g.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(g.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(g.step));
    for (auto* p : g.params) {
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double grad = p->grad[i];
        const double m = cfg.beta1 * p->m[i] + (1.0 - cfg.beta1) * grad;
        const double v = cfg.beta2 * p->v[i] + (1.0 - cfg.beta2) * grad * grad;
        p->m[i] = static_cast<T>(m);
        p->v[i] = static_cast<T>(v);
        p->value[i] -= static_cast<T>(cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps));
        p->grad[i] = T(0);
      }
    }
  }
}

}  // namespace diffks
