#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/core/tensor.hpp"

namespace diffks {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

namespace detail {

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalError(std::string("grad_check: non-finite ") + what);
}

inline void fold(GradCheckResult& r, std::size_t index, double analytic, double numeric) {
  require_finite(analytic, "analytic gradient");
  require_finite(numeric, "finite difference");
  const double e = rel_error(analytic, numeric);
  ++r.coordinates;
  if (r.coordinates == 1 || e > r.max_rel_error) {
    r.max_rel_error = e;
    r.worst_index = index;
    r.analytic = analytic;
    r.numeric = numeric;
  }
}

}  // namespace detail

/// Compares the reverse-mode gradient of a scalar function against central differences.
/// `f(tape, x)` must build a 1x1 tensor from the leaf x; it is re-evaluated on fresh
/// gradient-free tapes for each perturbation.
/// Returns max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <class T, class F>
GradCheckResult grad_check(F&& f, const std::vector<T>& x, std::size_t rows, std::size_t cols, double eps) {
  std::vector<T> analytic(x.size(), T(0));
  {
    Tape<T> tape;
    auto leaf = tape.variable(rows, cols, x);
    auto y = f(tape, leaf);
    detail::require_finite(static_cast<double>(y.item()), "function value");
    tape.backward(y);
    auto g = leaf.grad();
    if (!g.empty()) std::copy(g.begin(), g.end(), analytic.begin());
  }
  auto eval = [&](const std::vector<T>& point) {
    Tape<T> tape(false);
    auto leaf = tape.constant(rows, cols, point);
    return static_cast<double>(f(tape, leaf).item());
  };
  GradCheckResult result;
  std::vector<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = static_cast<T>(x[i] + eps);
    const double up = eval(probe);
    probe[i] = static_cast<T>(x[i] - eps);
    const double down = eval(probe);
    probe[i] = x[i];
    detail::fold(result, i, static_cast<double>(analytic[i]), (up - down) / (2.0 * eps));
  }
  return result;
}

/// Same oracle, perturbing parameters in place. `f(tape)` builds the scalar loss.
/// Coordinates are visited in parameter order; `max_coords_per_param` = 0 checks all.
template <class T, class F>
GradCheckResult grad_check_params(F&& f, const std::vector<Param<T>*>& params, double eps,
                                  std::size_t max_coords_per_param = 0) {
  for (auto* p : params) std::fill(p->grad.begin(), p->grad.end(), T(0));
  {
    Tape<T> tape;
    auto y = f(tape);
    detail::require_finite(static_cast<double>(y.item()), "function value");
    tape.backward(y);
  }
  auto eval = [&] {
    Tape<T> tape(false);
    return static_cast<double>(f(tape).item());
  };
  GradCheckResult result;
  std::size_t flat = 0;
  for (auto* p : params) {
    const std::size_t n = p->size();
    const std::size_t stride = (max_coords_per_param == 0 || n <= max_coords_per_param) ? 1 : n / max_coords_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const T saved = p->value[i];
      p->value[i] = static_cast<T>(saved + eps);
      const double up = eval();
      p->value[i] = static_cast<T>(saved - eps);
      const double down = eval();
      p->value[i] = saved;
      detail::fold(result, flat + i, static_cast<double>(p->grad[i]), (up - down) / (2.0 * eps));
    }
    flat += n;
  }
  for (auto* p : params) std::fill(p->grad.begin(), p->grad.end(), T(0));
  return result;
}

}  // namespace diffks
