#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/core/rng.hpp"
#include "diffks/core/tensor.hpp"

namespace diffks {

/// 1 = valid position, 0 = masked.
using Mask = std::vector<std::uint8_t>;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                         " vs " + shape_str(b.rows(), b.cols()));
}

template <class T>
void require_same_tape(const Tensor<T>& a, const Tensor<T>& b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands live on different tapes");
}

template <class T>
void require_column(const Tensor<T>& a, const char* op) {
  if (a.cols() != 1)
    throw DimensionError(std::string(op) + ": expected a column vector, got " +
                         shape_str(a.rows(), a.cols()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] * [k x n] -> [m x n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree " +
                         detail::shape_str(a.rows(), a.cols()) + " * " +
                         detail::shape_str(b.rows(), b.cols()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n);
  detail::Map<T>(out.data(), m, n).noalias() =
      detail::MapC<T>(a.values().data(), m, k) * detail::MapC<T>(b.values().data(), k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape().make(m, n, std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& t, std::uint32_t self) {
    detail::MapC<T> g(t.grad_of(self), m, n);
    if (T* ga = t.accum(ia))
      detail::Map<T>(ga, m, k).noalias() += g * detail::MapC<T>(t.data(ib), k, n).transpose();
    if (T* gb = t.accum(ib))
      detail::Map<T>(gb, k, n).noalias() += detail::MapC<T>(t.data(ia), m, k).transpose() * g;
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(r * c);
  detail::Map<T>(out.data(), c, r) = detail::MapC<T>(a.values().data(), r, c).transpose();
  const auto ia = a.id();
  return a.tape().make(c, r, std::move(out), {a}, [ia, r, c](Tape<T>& t, std::uint32_t self) {
    if (T* ga = t.accum(ia))
      detail::Map<T>(ga, r, c) += detail::MapC<T>(t.grad_of(self), c, r).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryOp { add, sub, mul };

template <class T>
Tensor<T> binary(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape(a, b, op == BinaryOp::add ? "add" : op == BinaryOp::sub ? "sub" : "mul");
  const std::size_t n = a.size();
  const T* x = a.values().data();
  const T* y = b.values().data();
  std::vector<T> out(n);
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
      break;
    case BinaryOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
      break;
    case BinaryOp::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
      break;
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().make(a.rows(), a.cols(), std::move(out), {a, b},
                       [op, ia, ib, n](Tape<T>& t, std::uint32_t self) {
                         const T* g = t.grad_of(self);
                         if (T* ga = t.accum(ia)) {
                           if (op == BinaryOp::mul) {
                             const T* y = t.data(ib);
                             for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
                           } else {
                             for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                           }
                         }
                         if (T* gb = t.accum(ib)) {
                           if (op == BinaryOp::mul) {
                             const T* x = t.data(ia);
                             for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * x[i];
                           } else if (op == BinaryOp::sub) {
                             for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                           } else {
                             for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                           }
                         }
                       });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinaryOp::add, a, b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinaryOp::sub, a, b);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinaryOp::mul, a, b);
}

/// scale * a + shift
template <class T>
Tensor<T> affine(const Tensor<T>& a, T scale, T shift = T(0)) {
  const std::size_t n = a.size();
  const T* x = a.values().data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = scale * x[i] + shift;
  const auto ia = a.id();
  return a.tape().make(a.rows(), a.cols(), std::move(out), {a}, [ia, n, scale](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self);
    if (T* ga = t.accum(ia))
      for (std::size_t i = 0; i < n; ++i) ga[i] += scale * g[i];
  });
}

enum class UnaryOp { tanh, sigmoid, log, exp };

template <class T>
Tensor<T> unary(UnaryOp op, const Tensor<T>& a) {
  const std::size_t n = a.size();
  const T* x = a.values().data();
  std::vector<T> out(n);
  switch (op) {
    case UnaryOp::tanh:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
      break;
    case UnaryOp::sigmoid:
      for (std::size_t i = 0; i < n; ++i)
        out[i] = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i])) : std::exp(x[i]) / (T(1) + std::exp(x[i]));
      break;
    case UnaryOp::log:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(x[i] > T(0))) throw DomainError("log of non-positive value " + std::to_string(x[i]));
        out[i] = std::log(x[i]);
      }
      break;
    case UnaryOp::exp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x[i]);
      break;
  }
  const auto ia = a.id();
  return a.tape().make(a.rows(), a.cols(), std::move(out), {a}, [op, ia, n](Tape<T>& t, std::uint32_t self) {
    T* ga = t.accum(ia);
    if (!ga) return;
    const T* g = t.grad_of(self);
    const T* y = t.data(self);
    const T* x = t.data(ia);
    switch (op) {
      case UnaryOp::tanh:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
        break;
      case UnaryOp::sigmoid:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
        break;
      case UnaryOp::log:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / x[i];
        break;
      case UnaryOp::exp:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
        break;
    }
  });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary(UnaryOp::tanh, a);
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(UnaryOp::sigmoid, a);
}
template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return unary(UnaryOp::log, a);
}
template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary(UnaryOp::exp, a);
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// axis 0 stacks rows (all inputs share cols); axis 1 stacks columns (all share rows).
template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
  auto& tape = parts[0].tape();
  if (parts.size() == 1) return parts[0];
  std::size_t rows = 0, cols = 0;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    if (axis == 0) {
      if (p.cols() != parts[0].cols()) throw DimensionError("concat(axis=0): column counts differ");
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts[0].rows()) throw DimensionError("concat(axis=1): row counts differ");
      cols += p.cols();
      rows = p.rows();
    }
  }
  std::vector<T> out(rows * cols);
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> extents;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    ids.push_back(p.id());
    const T* x = p.values().data();
    if (axis == 0) {
      std::copy(x, x + p.size(), out.begin() + static_cast<std::ptrdiff_t>(offset * cols));
      extents.push_back(p.rows());
      offset += p.rows();
    } else {
      for (std::size_t r = 0; r < rows; ++r)
        std::copy(x + r * p.cols(), x + (r + 1) * p.cols(),
                  out.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
      extents.push_back(p.cols());
      offset += p.cols();
    }
  }
  return tape.make(rows, cols, std::move(out), parts,
                   [ids = std::move(ids), extents = std::move(extents), axis, rows, cols](Tape<T>& t,
                                                                                          std::uint32_t self) {
                     const T* g = t.grad_of(self);
                     std::size_t offset = 0;
                     for (std::size_t k = 0; k < ids.size(); ++k) {
                       T* gp = t.accum(ids[k]);
                       if (gp) {
                         if (axis == 0) {
                           const std::size_t n = extents[k] * cols;
                           for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset * cols + i];
                         } else {
                           const std::size_t w = extents[k];
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * cols + offset + c];
                         }
                       }
                       offset += extents[k];
                     }
                   });
}

template <class T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, int axis) {
  return concat(std::span<const Tensor<T>>(parts.begin(), parts.size()), axis);
}
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  return concat(std::span<const Tensor<T>>(parts.data(), parts.size()), axis);
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  if (count == 0 || begin + count > a.rows())
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") outside " +
                         detail::shape_str(a.rows(), a.cols()));
  const std::size_t c = a.cols();
  const T* x = a.values().data() + begin * c;
  std::vector<T> out(x, x + count * c);
  const auto ia = a.id();
  return a.tape().make(count, c, std::move(out), {a}, [ia, begin, count, c](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self);
    if (T* ga = t.accum(ia))
      for (std::size_t i = 0; i < count * c; ++i) ga[begin * c + i] += g[i];
  });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  if (count == 0 || begin + count > a.cols())
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") outside " +
                         detail::shape_str(a.rows(), a.cols()));
  const std::size_t r = a.rows(), c = a.cols();
  const T* x = a.values().data();
  std::vector<T> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * c + begin + j];
  const auto ia = a.id();
  return a.tape().make(r, count, std::move(out), {a}, [ia, begin, count, r, c](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self);
    if (T* ga = t.accum(ia))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) ga[i * c + begin + j] += g[i * count + j];
  });
}

/// Adds column vector b to every column of m.
template <class T>
Tensor<T> add_bias(const Tensor<T>& m, const Tensor<T>& b) {
  detail::require_same_tape(m, b);
  detail::require_column(b, "add_bias");
  if (b.rows() != m.rows())
    throw DimensionError("add_bias: bias " + detail::shape_str(b.rows(), 1) + " vs matrix " +
                         detail::shape_str(m.rows(), m.cols()));
  const std::size_t r = m.rows(), c = m.cols();
  const T* x = m.values().data();
  const T* y = b.values().data();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + y[i];
  const auto im = m.id(), ib = b.id();
  return m.tape().make(r, c, std::move(out), {m, b}, [im, ib, r, c](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self);
    if (T* gm = t.accum(im))
      for (std::size_t i = 0; i < r * c; ++i) gm[i] += g[i];
    if (T* gb = t.accum(ib))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[i] += g[i * c + j];
  });
}

/// [n x 1] -> [n x count], each column a copy of v.
template <class T>
Tensor<T> repeat_cols(const Tensor<T>& v, std::size_t count) {
  detail::require_column(v, "repeat_cols");
  if (count == 0) throw DimensionError("repeat_cols: count must be positive");
  const std::size_t r = v.rows();
  const T* x = v.values().data();
  std::vector<T> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i];
  const auto iv = v.id();
  return v.tape().make(r, count, std::move(out), {v}, [iv, r, count](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self);
    if (T* gv = t.accum(iv))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) gv[i] += g[i * count + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions and selection

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  const std::size_t n = a.size();
  T s = T(0);
  for (T x : a.values()) s += x;
  const auto ia = a.id();
  return a.tape().make(1, 1, {s}, {a}, [ia, n](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_of(self)[0];
    if (T* ga = t.accum(ia))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

template <class T>
Tensor<T> pick(const Tensor<T>& a, std::size_t r, std::size_t c = 0) {
  if (r >= a.rows() || c >= a.cols())
    throw DimensionError("pick: index outside " + detail::shape_str(a.rows(), a.cols()));
  const std::size_t k = r * a.cols() + c;
  const auto ia = a.id();
  return a.tape().make(1, 1, {a.values()[k]}, {a}, [ia, k](Tape<T>& t, std::uint32_t self) {
    if (T* ga = t.accum(ia)) ga[k] += t.grad_of(self)[0];
  });
}

/// Sum over columns t of a[rows[t], t].
template <class T>
Tensor<T> pick_sum(const Tensor<T>& a, std::span<const int> rows) {
  if (rows.size() != a.cols())
    throw DimensionError("pick_sum: " + std::to_string(rows.size()) + " targets for " +
                         std::to_string(a.cols()) + " columns");
  const std::size_t c = a.cols();
  T s = T(0);
  for (std::size_t t = 0; t < c; ++t) {
    if (rows[t] < 0 || static_cast<std::size_t>(rows[t]) >= a.rows())
      throw DimensionError("pick_sum: row index out of range");
    s += a.values()[static_cast<std::size_t>(rows[t]) * c + t];
  }
  const auto ia = a.id();
  std::vector<int> idx(rows.begin(), rows.end());
  return a.tape().make(1, 1, {s}, {a}, [ia, c, idx = std::move(idx)](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_of(self)[0];
    if (T* ga = t.accum(ia))
      for (std::size_t j = 0; j < c; ++j) ga[static_cast<std::size_t>(idx[j]) * c + j] += g;
  });
}

/// Sums rows of x into groups: out[u, :] = sum over r in groups[u] of x[r, :].
template <class T>
Tensor<T> segment_sum_rows(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& groups) {
  if (groups.empty()) throw DimensionError("segment_sum_rows: no groups");
  const std::size_t c = x.cols(), u = groups.size();
  const T* v = x.values().data();
  std::vector<T> out(u * c, T(0));
  for (std::size_t k = 0; k < u; ++k)
    for (std::size_t r : groups[k]) {
      if (r >= x.rows()) throw DimensionError("segment_sum_rows: row index out of range");
      for (std::size_t j = 0; j < c; ++j) out[k * c + j] += v[r * c + j];
    }
  const auto ix = x.id();
  return x.tape().make(u, c, std::move(out), {x}, [ix, c, groups](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self);
    if (T* gx = t.accum(ix))
      for (std::size_t k = 0; k < groups.size(); ++k)
        for (std::size_t r : groups[k])
          for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[k * c + j];
  });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {

inline void check_mask(std::size_t n, std::span<const std::uint8_t> mask) {
  if (!mask.empty() && mask.size() != n)
    throw DimensionError("mask length " + std::to_string(mask.size()) + " != " + std::to_string(n));
  if (n == 0) throw InvalidMaskError("softmax over an empty vector");
  if (!mask.empty() && std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }))
    throw InvalidMaskError("all positions are masked");
}

inline bool on(std::span<const std::uint8_t> mask, std::size_t i) { return mask.empty() || mask[i] != 0; }

}  // namespace detail

/// Softmax over unmasked positions; masked positions get exactly 0.
/// An empty mask means every position is valid.
template <class T>
std::vector<T> masked_softmax_values(std::span<const T> x, std::span<const std::uint8_t> mask) {
  const std::size_t n = x.size();
  detail::check_mask(n, mask);
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (detail::on(mask, i)) mx = std::max(mx, x[i]);
  std::vector<T> y(n, T(0));
  T z = T(0);
  for (std::size_t i = 0; i < n; ++i)
    if (detail::on(mask, i)) z += (y[i] = std::exp(x[i] - mx));
  for (auto& v : y) v /= z;
  return y;
}

template <class T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const Mask& mask = {}) {
  detail::require_column(scores, "masked_softmax");
  const std::size_t n = scores.rows();
  auto y = masked_softmax_values<T>(scores.values(), mask);
  const auto is = scores.id();
  return scores.tape().make(n, 1, std::move(y), {scores}, [is, n](Tape<T>& t, std::uint32_t self) {
    T* gs = t.accum(is);
    if (!gs) return;
    const T* g = t.grad_of(self);
    const T* y = t.data(self);
    T dot = T(0);
    for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
    for (std::size_t i = 0; i < n; ++i) gs[i] += y[i] * (g[i] - dot);
  });
}

/// log(masked_softmax(scores))[index], computed without forming the probability.
template <class T>
Tensor<T> log_softmax_at(const Tensor<T>& scores, const Mask& mask, std::size_t index) {
  detail::require_column(scores, "log_softmax_at");
  const std::size_t n = scores.rows();
  detail::check_mask(n, mask);
  if (index >= n || !detail::on(mask, index))
    throw InvalidMaskError("log_softmax_at: target index is out of range or masked");
  const T* x = scores.values().data();
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (detail::on(mask, i)) mx = std::max(mx, x[i]);
  T z = T(0);
  for (std::size_t i = 0; i < n; ++i)
    if (detail::on(mask, i)) z += std::exp(x[i] - mx);
  const T lse = mx + std::log(z);
  const auto is = scores.id();
  return scores.tape().make(1, 1, {x[index] - lse}, {scores},
                            [is, n, index, lse, mask](Tape<T>& t, std::uint32_t self) {
                              T* gs = t.accum(is);
                              if (!gs) return;
                              const T g = t.grad_of(self)[0];
                              const T* x = t.data(is);
                              for (std::size_t i = 0; i < n; ++i)
                                if (detail::on(mask, i)) gs[i] -= g * std::exp(x[i] - lse);
                              gs[index] += g;
                            });
}

/// Column-wise log of the copy-augmented output distribution
///   P(w) = (exp(gen[w]) + sum_u [ids[u] == w] exp(copy[u])) / Z
/// gen is [V x L]; copy is [U x L] with one row per distinct word id in `ids`.
/// Both score sets are shifted by their joint column maximum before exponentiation.
template <class T>
Tensor<T> copy_mixture_log_softmax(const Tensor<T>& gen, const Tensor<T>& copy, std::span<const int> ids) {
  detail::require_same_tape(gen, copy);
  const std::size_t V = gen.rows(), L = gen.cols(), U = copy.rows();
  if (copy.cols() != L) throw DimensionError("copy_mixture_log_softmax: step counts differ");
  if (ids.size() != U) throw DimensionError("copy_mixture_log_softmax: id count != copy rows");
  std::vector<int> slot(V, -1);
  for (std::size_t u = 0; u < U; ++u) {
    if (ids[u] < 0 || static_cast<std::size_t>(ids[u]) >= V)
      throw DimensionError("copy_mixture_log_softmax: word id outside vocabulary");
    if (slot[static_cast<std::size_t>(ids[u])] >= 0)
      throw DimensionError("copy_mixture_log_softmax: duplicate word id (sum duplicates first)");
    slot[static_cast<std::size_t>(ids[u])] = static_cast<int>(u);
  }
  const T* G = gen.values().data();
  const T* C = copy.values().data();
  // la[w] = log(exp(gen[w]) + exp(copy[w])) is formed pairwise, then normalized by
  // a max-shifted log-sum-exp over the column, so no intermediate exponent overflows.
  std::vector<T> out(V * L);
  std::vector<T> logz(L);
  for (std::size_t t = 0; t < L; ++t) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t w = 0; w < V; ++w) {
      T la = G[w * L + t];
      if (slot[w] >= 0) {
        const T c = C[static_cast<std::size_t>(slot[w]) * L + t];
        const T hi = std::max(la, c), lo = std::min(la, c);
        la = hi + std::log1p(std::exp(lo - hi));
      }
      out[w * L + t] = la;
      mx = std::max(mx, la);
    }
    T z = T(0);
    for (std::size_t w = 0; w < V; ++w) z += std::exp(out[w * L + t] - mx);
    logz[t] = mx + std::log(z);
    for (std::size_t w = 0; w < V; ++w) out[w * L + t] -= logz[t];
  }
  const auto ig = gen.id(), ic = copy.id();
  return gen.tape().make(
      V, L, std::move(out), {gen, copy},
      [ig, ic, V, L, slot = std::move(slot), logz = std::move(logz)](Tape<T>& t, std::uint32_t self) {
        const T* g = t.grad_of(self);
        const T* G = t.data(ig);
        const T* C = t.data(ic);
        const T* lp = t.data(self);
        T* gG = t.accum(ig);
        T* gC = t.accum(ic);
        for (std::size_t s = 0; s < L; ++s) {
          T gsum = T(0);
          for (std::size_t w = 0; w < V; ++w) gsum += g[w * L + s];
          for (std::size_t w = 0; w < V; ++w) {
            // d logP_w / d score = exp(score - la_w) - exp(score - logZ), la_w = logP_w + logZ.
            const T la = lp[w * L + s] + logz[s];
            const T gw = g[w * L + s];
            if (gG) {
              const T x = G[w * L + s];
              gG[w * L + s] += gw * std::exp(x - la) - gsum * std::exp(x - logz[s]);
            }
            if (gC && slot[w] >= 0) {
              const auto u = static_cast<std::size_t>(slot[w]);
              const T x = C[u * L + s];
              gC[u * L + s] += gw * std::exp(x - la) - gsum * std::exp(x - logz[s]);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Regularization

/// Inverted dropout. Identity when !training or rate == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const std::size_t n = x.size();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factor(n);
  for (auto& f : factor) f = uniform_real(rng) < rate ? T(0) : keep_scale;
  std::vector<T> out(n);
  const T* v = x.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = v[i] * factor[i];
  const auto ix = x.id();
  return x.tape().make(x.rows(), x.cols(), std::move(out), {x},
                       [ix, n, factor = std::move(factor)](Tape<T>& t, std::uint32_t self) {
                         const T* g = t.grad_of(self);
                         if (T* gx = t.accum(ix))
                           for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * factor[i];
                       });
}

// ---------------------------------------------------------------------------
// Embeddings

/// Gathers rows of a [V x E] table into the columns of an [E x L] matrix.
/// The backward pass scatters into the touched rows of the table's gradient only.
template <class T>
Tensor<T> embedding_lookup(Tape<T>& tape, Param<T>& table, std::span<const int> ids) {
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id sequence");
  const std::size_t E = table.cols, L = ids.size();
  std::vector<T> out(E * L);
  for (std::size_t j = 0; j < L; ++j) {
    if (ids[j] < 0 || static_cast<std::size_t>(ids[j]) >= table.rows)
      throw DimensionError("embedding_lookup: token id " + std::to_string(ids[j]) + " outside table");
    const T* row = table.value.data() + static_cast<std::size_t>(ids[j]) * E;
    for (std::size_t e = 0; e < E; ++e) out[e * L + j] = row[e];
  }
  std::vector<int> idv(ids.begin(), ids.end());
  Param<T>* p = &table;
  return tape.make_param_sink(E, L, std::move(out), [p, E, L, idv = std::move(idv)](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self);
    for (std::size_t j = 0; j < L; ++j) {
      T* row = p->grad.data() + static_cast<std::size_t>(idv[j]) * E;
      for (std::size_t e = 0; e < E; ++e) row[e] += g[e * L + j];
    }
  });
}

}  // namespace diffks
