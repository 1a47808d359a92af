#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "diffks/core/ops.hpp"
#include "diffks/core/tensor.hpp"

namespace diffks {

/// Gate weights stacked as [z; r; h]: W is 3H x in, U is 3H x H, b is 3H x 1.
template <class T>
struct GruParams {
  Param<T>* W = nullptr;
  Param<T>* U = nullptr;
  Param<T>* b = nullptr;
  std::size_t input = 0;
  std::size_t hidden = 0;

  static GruParams create(ParamStore<T>& store, const std::string& group, const std::string& prefix,
                          std::size_t input, std::size_t hidden) {
    GruParams p;
    p.input = input;
    p.hidden = hidden;
    p.W = &store.add(group, prefix + ".W", 3 * hidden, input, Init::glorot_uniform);
    p.U = &store.add(group, prefix + ".U", 3 * hidden, hidden, Init::glorot_uniform);
    p.b = &store.add(group, prefix + ".b", 3 * hidden, 1, Init::zeros);
    return p;
  }
};

template <class T>
struct BiGruParams {
  GruParams<T> fwd;
  GruParams<T> bwd;

  static BiGruParams create(ParamStore<T>& store, const std::string& group, const std::string& prefix,
                            std::size_t input, std::size_t hidden) {
    return {GruParams<T>::create(store, group, prefix + ".fwd", input, hidden),
            GruParams<T>::create(store, group, prefix + ".bwd", input, hidden)};
  }
};

/// One GRU step built from primitive ops:
///   z = sigmoid(W_z x + U_z h + b_z)
///   r = sigmoid(W_r x + U_r h + b_r)
///   c = tanh(W_h x + U_h (r * h) + b_h)
///   h' = (1 - z) * h + z * c
template <class T>
Tensor<T> gru_cell(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& h, const GruParams<T>& p) {
  const std::size_t H = p.hidden;
  if (x.rows() != p.input || x.cols() != 1 || h.rows() != H || h.cols() != 1)
    throw DimensionError("gru_cell: input " + detail::shape_str(x.rows(), x.cols()) + " / state " +
                         detail::shape_str(h.rows(), h.cols()) + " do not match params (" +
                         std::to_string(p.input) + " -> " + std::to_string(H) + ")");
  auto W = tape.param(*p.W), U = tape.param(*p.U), b = tape.param(*p.b);
  auto gx = add(matmul(W, x), b);
  auto Uzr = slice_rows(U, 0, 2 * H);
  auto Uh = slice_rows(U, 2 * H, H);
  auto gzr = add(slice_rows(gx, 0, 2 * H), matmul(Uzr, h));
  auto z = sigmoid(slice_rows(gzr, 0, H));
  auto r = sigmoid(slice_rows(gzr, H, H));
  auto c = tanh(add(slice_rows(gx, 2 * H, H), matmul(Uh, mul(r, h))));
  return add(mul(affine(z, T(-1), T(1)), h), mul(z, c));
}

/// Runs the GRU recurrence over the columns of precomputed input projections
/// gx = W X + b (3H x L), starting from h0. Positions with mask 0 are skipped: the
/// state is carried through unchanged. Returns the H x L matrix of states in input
/// order (for reverse scans the recurrence runs from the last column to the first).
/// Backward is hand-written truncation-free BPTT.
template <class T>
Tensor<T> gru_scan(const Tensor<T>& gx, const Tensor<T>& h0, Param<T>& Up, const Mask& mask, bool reverse) {
  auto& tape = gx.tape();
  const std::size_t H = Up.cols, L = gx.cols();
  if (Up.rows != 3 * H || gx.rows() != 3 * H || h0.rows() != H || h0.cols() != 1)
    throw DimensionError("gru_scan: shapes disagree (gx " + detail::shape_str(gx.rows(), gx.cols()) + ", U " +
                         detail::shape_str(Up.rows, Up.cols) + ", h0 " + detail::shape_str(h0.rows(), h0.cols()) + ")");
  if (!mask.empty() && mask.size() != L) throw DimensionError("gru_scan: mask length mismatch");
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  auto U = tape.param(Up);
  detail::MapC<T> Um(Up.value.data(), 3 * H, H);
  const T* G = gx.values().data();

  // Per-step caches, indexed by input position.
  std::vector<T> hprev(H * L), zs(H * L), rs(H * L), cs(H * L);
  std::vector<T> out(H * L);
  Vec h = Eigen::Map<const Vec>(h0.values().data(), static_cast<Eigen::Index>(H));
  Vec gzr(2 * H), rh(H), gh(H);
  for (std::size_t k = 0; k < L; ++k) {
    const std::size_t t = reverse ? L - 1 - k : k;
    if (mask.empty() || mask[t]) {
      gzr.noalias() = Um.topRows(2 * H) * h;
      for (std::size_t i = 0; i < H; ++i) {
        const T az = G[i * L + t] + gzr[static_cast<Eigen::Index>(i)];
        const T ar = G[(H + i) * L + t] + gzr[static_cast<Eigen::Index>(H + i)];
        zs[t * H + i] = T(1) / (T(1) + std::exp(-az));
        rs[t * H + i] = T(1) / (T(1) + std::exp(-ar));
        rh[static_cast<Eigen::Index>(i)] = rs[t * H + i] * h[static_cast<Eigen::Index>(i)];
        hprev[t * H + i] = h[static_cast<Eigen::Index>(i)];
      }
      gh.noalias() = Um.bottomRows(H) * rh;
      for (std::size_t i = 0; i < H; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const T c = std::tanh(G[(2 * H + i) * L + t] + gh[ii]);
        cs[t * H + i] = c;
        h[ii] = (T(1) - zs[t * H + i]) * h[ii] + zs[t * H + i] * c;
      }
    }
    for (std::size_t i = 0; i < H; ++i) out[i * L + t] = h[static_cast<Eigen::Index>(i)];
  }

  const auto igx = gx.id(), ih0 = h0.id(), iu = U.id();
  return tape.make(
      H, L, std::move(out), {gx, h0, U},
      [igx, ih0, iu, H, L, mask, reverse, hprev = std::move(hprev), zs = std::move(zs), rs = std::move(rs),
       cs = std::move(cs)](Tape<T>& t, std::uint32_t self) {
        const T* gout = t.grad_of(self);
        T* ggx = t.accum(igx);
        T* gh0 = t.accum(ih0);
        T* gU = t.accum(iu);
        detail::MapC<T> Um(t.data(iu), 3 * H, H);
        Vec dh = Vec::Zero(static_cast<Eigen::Index>(H));
        Vec dhp(H), dazr(2 * H), dah(H), drh(H), hp(H), rh(H);
        for (std::size_t k = 0; k < L; ++k) {
          // Walk positions in the opposite order of the forward recurrence.
          const std::size_t s = reverse ? k : L - 1 - k;
          for (std::size_t i = 0; i < H; ++i) dh[static_cast<Eigen::Index>(i)] += gout[i * L + s];
          if (!(mask.empty() || mask[s])) continue;
          for (std::size_t i = 0; i < H; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            const T z = zs[s * H + i], c = cs[s * H + i];
            hp[ii] = hprev[s * H + i];
            rh[ii] = rs[s * H + i] * hp[ii];
            dazr[ii] = dh[ii] * (c - hp[ii]) * z * (T(1) - z);
            dah[ii] = dh[ii] * z * (T(1) - c * c);
            dhp[ii] = dh[ii] * (T(1) - z);
          }
          drh.noalias() = Um.bottomRows(H).transpose() * dah;
          for (std::size_t i = 0; i < H; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            const T r = rs[s * H + i];
            dazr[static_cast<Eigen::Index>(H + i)] = drh[ii] * hp[ii] * r * (T(1) - r);
            dhp[ii] += drh[ii] * r;
          }
          dhp.noalias() += Um.topRows(2 * H).transpose() * dazr;
          if (ggx) {
            for (std::size_t i = 0; i < 2 * H; ++i) ggx[i * L + s] += dazr[static_cast<Eigen::Index>(i)];
            for (std::size_t i = 0; i < H; ++i) ggx[(2 * H + i) * L + s] += dah[static_cast<Eigen::Index>(i)];
          }
          if (gU) {
            detail::Map<T> gUm(gU, 3 * H, H);
            gUm.topRows(2 * H).noalias() += dazr * hp.transpose();
            gUm.bottomRows(H).noalias() += dah * rh.transpose();
          }
          dh = dhp;
        }
        if (gh0)
          for (std::size_t i = 0; i < H; ++i) gh0[i] += dh[static_cast<Eigen::Index>(i)];
      });
}

template <class T>
struct BiGruOutput {
  Tensor<T> states;   ///< 2H x L, column t = [fwd_t; bwd_t]
  Tensor<T> summary;  ///< 2H x 1 = [fwd at last real position; bwd at first real position]
};

/// Mask with 0 at PAD positions; empty (all valid) when the sequence has no padding.
inline Mask pad_mask(std::span<const int> ids, int pad_id = 0) {
  Mask m;
  for (std::size_t t = 0; t < ids.size(); ++t)
    if (ids[t] == pad_id) {
      if (m.empty()) m.assign(ids.size(), 1);
      m[t] = 0;
    }
  return m;
}

/// Bidirectional scan over precomputed input projections (3H x L each direction).
template <class T>
BiGruOutput<T> bigru_scan(const Tensor<T>& gx_f, const Tensor<T>& gx_b, const Mask& mask, const BiGruParams<T>& p) {
  auto& tape = gx_f.tape();
  const std::size_t L = gx_f.cols();
  std::size_t first = L, last = L;
  for (std::size_t t = 0; t < L; ++t)
    if (mask.empty() || mask[t]) {
      if (first == L) first = t;
      last = t;
    }
  if (L == 0 || first == L) throw DimensionError("bigru_encode: empty sequence");
  auto f = gru_scan(gx_f, tape.zeros(p.fwd.hidden, 1), *p.fwd.U, mask, false);
  auto b = gru_scan(gx_b, tape.zeros(p.bwd.hidden, 1), *p.bwd.U, mask, true);
  BiGruOutput<T> out;
  out.states = concat({f, b}, 0);
  out.summary = concat({slice_cols(f, last, 1), slice_cols(b, first, 1)}, 0);
  return out;
}

template <class T>
Tensor<T> input_projection(const Tensor<T>& x, const GruParams<T>& g) {
  auto& tape = x.tape();
  if (x.rows() != g.input) throw DimensionError("GRU input dimension mismatch");
  return add_bias(matmul(tape.param(*g.W), x), tape.param(*g.b));
}

/// Bidirectional encoding of the columns of x (in x L) from zero initial states.
/// Per-step state = [fwd_t; bwd_t]; summary = [fwd at the last real position; bwd at
/// the first real position]. Masked positions do not enter either recurrence.
template <class T>
BiGruOutput<T> bigru_encode(Tape<T>& tape, const Tensor<T>& x, const Mask& mask, const BiGruParams<T>& p) {
  (void)tape;
  return bigru_scan(input_projection(x, p.fwd), input_projection(x, p.bwd), mask, p);
}

}  // namespace diffks
