#pragma once

#include <cstddef>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "diffks/core/ops.hpp"
#include "diffks/core/tensor.hpp"
#include "diffks/model/config.hpp"

namespace diffks {

/// Additive attention scorer: score_i = v^T tanh(W_que q + W_key key_i).
template <class T>
struct AttentionScorer {
  Param<T>* v = nullptr;      ///< A x 1
  Param<T>* W_que = nullptr;  ///< A x 2H
  Param<T>* W_key = nullptr;  ///< A x 4H

  static AttentionScorer create(ParamStore<T>& store, const std::string& group, std::size_t attn,
                                std::size_t rep) {
    return {&store.add(group, group + ".v", attn, 1, Init::glorot_uniform),
            &store.add(group, group + ".W_que", attn, rep, Init::glorot_uniform),
            &store.add(group, group + ".W_key", attn, 2 * rep, Init::glorot_uniform)};
  }
};

/// F of Diff(x, y) = tanh(W_F [x - y; x * y] + b_F) plus the variant's scorer. The fused
/// and differential scorers are separate parameter sets; the contextual scorer has none.
template <class T>
struct SelectorParams {
  Param<T>* F_W = nullptr;  ///< 2H x 4H
  Param<T>* F_b = nullptr;  ///< 2H x 1
  std::optional<AttentionScorer<T>> fused;
  std::optional<AttentionScorer<T>> differential;

  static SelectorParams create(ParamStore<T>& store, const ModelConfig& cfg) {
    const std::size_t rep = 2 * cfg.enc_hidden;
    SelectorParams p;
    p.F_W = &store.add("selector.diff", "selector.diff.W", rep, 2 * rep, Init::glorot_uniform);
    p.F_b = &store.add("selector.diff", "selector.diff.b", rep, 1, Init::zeros);
    if (cfg.variant == SelectorVariant::fused)
      p.fused = AttentionScorer<T>::create(store, "selector.fused", cfg.attention_dim(), rep);
    else
      p.differential = AttentionScorer<T>::create(store, "selector.differential", cfg.attention_dim(), rep);
    return p;
  }
};

/// Diff(x_j, y_j) for every column pair of X and Y (2H x n each) -> 2H x n.
template <class T>
Tensor<T> diff(const Tensor<T>& X, const Tensor<T>& Y, const SelectorParams<T>& p) {
  auto& tape = X.tape();
  auto in = concat({sub(X, Y), mul(X, Y)}, 0);
  return tanh(add_bias(matmul(tape.param(*p.F_W), in), tape.param(*p.F_b)));
}

/// Knowledge selected at earlier turns, newest first, at most M entries.
template <class T>
struct SelectionState {
  std::deque<Tensor<T>> history;
  std::size_t turn = 1;  ///< 1-based index of the turn about to be selected

  void advance(const Tensor<T>& selected, std::size_t max_history) {
    history.push_front(selected);
    while (history.size() > max_history) history.pop_back();
    ++turn;
  }
};

/// o_i = sum_m lambda_m Diff(h_k^{t-m}, r_i) over the available history, with the
/// lambdas of available entries renormalized to sum to 1. At the first turn o_i = 0.
/// R holds r_i as columns (2H x n).
template <class T>
Tensor<T> accumulate_difference(const SelectionState<T>& state, const std::vector<double>& lambdas,
                                const Tensor<T>& R, const SelectorParams<T>& p) {
  auto& tape = R.tape();
  const std::size_t n = R.cols();
  const std::size_t avail = std::min(state.history.size(), lambdas.size());
  if (avail == 0) return tape.zeros(R.rows(), n);
  double total = 0.0;
  for (std::size_t m = 0; m < avail; ++m) total += lambdas[m];
  Tensor<T> o;
  for (std::size_t m = 0; m < avail; ++m) {
    const double w = total > 0.0 ? lambdas[m] / total : 1.0 / static_cast<double>(avail);
    auto term = diff(repeat_cols(state.history[m], n), R, p);
    if (w != 1.0) term = affine(term, static_cast<T>(w));
    o = o.valid() ? add(o, term) : term;
  }
  return o;
}

/// beta = (v^T tanh(W_que q + W_key K))^T where q is 2H x 1 and K is 4H x n. Returns n x 1.
template <class T>
Tensor<T> attention_scores(const Tensor<T>& query, const Tensor<T>& keys, const AttentionScorer<T>& s) {
  auto& tape = keys.tape();
  auto hidden = tanh(add_bias(matmul(tape.param(*s.W_key), keys), matmul(tape.param(*s.W_que), query)));
  return transpose(matmul(transpose(tape.param(*s.v)), hidden));
}

/// Fused selection: beta_i = v^T tanh(W_que h_c + W_key [h_{k,i}; o_i]).
template <class T>
Tensor<T> score_fused(const Tensor<T>& h_c, const Tensor<T>& Hk, const Tensor<T>& O, const AttentionScorer<T>& s) {
  return attention_scores(h_c, concat({Hk, O}, 0), s);
}

/// Contextual selector: beta_Ctx,i = h_c^T h_{k,i}.
template <class T>
Tensor<T> score_contextual(const Tensor<T>& h_c, const Tensor<T>& Hk) {
  if (h_c.rows() != Hk.rows()) throw DimensionError("score_contextual: dimension mismatch");
  return matmul(transpose(Hk), h_c);
}

/// Differential selector: beta_Diff,i = v^T tanh(W_que h_k^{t-1} + W_key [r_i; o_i]);
/// identically zero at the first turn (no previous selection).
template <class T>
Tensor<T> score_differential(const std::optional<Tensor<T>>& previous, const Tensor<T>& R, const Tensor<T>& O,
                             const AttentionScorer<T>& s) {
  if (!previous) return R.tape().zeros(R.cols(), 1);
  return attention_scores(*previous, concat({R, O}, 0), s);
}

/// Encoder outputs the selector consumes.
template <class T>
struct SelectorInputs {
  Tensor<T> h_c;  ///< 2H x 1
  Tensor<T> Hk;   ///< 2H x n, column i = h_{k,i}
  Tensor<T> R;    ///< 2H x n, column i = r_i
  Mask mask;
};

template <class T>
struct SelectionOutput {
  Tensor<T> beta;       ///< n x 1
  Tensor<T> beta_ctx;   ///< disentangled only
  Tensor<T> beta_diff;  ///< disentangled only
  Tensor<T> o;          ///< 2H x n differential information
  Tensor<T> alpha;      ///< n x 1 probability vector
  std::size_t chosen = 0;
  Tensor<T> chosen_rep;  ///< h_{k, chosen}
};

template <class T>
std::size_t argmax_masked(std::span<const T> values, const Mask& mask) {
  std::size_t best = values.size();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (best == values.size() || values[i] > values[best]) best = i;
  }
  if (best == values.size()) throw InvalidMaskError("argmax over an all-masked vector");
  return best;
}

/// Scores every candidate, forms alpha = masked_softmax(beta) and picks the argmax
/// (lowest index on ties). History bookkeeping is left to the caller, which decides
/// whether the gold or the chosen representation enters the state.
template <class T>
SelectionOutput<T> select(const SelectorInputs<T>& in, const SelectionState<T>& state, const ModelConfig& cfg,
                          const SelectorParams<T>& p) {
  auto& tape = in.Hk.tape();
  const std::size_t n = in.Hk.cols();
  if (n == 0) throw DimensionError("select: empty candidate set");
  SelectionOutput<T> out;
  const bool use_diff = cfg.ablation != Ablation::no_diffsel;
  const bool use_ctx = cfg.ablation != Ablation::no_ctxsel;
  out.o = use_diff ? accumulate_difference(state, cfg.lambdas(), in.R, p) : tape.zeros(in.R.rows(), n);
  if (cfg.variant == SelectorVariant::fused) {
    auto h_c = use_ctx ? in.h_c : tape.zeros(in.h_c.rows(), 1);
    out.beta = score_fused(h_c, in.Hk, out.o, *p.fused);
  } else {
    out.beta_ctx = use_ctx ? score_contextual(in.h_c, in.Hk) : tape.zeros(n, 1);
    std::optional<Tensor<T>> previous;
    if (use_diff && !state.history.empty()) previous = state.history.front();
    out.beta_diff = score_differential(previous, in.R, out.o, *p.differential);
    out.beta = add(out.beta_ctx, out.beta_diff);
  }
  out.alpha = masked_softmax(out.beta, in.mask);
  out.chosen = argmax_masked<T>(out.alpha.values(), in.mask);
  out.chosen_rep = slice_cols(in.Hk, out.chosen, 1);
  return out;
}

}  // namespace diffks
