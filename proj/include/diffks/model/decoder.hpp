#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "diffks/core/ops.hpp"
#include "diffks/core/rng.hpp"
#include "diffks/core/tensor.hpp"
#include "diffks/data/vocab.hpp"
#include "diffks/model/config.hpp"
#include "diffks/model/gru.hpp"

namespace diffks {

template <class T>
struct DecoderParams {
  Param<T>* W_D = nullptr;  ///< D x 4H
  Param<T>* b_D = nullptr;
  GruParams<T> gru;         ///< input E + 2H, hidden D
  Param<T>* W_G = nullptr;  ///< V x D
  Param<T>* b_G = nullptr;
  Param<T>* W_H = nullptr;  ///< D x 2H, copy projection
  Param<T>* b_H = nullptr;

  static DecoderParams create(ParamStore<T>& store, const ModelConfig& cfg) {
    const std::size_t rep = 2 * cfg.enc_hidden, D = cfg.dec_hidden, V = cfg.vocab_size;
    DecoderParams p;
    p.W_D = &store.add("decoder", "decoder.W_D", D, 2 * rep, Init::glorot_uniform);
    p.b_D = &store.add("decoder", "decoder.b_D", D, 1, Init::zeros);
    p.gru = GruParams<T>::create(store, "decoder", "decoder.gru", cfg.emb_dim + rep, D);
    p.W_G = &store.add("decoder", "decoder.W_G", V, D, Init::glorot_uniform);
    p.b_G = &store.add("decoder", "decoder.b_G", V, 1, Init::zeros);
    p.W_H = &store.add("decoder", "decoder.W_H", D, rep, Init::glorot_uniform);
    p.b_H = &store.add("decoder", "decoder.b_H", D, 1, Init::zeros);
    return p;
  }
};

/// Distinct vocabulary ids of the selected sentence and the positions holding each.
struct CopySupport {
  std::vector<int> ids;
  std::vector<std::vector<std::size_t>> positions;

  static CopySupport from_sentence(std::span<const int> sentence) {
    CopySupport cs;
    std::map<int, std::size_t> slot;
    for (std::size_t j = 0; j < sentence.size(); ++j) {
      auto [it, inserted] = slot.try_emplace(sentence[j], cs.ids.size());
      if (inserted) {
        cs.ids.push_back(sentence[j]);
        cs.positions.emplace_back();
      }
      cs.positions[it->second].push_back(j);
    }
    return cs;
  }
};

/// What the decoder conditions on: the selected knowledge sentence.
template <class T>
struct KnowledgeMemory {
  Tensor<T> h_k;           ///< 2H x 1
  Tensor<T> token_states;  ///< 2H x L_k
  CopySupport copy;
};

/// s_0 = W_D [h_c; h_k] + b_D (no activation).
template <class T>
Tensor<T> init_state(const Tensor<T>& h_c, const Tensor<T>& h_k, const DecoderParams<T>& p) {
  auto& tape = h_c.tape();
  return add(matmul(tape.param(*p.W_D), concat({h_c, h_k}, 0)), tape.param(*p.b_D));
}

/// phi^C over the distinct knowledge words for the decoder states in S (D x L):
/// phi^C(w) = sum over positions j holding w of s^T tanh(W_H h_{k,j} + b_H).
template <class T>
Tensor<T> copy_scores(const Tensor<T>& S, const KnowledgeMemory<T>& mem, const DecoderParams<T>& p) {
  auto& tape = S.tape();
  auto keys = tanh(add_bias(matmul(tape.param(*p.W_H), mem.token_states), tape.param(*p.b_H)));
  return segment_sum_rows(matmul(transpose(keys), S), mem.copy.positions);
}

template <class T>
Tensor<T> generation_scores(const Tensor<T>& S, const DecoderParams<T>& p) {
  auto& tape = S.tape();
  return add_bias(matmul(tape.param(*p.W_G), S), tape.param(*p.b_G));
}

/// Teacher-forced pass over decoder inputs [SOS, y_1..y_n]. Returns log P as V x (n+1);
/// column t is the distribution for target t (y_{t+1}, or EOS for the last column).
template <class T>
Tensor<T> teacher_forced_log_probs(const Tensor<T>& s0, const KnowledgeMemory<T>& mem, std::span<const int> inputs,
                                   Param<T>& embedding, const DecoderParams<T>& p, double dropout_rate,
                                   bool training, Rng& rng) {
  auto& tape = s0.tape();
  const std::size_t L = inputs.size();
  auto emb = dropout(embedding_lookup(tape, embedding, inputs), dropout_rate, training, rng);
  auto x = concat({emb, repeat_cols(mem.h_k, L)}, 0);
  auto gx = add_bias(matmul(tape.param(*p.gru.W), x), tape.param(*p.gru.b));
  auto S = gru_scan(gx, s0, *p.gru.U, {}, false);
  return copy_mixture_log_softmax(generation_scores(S, p), copy_scores(S, mem, p), mem.copy.ids);
}

template <class T>
struct StepOutput {
  Tensor<T> state;     ///< s_t
  Tensor<T> phi_gen;   ///< V x 1
  Tensor<T> phi_copy;  ///< U x 1, rows aligned with KnowledgeMemory::copy.ids
  Tensor<T> log_p;     ///< V x 1
};

/// One decoding step from s_{t-1} and y_{t-1}, built with the primitive gru_cell.
template <class T>
StepOutput<T> decode_step(const Tensor<T>& s_prev, int y_prev, const KnowledgeMemory<T>& mem, Param<T>& embedding,
                          const DecoderParams<T>& p) {
  auto& tape = s_prev.tape();
  if (y_prev < 0 || static_cast<std::size_t>(y_prev) >= embedding.rows)
    throw DimensionError("decode_step: unknown token id " + std::to_string(y_prev));
  const int ids[1] = {y_prev};
  auto x = concat({embedding_lookup(tape, embedding, std::span<const int>(ids, 1)), mem.h_k}, 0);
  StepOutput<T> out;
  out.state = gru_cell(tape, x, s_prev, p.gru);
  out.phi_gen = generation_scores(out.state, p);
  out.phi_copy = copy_scores(out.state, mem, p);
  out.log_p = copy_mixture_log_softmax(out.phi_gen, out.phi_copy, mem.copy.ids);
  return out;
}

/// Greedy argmax decoding from SOS until EOS or max_len tokens (ties: lowest id).
/// The returned sequence excludes SOS and EOS.
template <class T>
std::vector<int> greedy_decode(const Tensor<T>& s0, const KnowledgeMemory<T>& mem, Param<T>& embedding,
                               const DecoderParams<T>& p, std::size_t max_len) {
  std::vector<int> out;
  Tensor<T> s = s0;
  int prev = kSos;
  for (std::size_t t = 0; t < max_len; ++t) {
    auto step = decode_step(s, prev, mem, embedding, p);
    auto lp = step.log_p.values();
    const auto best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    if (best == kEos) break;
    out.push_back(best);
    s = step.state;
    prev = best;
  }
  return out;
}

/// -sum_t log P(target_t) for teacher-forced log-probabilities (V x L) and L targets.
template <class T>
Tensor<T> sequence_nll(const Tensor<T>& log_probs, std::span<const int> targets) {
  if (targets.size() != log_probs.cols())
    throw DimensionError("sequence_nll: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(log_probs.cols()) + " steps");
  return affine(pick_sum(log_probs, targets), T(-1));
}

}  // namespace diffks
