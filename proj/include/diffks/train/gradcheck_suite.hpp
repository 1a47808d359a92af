#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "diffks/core/grad_check.hpp"
#include "diffks/core/ops.hpp"
#include "diffks/core/rng.hpp"
#include "diffks/core/tensor.hpp"
#include "diffks/data/corpus.hpp"
#include "diffks/data/dataset.hpp"
#include "diffks/data/vocab.hpp"
#include "diffks/model/config.hpp"
#include "diffks/model/model.hpp"
#include "diffks/train/rollout.hpp"

namespace diffks {

enum class CheckScale { op, module, end2end };

inline std::string to_string(CheckScale s) {
  switch (s) {
    case CheckScale::op: return "op";
    case CheckScale::module: return "module";
    case CheckScale::end2end: return "end2end";
  }
  return "?";
}

struct GradCheckRow {
  CheckScale scale = CheckScale::op;
  std::string name;
  GradCheckResult result;
  double tolerance = 1e-4;
  bool passed() const { return result.max_rel_error < tolerance; }
};

namespace gradcheck {

using D = double;
inline constexpr double kEps = 1e-5;

inline std::vector<D> random_values(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<D> v(n);
  for (auto& x : v) x = lo + (hi - lo) * uniform_real(rng);
  return v;
}

/// Scalar head sum(W * y) with fixed random weights, so every output entry matters.
inline Tensor<D> project(const Tensor<D>& y, std::uint64_t salt) {
  auto rng = make_rng(salt, Stream::synth, 99, y.size());
  return sum(mul(y, y.tape().constant(y.rows(), y.cols(), random_values(rng, y.size()))));
}

/// tanh with a wrong derivative (1 - y instead of 1 - y^2); negative control only.
inline Tensor<D> corrupted_tanh(const Tensor<D>& a) {
  std::vector<D> out(a.values().begin(), a.values().end());
  for (auto& x : out) x = std::tanh(x);
  const auto ia = a.id();
  const std::size_t n = a.size();
  return a.tape().make(a.rows(), a.cols(), std::move(out), {a}, [ia, n](Tape<D>& t, std::uint32_t self) {
    const D* g = t.grad_of(self);
    const D* y = t.data(self);
    if (D* ga = t.accum(ia))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (D(1) - y[i]);
  });
}

struct OpCase {
  std::string name;
  std::size_t rows, cols;
  std::function<Tensor<D>(Tape<D>&, const Tensor<D>&)> f;
  double lo = -1.0, hi = 1.0;
};

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> cs;
  auto aux = [](Tape<D>& t, std::size_t r, std::size_t c, std::uint64_t salt) {
    auto rng = make_rng(salt, Stream::synth, 7, r * 131 + c);
    return t.constant(r, c, random_values(rng, r * c));
  };
  cs.push_back({"matmul (left)", 3, 4, [=](Tape<D>& t, const Tensor<D>& x) { return project(matmul(x, aux(t, 4, 2, 1)), 1); }});
  cs.push_back({"matmul (right)", 4, 2, [=](Tape<D>& t, const Tensor<D>& x) { return project(matmul(aux(t, 3, 4, 2), x), 2); }});
  cs.push_back({"transpose", 3, 2, [](Tape<D>&, const Tensor<D>& x) { return project(transpose(x), 3); }});
  cs.push_back({"add", 3, 2, [=](Tape<D>& t, const Tensor<D>& x) { return project(add(x, aux(t, 3, 2, 4)), 4); }});
  cs.push_back({"sub", 3, 2, [=](Tape<D>& t, const Tensor<D>& x) { return project(sub(aux(t, 3, 2, 5), x), 5); }});
  cs.push_back({"mul", 3, 2, [=](Tape<D>& t, const Tensor<D>& x) { return project(mul(x, aux(t, 3, 2, 6)), 6); }});
  cs.push_back({"mul (shared input)", 3, 2, [](Tape<D>&, const Tensor<D>& x) { return project(mul(x, x), 7); }});
  cs.push_back({"affine", 4, 1, [](Tape<D>&, const Tensor<D>& x) { return project(affine(x, D(-1.5), D(0.5)), 8); }});
  cs.push_back({"tanh", 4, 2, [](Tape<D>&, const Tensor<D>& x) { return project(tanh(x), 9); }, -2.0, 2.0});
  cs.push_back({"sigmoid", 4, 2, [](Tape<D>&, const Tensor<D>& x) { return project(sigmoid(x), 10); }, -3.0, 3.0});
  cs.push_back({"log", 4, 1, [](Tape<D>&, const Tensor<D>& x) { return project(log(x), 11); }, 0.5, 2.0});
  cs.push_back({"exp", 4, 1, [](Tape<D>&, const Tensor<D>& x) { return project(exp(x), 12); }});
  cs.push_back({"concat rows", 2, 3, [=](Tape<D>& t, const Tensor<D>& x) {
                   return project(concat({x, aux(t, 1, 3, 13), x}, 0), 13);
                 }});
  cs.push_back({"concat cols", 3, 2, [=](Tape<D>& t, const Tensor<D>& x) {
                   return project(concat({aux(t, 3, 1, 14), x}, 1), 14);
                 }});
  cs.push_back({"slice rows", 5, 2, [](Tape<D>&, const Tensor<D>& x) { return project(slice_rows(x, 1, 3), 15); }});
  cs.push_back({"slice cols", 2, 5, [](Tape<D>&, const Tensor<D>& x) { return project(slice_cols(x, 2, 2), 16); }});
  cs.push_back({"add_bias (matrix)", 3, 4, [=](Tape<D>& t, const Tensor<D>& x) {
                   return project(add_bias(x, aux(t, 3, 1, 17)), 17);
                 }});
  cs.push_back({"add_bias (bias)", 3, 1, [=](Tape<D>& t, const Tensor<D>& x) {
                   return project(add_bias(aux(t, 3, 4, 18), x), 18);
                 }});
  cs.push_back({"repeat_cols", 3, 1, [](Tape<D>&, const Tensor<D>& x) { return project(repeat_cols(x, 4), 19); }});
  cs.push_back({"sum", 3, 3, [](Tape<D>&, const Tensor<D>& x) { return sum(mul(x, x)); }});
  cs.push_back({"pick", 3, 3, [](Tape<D>&, const Tensor<D>& x) { return pick(tanh(x), 1, 2); }});
  cs.push_back({"pick_sum", 4, 3, [](Tape<D>&, const Tensor<D>& x) {
                   const int rows[3] = {2, 0, 2};
                   return pick_sum(tanh(x), std::span<const int>(rows, 3));
                 }});
  cs.push_back({"segment_sum_rows", 5, 2, [](Tape<D>&, const Tensor<D>& x) {
                   return project(segment_sum_rows(x, {{0, 3}, {1}, {2, 4}}), 20);
                 }});
  cs.push_back({"masked_softmax", 5, 1, [](Tape<D>&, const Tensor<D>& x) {
                   return project(masked_softmax(x, Mask{1, 0, 1, 1, 0}), 21);
                 }, -2.0, 2.0});
  cs.push_back({"log_softmax_at", 5, 1, [](Tape<D>&, const Tensor<D>& x) {
                   return log_softmax_at(x, Mask{1, 1, 0, 1, 1}, 3);
                 }, -2.0, 2.0});
  cs.push_back({"copy mixture (generation)", 6, 2, [=](Tape<D>& t, const Tensor<D>& x) {
                   const int ids[2] = {4, 1};
                   return project(copy_mixture_log_softmax(x, aux(t, 2, 2, 22), std::span<const int>(ids, 2)), 22);
                 }, -2.0, 2.0});
  cs.push_back({"copy mixture (copy)", 2, 3, [=](Tape<D>& t, const Tensor<D>& x) {
                   const int ids[2] = {0, 5};
                   return project(copy_mixture_log_softmax(aux(t, 6, 3, 23), x, std::span<const int>(ids, 2)), 23);
                 }, -2.0, 2.0});
  cs.push_back({"dropout", 4, 3, [](Tape<D>&, const Tensor<D>& x) {
                   auto rng = make_rng(24, Stream::dropout);
                   return project(dropout(x, 0.5, true, rng), 24);
                 }});
  return cs;
}

/// GRU scans and cells, checked through their inputs and through U.
inline std::vector<GradCheckRow> recurrent_checks() {
  std::vector<GradCheckRow> rows;
  const std::size_t H = 3, in = 2, L = 4;
  ParamStore<D> store;
  auto gp = GruParams<D>::create(store, "gru", "gru", in, H);
  auto rng = make_rng(31, Stream::init);
  store.initialize(rng);
  for (auto& x : gp.b->value) x = uniform_real(rng) - 0.5;
  auto data_rng = make_rng(32, Stream::synth);
  const auto xs = random_values(data_rng, in * L);
  const auto h0 = random_values(data_rng, H);
  for (int variant = 0; variant < 3; ++variant) {
    const bool reverse = variant == 1;
    const Mask mask = variant == 2 ? Mask{1, 0, 1, 1} : Mask{};
    const std::string label = std::string("gru_scan") + (reverse ? " (reverse)" : variant == 2 ? " (masked)" : "");
    auto f = [&](Tape<D>& t, const Tensor<D>& x) {
      auto gx = add_bias(matmul(t.param(*gp.W), x), t.param(*gp.b));
      return project(gru_scan(gx, t.constant(H, 1, h0), *gp.U, mask, reverse), 40 + variant);
    };
    rows.push_back({CheckScale::op, label + " / inputs", grad_check<D>(f, xs, in, L, kEps)});
    auto fp = [&](Tape<D>& t) { return f(t, t.constant(in, L, xs)); };
    rows.push_back({CheckScale::op, label + " / params", grad_check_params<D>(fp, {gp.W, gp.U, gp.b}, kEps)});
  }
  auto cell = [&](Tape<D>& t, const Tensor<D>& h) {
    return project(gru_cell(t, t.constant(in, 1, std::vector<D>(xs.begin(), xs.begin() + in)), h, gp), 50);
  };
  rows.push_back({CheckScale::op, "gru_cell / state", grad_check<D>(cell, h0, H, 1, kEps)});
  auto cellp = [&](Tape<D>& t) { return cell(t, t.constant(H, 1, h0)); };
  rows.push_back({CheckScale::op, "gru_cell / params", grad_check_params<D>(cellp, {gp.W, gp.U, gp.b}, kEps)});

  ParamStore<D> emb_store;
  auto& table = emb_store.add("emb", "emb", 6, 3, Init::standard_normal);
  emb_store.initialize(rng);
  auto lookup = [&](Tape<D>& t) {
    const int ids[4] = {2, 5, 2, 0};
    return project(tanh(embedding_lookup(t, table, std::span<const int>(ids, 4))), 51);
  };
  rows.push_back({CheckScale::op, "embedding_lookup", grad_check_params<D>(lookup, {&table}, kEps)});
  return rows;
}

/// The toy problem: |V| = 12 (8 words + 4 specials), E=8, H=6, D=12, three candidates
/// (the no-knowledge slot plus two sentences), token sequences of at most 4.
struct ToyProblem {
  Vocabulary vocab;
  EncodedDialogue dialogue;
  ModelConfig config;
};

inline ToyProblem toy_problem(SelectorVariant variant, std::size_t history_turns = 1) {
  ToyProblem p;
  p.vocab = Vocabulary::from_tokens({"a", "b", "c", "d", "e", "f", "g", "h"});
  Dialogue d;
  d.id = "toy";
  d.turns.push_back(Turn{{"a", "b"}, {"c", "d", "c"}, {{"c", "d", "c"}, {"f", "g", "h", "a"}}, 0});
  d.turns.push_back(Turn{{"e", "f"}, {"g", "h", "a"}, {{"c", "d", "c"}, {"f", "g", "h", "a"}}, 1});
  d.turns.push_back(Turn{{"b"}, {"e", "c"}, {{"c", "d", "c"}, {"f", "g", "h", "a"}}, 0});
  LengthCaps caps;
  caps.context = 4;
  p.dialogue = encode_dialogue(d, p.vocab, caps);
  p.config.vocab_size = p.vocab.size();
  p.config.emb_dim = 8;
  p.config.enc_hidden = 6;
  p.config.dec_hidden = 12;
  p.config.dropout = 0.5;
  p.config.variant = variant;
  p.config.history_turns = history_turns;
  return p;
}

/// Toy model with nonzero biases so that no gradient path is trivially symmetric.
inline void init_toy(DiffKSModel<D>& m, std::uint64_t seed) {
  m.initialize(seed);
  auto rng = make_rng(seed, Stream::init, 1);
  for (auto& p : m.params().params())
    if (p.init == Init::zeros)
      for (auto& x : p.value) x = 0.2 * (uniform_real(rng) - 0.5);
}

inline std::vector<Param<D>*> group_params(ParamStore<D>& store, const std::string& prefix) {
  std::vector<Param<D>*> out;
  for (auto& g : store.groups())
    if (g.name.rfind(prefix, 0) == 0) out.insert(out.end(), g.params.begin(), g.params.end());
  return out;
}

inline std::vector<GradCheckRow> module_checks() {
  std::vector<GradCheckRow> rows;
  for (auto variant : {SelectorVariant::fused, SelectorVariant::disentangled}) {
    auto toy = toy_problem(variant, 2);
    DiffKSModel<D> model(toy.config);
    init_toy(model, 5);
    const auto& turns = toy.dialogue.turns;
    const std::string tag = " [" + to_string(variant) + "]";

    // Encoders: encode_turn under a scalar head over h_c, H_k and R.
    auto enc_loss = [&](Tape<D>& t) {
      Rng rng(0);
      auto e = model.encode_turn(t, turns[1], false, rng);
      return add(add(project(e.h_c, 60), project(e.Hk, 61)), project(e.R, 62));
    };
    auto enc_params = group_params(model.params(), "encoder");
    enc_params.push_back(&model.embedding());
    rows.push_back({CheckScale::module, "encoders" + tag, grad_check_params<D>(enc_loss, enc_params, kEps)});

    // Selector: L_KS summed over three turns with gold history (o is nonzero from turn 2).
    auto sel_loss = [&](Tape<D>& t) {
      Rng rng(0);
      SelectionState<D> state;
      Tensor<D> total;
      for (const auto& turn : turns) {
        auto e = model.encode_turn(t, turn, false, rng);
        auto s = select(e.selector_inputs(turn.mask), state, model.config(), model.selector());
        auto ks = affine(log_softmax_at(s.beta, turn.mask, static_cast<std::size_t>(turn.gold)), D(-1));
        total = total.valid() ? add(total, ks) : ks;
        state.advance(slice_cols(e.Hk, static_cast<std::size_t>(turn.gold), 1), model.config().history_turns);
      }
      return total;
    };
    rows.push_back({CheckScale::module, "selector + L_KS" + tag,
                    grad_check_params<D>(sel_loss, group_params(model.params(), "selector"), kEps)});
    rows.push_back({CheckScale::module, "selector + L_KS, encoder grads" + tag,
                    grad_check_params<D>(sel_loss, group_params(model.params(), "encoder"), kEps)});

    // Decoder: step-wise decode_step + NLL and the fused teacher-forced scan.
    const auto& turn = turns[0];
    auto step_loss = [&](Tape<D>& t) {
      Rng rng(0);
      auto e = model.encode_turn(t, turn, false, rng);
      auto mem = model.memory(e, turn, 1);
      auto s = init_state(e.h_c, mem.h_k, model.decoder());
      std::vector<int> targets(turn.response);
      targets.push_back(kEos);
      int prev = kSos;
      Tensor<D> total;
      for (int y : targets) {
        auto step = decode_step(s, prev, mem, model.embedding(), model.decoder());
        auto nll = affine(pick(step.log_p, static_cast<std::size_t>(y)), D(-1));
        total = total.valid() ? add(total, nll) : nll;
        s = step.state;
        prev = y;
      }
      return total;
    };
    auto dec_params = group_params(model.params(), "decoder");
    dec_params.push_back(&model.embedding());
    rows.push_back({CheckScale::module, "decode_step + NLL" + tag, grad_check_params<D>(step_loss, dec_params, kEps)});
    auto tf_loss = [&](Tape<D>& t) {
      Rng rng(0);
      auto e = model.encode_turn(t, turn, false, rng);
      auto mem = model.memory(e, turn, 1);
      auto s = init_state(e.h_c, mem.h_k, model.decoder());
      std::vector<int> inputs{kSos}, targets(turn.response);
      inputs.insert(inputs.end(), turn.response.begin(), turn.response.end());
      targets.push_back(kEos);
      auto lp = teacher_forced_log_probs(s, mem, inputs, model.embedding(), model.decoder(), 0.0, false, rng);
      return sequence_nll(lp, targets);
    };
    rows.push_back({CheckScale::module, "teacher-forced decoder + NLL" + tag,
                    grad_check_params<D>(tf_loss, dec_params, kEps)});
  }
  return rows;
}

/// Full dialogue loss (selection + decoding over all turns, dropout on with a fixed
/// mask), checked separately for every parameter group.
inline std::vector<GradCheckRow> end2end_checks() {
  std::vector<GradCheckRow> rows;
  for (auto variant : {SelectorVariant::fused, SelectorVariant::disentangled}) {
    auto toy = toy_problem(variant, 2);
    DiffKSModel<D> model(toy.config);
    init_toy(model, 1);
    auto loss = [&](Tape<D>& t) {
      auto rng = make_rng(3, Stream::dropout);
      RolloutOptions ro;
      ro.mode = RolloutMode::train;
      return forward_dialogue(t, model, toy.dialogue, ro, rng).loss;
    };
    for (auto& g : model.params().groups())
      rows.push_back({CheckScale::end2end, "dialogue loss / " + g.name + " [" + to_string(variant) + "]",
                      grad_check_params<D>(loss, g.params, kEps)});
  }
  return rows;
}

inline std::vector<GradCheckRow> op_checks() {
  std::vector<GradCheckRow> rows;
  std::uint64_t salt = 100;
  for (const auto& c : op_cases()) {
    auto rng = make_rng(salt++, Stream::synth);
    auto x = random_values(rng, c.rows * c.cols, c.lo, c.hi);
    rows.push_back({CheckScale::op, c.name, grad_check<D>(c.f, x, c.rows, c.cols, kEps)});
  }
  auto rec = recurrent_checks();
  rows.insert(rows.end(), rec.begin(), rec.end());
  return rows;
}

/// The negative control: must NOT pass.
inline GradCheckRow corrupted_check() {
  auto rng = make_rng(77, Stream::synth);
  auto x = random_values(rng, 6, -2.0, 2.0);
  auto f = [](Tape<D>&, const Tensor<D>& v) { return project(corrupted_tanh(v), 77); };
  return {CheckScale::op, "corrupted tanh (negative control)", grad_check<D>(f, x, 3, 2, kEps)};
}

}  // namespace gradcheck

inline std::vector<GradCheckRow> run_gradcheck(CheckScale scale) {
  switch (scale) {
    case CheckScale::op: return gradcheck::op_checks();
    case CheckScale::module: return gradcheck::module_checks();
    case CheckScale::end2end: return gradcheck::end2end_checks();
  }
  return {};
}

}  // namespace diffks
