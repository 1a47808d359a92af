#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/core/ops.hpp"
#include "diffks/core/tensor.hpp"
#include "diffks/data/dataset.hpp"
#include "diffks/data/vocab.hpp"
#include "diffks/model/config.hpp"
#include "diffks/model/decoder.hpp"
#include "diffks/model/model.hpp"
#include "diffks/model/selector.hpp"

namespace diffks {

enum class RolloutMode { train, eval };

/// Loss terms and selection outcome of one turn.
struct TurnLossRecord {
  double nll = 0.0;  ///< -sum log P over response tokens and EOS
  std::size_t n_tokens = 0;
  double ks = 0.0;  ///< -log alpha at the gold candidate
  std::size_t chosen = 0;
  std::size_t gold = 0;
};

struct RolloutOptions {
  RolloutMode mode = RolloutMode::train;
  /// Which representation enters the selection history in eval mode. Train mode
  /// always uses the gold one.
  HistorySource history = HistorySource::predicted;
  double lambda_ks = 1.0;
  bool decode = false;  ///< greedy-decode every turn (eval mode)
  std::size_t max_decode_len = 50;
};

template <class T>
struct DialogueRollout {
  std::vector<TurnLossRecord> records;
  std::vector<SelectionOutput<T>> selections;
  std::vector<std::vector<int>> generated;
  Tensor<T> loss;  ///< sum over turns of nll + lambda_ks * ks
};

/// Runs one dialogue turn by turn, carrying the selection state across turns.
///   train: history holds the gold h_k, the decoder is teacher-forced on the gold
///          sentence;
///   eval:  history holds the chosen (or, on request, gold) h_k, the decoder reads the
///          chosen sentence and is scored teacher-forced; greedy output if asked.
template <class T>
DialogueRollout<T> forward_dialogue(Tape<T>& tape, const DiffKSModel<T>& model, const EncodedDialogue& dialogue,
                                    const RolloutOptions& opt, Rng& rng) {
  if (dialogue.turns.empty()) throw DataError("dialogue " + dialogue.id + " has no turns");
  const auto& cfg = model.config();
  const bool training = opt.mode == RolloutMode::train;
  const std::size_t M = cfg.history_turns;
  DialogueRollout<T> out;
  SelectionState<T> state;
  for (const auto& turn : dialogue.turns) {
    const auto gold = static_cast<std::size_t>(turn.gold);
    if (gold >= turn.candidates.size() || (!turn.mask.empty() && !turn.mask[gold]))
      throw DataError("dialogue " + dialogue.id + ": gold candidate is missing or masked");
    auto enc = model.encode_turn(tape, turn, training, rng);
    auto sel = select(enc.selector_inputs(turn.mask), state, cfg, model.selector());

    auto ks = affine(log_softmax_at(sel.beta, turn.mask, gold), T(-1));
    const std::size_t used = training ? gold : sel.chosen;
    auto mem = model.memory(enc, turn, used);
    auto s0 = init_state(enc.h_c, mem.h_k, model.decoder());

    std::vector<int> inputs{kSos}, targets(turn.response);
    inputs.insert(inputs.end(), turn.response.begin(), turn.response.end());
    targets.push_back(kEos);
    auto lp = teacher_forced_log_probs(s0, mem, inputs, model.embedding(), model.decoder(), cfg.dropout, training,
                                       rng);
    auto nll = sequence_nll(lp, targets);
    auto turn_loss = opt.lambda_ks == 0.0 ? nll : add(nll, affine(ks, static_cast<T>(opt.lambda_ks)));
    out.loss = out.loss.valid() ? add(out.loss, turn_loss) : turn_loss;

    TurnLossRecord rec;
    rec.nll = static_cast<double>(nll.item());
    rec.n_tokens = targets.size();
    rec.ks = static_cast<double>(ks.item());
    rec.chosen = sel.chosen;
    rec.gold = gold;
    if (!std::isfinite(rec.nll) || !std::isfinite(rec.ks))
      throw NumericalError("non-finite loss in dialogue " + dialogue.id);
    out.records.push_back(rec);

    if (opt.decode) out.generated.push_back(greedy_decode(s0, mem, model.embedding(), model.decoder(), opt.max_decode_len));

    const bool gold_history = training || opt.history == HistorySource::gold;
    state.advance(slice_cols(enc.Hk, gold_history ? gold : sel.chosen, 1), M);
    out.selections.push_back(std::move(sel));
  }
  return out;
}

struct LossTotals {
  double nll = 0.0;
  double ks = 0.0;
  double total = 0.0;
};

/// L_NLL and L_KS summed over turns; L = L_NLL + lambda_ks * L_KS.
inline LossTotals compute_total_loss(const std::vector<TurnLossRecord>& records, double lambda_ks) {
  if (records.empty()) throw DataError("compute_total_loss: no turns");
  LossTotals t;
  for (const auto& r : records) {
    t.nll += r.nll;
    t.ks += r.ks;
  }
  t.total = lambda_ks == 0.0 ? t.nll : t.nll + lambda_ks * t.ks;
  return t;
}

}  // namespace diffks
