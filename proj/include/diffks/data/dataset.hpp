#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/core/rng.hpp"
#include "diffks/data/corpus.hpp"
#include "diffks/data/vocab.hpp"

namespace diffks {

/// Length limits applied when a turn is turned into model input.
struct LengthCaps {
  std::size_t context = 100;
  std::size_t response = 50;
  std::size_t knowledge = 40;  ///< tokens per knowledge sentence
  std::size_t pool = 40;       ///< knowledge sentences per turn, not counting k0
};

/// c^1 = x^1; c^t = [x^{t-1}; y^{t-1}; x^t], with the oldest tokens dropped past the cap.
/// `turn` is 1-based.
inline Tokens assemble_context(const Dialogue& d, std::size_t turn, std::size_t cap) {
  if (turn < 1 || turn > d.turns.size())
    throw DimensionError("turn " + std::to_string(turn) + " outside 1.." + std::to_string(d.turns.size()));
  if (cap < 1) throw ConfigError("context cap must be positive");
  Tokens c;
  if (turn >= 2) {
    const auto& prev = d.turns[turn - 2];
    c.insert(c.end(), prev.post.begin(), prev.post.end());
    c.insert(c.end(), prev.response.begin(), prev.response.end());
  }
  const auto& cur = d.turns[turn - 1];
  c.insert(c.end(), cur.post.begin(), cur.post.end());
  if (c.size() > cap) c.erase(c.begin(), c.end() - static_cast<std::ptrdiff_t>(cap));
  return c;
}

/// Knowledge pool with the empty sentence k0 = [<eos>] at index 0.
struct CandidateSet {
  std::vector<Tokens> sentences;
  int shifted_gold = 0;
  std::vector<std::uint8_t> mask;
  /// Source index of each kept sentence (-1 for k0).
  std::vector<int> source_index;
};

/// Truncates each sentence, caps the pool size keeping the gold sentence (it replaces
/// the last kept one if it would be dropped), prepends k0 and shifts the gold index by one.
inline CandidateSet prepare_candidates(const Turn& turn, const LengthCaps& caps) {
  if (caps.pool < 1 || caps.knowledge < 1) throw ConfigError("pool and knowledge caps must be positive");
  const int n = static_cast<int>(turn.knowledge.size());
  std::vector<int> kept;
  for (int i = 0; i < n && kept.size() < caps.pool; ++i) kept.push_back(i);
  if (turn.gold_index >= static_cast<int>(caps.pool) && turn.gold_index < n) kept.back() = turn.gold_index;

  CandidateSet cs;
  cs.sentences.push_back({std::string(kSpecialTokens[kEos])});
  cs.mask.push_back(1);
  cs.source_index.push_back(-1);
  cs.shifted_gold = 0;
  for (int src : kept) {
    Tokens s = turn.knowledge[static_cast<std::size_t>(src)];
    if (s.size() > caps.knowledge) s.resize(caps.knowledge);
    const bool gold = src == turn.gold_index;
    cs.mask.push_back(s.empty() && !gold ? 0 : 1);
    if (s.empty()) s.push_back(std::string(kSpecialTokens[kUnk]));
    if (gold) cs.shifted_gold = static_cast<int>(cs.sentences.size());
    cs.sentences.push_back(std::move(s));
    cs.source_index.push_back(src);
  }
  return cs;
}

/// Model-ready turn: token ids after capping.
struct EncodedTurn {
  std::vector<int> context;
  std::vector<std::vector<int>> candidates;
  std::vector<std::uint8_t> mask;
  int gold = 0;
  std::vector<int> response;  ///< without SOS/EOS
  Tokens reference;           ///< capped response tokens before vocabulary mapping
  std::vector<Tokens> candidate_tokens;
};

struct EncodedDialogue {
  std::string id;
  std::vector<EncodedTurn> turns;
};

inline EncodedDialogue encode_dialogue(const Dialogue& d, const Vocabulary& vocab, const LengthCaps& caps) {
  EncodedDialogue out;
  out.id = d.id;
  for (std::size_t t = 1; t <= d.turns.size(); ++t) {
    const auto& turn = d.turns[t - 1];
    EncodedTurn et;
    et.context = vocab.encode(assemble_context(d, t, caps.context));
    auto cs = prepare_candidates(turn, caps);
    for (const auto& s : cs.sentences) et.candidates.push_back(vocab.encode(s));
    et.candidate_tokens = std::move(cs.sentences);
    et.mask = std::move(cs.mask);
    et.gold = cs.shifted_gold;
    Tokens resp = turn.response;
    if (resp.size() > caps.response) resp.resize(caps.response);
    et.response = vocab.encode(resp);
    et.reference = std::move(resp);
    out.turns.push_back(std::move(et));
  }
  return out;
}

inline std::vector<EncodedDialogue> encode_corpus(const Corpus& corpus, const Vocabulary& vocab, const LengthCaps& caps) {
  std::vector<EncodedDialogue> out;
  out.reserve(corpus.size());
  for (const auto& d : corpus) out.push_back(encode_dialogue(d, vocab, caps));
  return out;
}

/// A group of dialogues rolled out turn-synchronously. turn_mask[b][t] is 1 when
/// dialogue b has a turn t; padded turns contribute no loss.
struct Batch {
  std::vector<std::size_t> dialogues;
  std::size_t max_turns = 0;
  std::vector<std::vector<std::uint8_t>> turn_mask;
};

/// Shuffles dialogue indices with the (seed, epoch) stream and cuts them into batches;
/// the last batch keeps the remainder.
inline std::vector<Batch> make_batches(const std::vector<std::size_t>& turn_counts, std::size_t batch_size,
                                       std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (turn_counts.empty()) throw DataError("cannot batch an empty corpus");
  std::vector<std::size_t> order(turn_counts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_rng(seed, Stream::shuffle, epoch);
  shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    Batch b;
    b.dialogues.assign(order.begin() + static_cast<std::ptrdiff_t>(i),
                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
    for (auto d : b.dialogues) b.max_turns = std::max(b.max_turns, turn_counts[d]);
    for (auto d : b.dialogues) {
      std::vector<std::uint8_t> m(b.max_turns, 0);
      std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(turn_counts[d]), 1);
      b.turn_mask.push_back(std::move(m));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

template <class D>
std::vector<std::size_t> turn_counts(const std::vector<D>& dialogues) {
  std::vector<std::size_t> n;
  n.reserve(dialogues.size());
  for (const auto& d : dialogues) n.push_back(d.turns.size());
  return n;
}

}  // namespace diffks
