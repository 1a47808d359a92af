#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/core/rng.hpp"
#include "diffks/data/corpus.hpp"

namespace diffks {

/// Shape of the generated sentences.
struct SyntheticShape {
  std::size_t sentence_length = 3;
  std::size_t post_length = 4;
  std::size_t noise_vocab = 30;
  /// Size of the word list sentences are drawn from; 0 (or anything below
  /// K * sentence_length) means exactly K * sentence_length, so every pool of a
  /// transition corpus is a partition of the same words.
  std::size_t content_words = 0;
};

namespace detail {

inline void check_synth_args(std::size_t pool_size, std::size_t dialogues, std::size_t turns, std::size_t min_turns) {
  if (pool_size < 2) throw ConfigError("synthetic corpus needs a pool size K >= 2");
  if (turns < min_turns) throw ConfigError("synthetic corpus needs T >= " + std::to_string(min_turns));
  if (dialogues < 1) throw ConfigError("synthetic corpus needs N >= 1");
}

/// K sentences over the content words w0..wP-1; no word is shared between two sentences.
inline std::vector<Tokens> draw_pool(Rng& rng, std::size_t pool_size, const SyntheticShape& shape) {
  const std::size_t length = shape.sentence_length;
  const std::size_t words = std::max(shape.content_words, pool_size * length);
  std::vector<std::size_t> ids(words);
  for (std::size_t i = 0; i < words; ++i) ids[i] = i;
  // Partial Fisher-Yates: the first K*length entries become a sample without replacement.
  for (std::size_t i = 0; i < pool_size * length; ++i)
    std::swap(ids[i], ids[i + uniform_index(rng, words - i)]);
  std::vector<Tokens> pool(pool_size);
  for (std::size_t k = 0; k < pool_size; ++k)
    for (std::size_t j = 0; j < length; ++j) pool[k].push_back("w" + std::to_string(ids[k * length + j]));
  return pool;
}

inline Tokens draw_noise(Rng& rng, const SyntheticShape& shape) {
  Tokens post;
  for (std::size_t j = 0; j < shape.post_length; ++j)
    post.push_back("n" + std::to_string(uniform_index(rng, shape.noise_vocab)));
  return post;
}

}  // namespace detail

/// Knowledge-transition task. Every turn of a dialogue offers the same K sentences (drawn
/// fresh per dialogue); the gold index starts uniformly at random and then advances by one,
/// modulo K, each turn. Posts are pure noise and responses repeat the gold sentence.
inline Corpus make_synthetic_transition_corpus(std::size_t pool_size, std::size_t dialogues, std::size_t turns,
                                               std::uint64_t seed, const SyntheticShape& shape = {}) {
  detail::check_synth_args(pool_size, dialogues, turns, 2);
  Corpus corpus;
  corpus.reserve(dialogues);
  for (std::size_t n = 0; n < dialogues; ++n) {
    auto rng = make_rng(seed, Stream::synth, 1, n);
    Dialogue d;
    d.id = "transition-" + std::to_string(n);
    const auto pool = detail::draw_pool(rng, pool_size, shape);
    auto gold = static_cast<int>(uniform_index(rng, pool_size));
    for (std::size_t t = 0; t < turns; ++t) {
      Turn turn;
      turn.post = detail::draw_noise(rng, shape);
      turn.knowledge = pool;
      turn.gold_index = gold;
      turn.response = pool[static_cast<std::size_t>(gold)];
      d.turns.push_back(std::move(turn));
      gold = (gold + 1) % static_cast<int>(pool_size);
    }
    corpus.push_back(std::move(d));
  }
  return corpus;
}

inline std::string topic_keyword(std::size_t index) { return "topic" + std::to_string(index); }

/// Context-keyword task. One fixed bank of K sentences (same order everywhere); each turn's
/// gold index is drawn i.i.d. and announced by the keyword "topic<i>" planted in the post.
/// Earlier selections carry no information about the current gold.
inline Corpus make_synthetic_context_corpus(std::size_t pool_size, std::size_t dialogues, std::size_t turns,
                                            std::uint64_t seed, const SyntheticShape& shape = {}) {
  detail::check_synth_args(pool_size, dialogues, turns, 2);
  auto bank_rng = make_rng(seed, Stream::synth, 2, 0);
  const auto pool = detail::draw_pool(bank_rng, pool_size, shape);
  Corpus corpus;
  corpus.reserve(dialogues);
  for (std::size_t n = 0; n < dialogues; ++n) {
    auto rng = make_rng(seed, Stream::synth, 3, n);
    Dialogue d;
    d.id = "context-" + std::to_string(n);
    for (std::size_t t = 0; t < turns; ++t) {
      Turn turn;
      const auto gold = uniform_index(rng, pool_size);
      turn.post = detail::draw_noise(rng, shape);
      const auto at = uniform_index(rng, turn.post.size() + 1);
      turn.post.insert(turn.post.begin() + static_cast<std::ptrdiff_t>(at), topic_keyword(gold));
      turn.knowledge = pool;
      turn.gold_index = static_cast<int>(gold);
      turn.response = pool[gold];
      d.turns.push_back(std::move(turn));
    }
    corpus.push_back(std::move(d));
  }
  return corpus;
}

}  // namespace diffks
