#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/data/tokenizer.hpp"

namespace diffks {

/// Exact-match selection accuracy, overall and bucketed by 1-based turn position.
struct AccuracyTable {
  double overall = 0.0;
  std::vector<double> by_turn;        ///< index t-1 holds turn t
  std::vector<std::size_t> counts;    ///< turns observed at each position
  std::vector<std::size_t> correct;
  std::size_t total = 0;
};

/// pred and gold are aligned lists of (turn position, candidate index).
inline AccuracyTable selection_accuracy(const std::vector<std::pair<std::size_t, std::size_t>>& pred,
                                        const std::vector<std::pair<std::size_t, std::size_t>>& gold) {
  if (pred.size() != gold.size())
    throw DimensionError("selection_accuracy: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(gold.size()) + " gold entries");
  AccuracyTable t;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto pos = pred[i].first;
    if (pos != gold[i].first || pos < 1) throw DimensionError("selection_accuracy: misaligned turn positions");
    if (t.counts.size() < pos) {
      t.counts.resize(pos, 0);
      t.correct.resize(pos, 0);
    }
    ++t.counts[pos - 1];
    if (pred[i].second == gold[i].second) {
      ++t.correct[pos - 1];
      ++hits;
    }
  }
  t.total = pred.size();
  t.overall = t.total ? static_cast<double>(hits) / static_cast<double>(t.total) : 0.0;
  for (std::size_t p = 0; p < t.counts.size(); ++p)
    t.by_turn.push_back(t.counts[p] ? static_cast<double>(t.correct[p]) / static_cast<double>(t.counts[p]) : 0.0);
  return t;
}

namespace detail {

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& s, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++c[Tokens(s.begin() + static_cast<std::ptrdiff_t>(i),
                                                             s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return c;
}

inline std::size_t clipped_overlap(const std::map<std::vector<std::string>, std::size_t>& cand,
                                   const std::map<std::vector<std::string>, std::size_t>& ref) {
  std::size_t m = 0;
  for (const auto& [g, c] : cand)
    if (auto it = ref.find(g); it != ref.end()) m += std::min(c, it->second);
  return m;
}

}  // namespace detail

inline constexpr double kBleuFloor = 1e-9;

/// Corpus BLEU with one reference per candidate: clipped n-gram counts pooled over the
/// corpus, geometric mean of p_1..p_max_n with zero precisions replaced by 1e-9, and
/// brevity penalty exp(1 - r/c) when the total candidate length c is below r.
inline double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                          std::size_t max_n) {
  if (candidates.size() != references.size())
    throw DimensionError("corpus_bleu: " + std::to_string(candidates.size()) + " candidates for " +
                         std::to_string(references.size()) + " references");
  if (candidates.empty()) throw DataError("corpus_bleu: empty corpus");
  if (max_n < 1) throw DimensionError("corpus_bleu: max_n must be positive");
  std::vector<std::size_t> match(max_n, 0), total(max_n, 0);
  std::size_t c = 0, r = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    c += candidates[i].size();
    r += references[i].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto cc = detail::ngram_counts(candidates[i], n);
      match[n - 1] += detail::clipped_overlap(cc, detail::ngram_counts(references[i], n));
      if (candidates[i].size() >= n) total[n - 1] += candidates[i].size() - n + 1;
    }
  }
  if (c == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    const double p = match[n] ? static_cast<double>(match[n]) / static_cast<double>(total[n]) : kBleuFloor;
    log_p += std::log(p);
  }
  const double bp = c < r ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)) : 1.0;
  return bp * std::exp(log_p / static_cast<double>(max_n));
}

/// Bigram-overlap F1 with clipped counts; 0 when either side has fewer than 2 tokens.
inline double rouge2(const Tokens& candidate, const Tokens& reference) {
  if (candidate.size() < 2 || reference.size() < 2) return 0.0;
  const auto overlap =
      detail::clipped_overlap(detail::ngram_counts(candidate, 2), detail::ngram_counts(reference, 2));
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(candidate.size() - 1);
  const double r = static_cast<double>(overlap) / static_cast<double>(reference.size() - 1);
  return 2.0 * p * r / (p + r);
}

/// Mean ROUGE-2 F1 over aligned pairs.
inline double corpus_rouge2(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  if (candidates.size() != references.size()) throw DimensionError("corpus_rouge2: length mismatch");
  if (candidates.empty()) throw DataError("corpus_rouge2: empty corpus");
  double s = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += rouge2(candidates[i], references[i]);
  return s / static_cast<double>(candidates.size());
}

}  // namespace diffks
