#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace oracle {

using Tokens = std::vector<std::string>;

// Brute-force n-gram arithmetic by linear scans, no maps.
inline std::size_t occurrences(const Tokens& s, const Tokens& s_src, std::size_t at, std::size_t n) {
  std::size_t k = 0;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    bool eq = true;
    for (std::size_t j = 0; j < n && eq; ++j) eq = s[i + j] == s_src[at + j];
    k += eq;
  }
  return k;
}

inline bool seen_before(const Tokens& s, std::size_t at, std::size_t n) {
  for (std::size_t i = 0; i < at; ++i) {
    bool eq = true;
    for (std::size_t j = 0; j < n && eq; ++j) eq = s[i + j] == s[at + j];
    if (eq) return true;
  }
  return false;
}

inline std::size_t clipped_matches(const Tokens& cand, const Tokens& ref, std::size_t n) {
  std::size_t m = 0;
  for (std::size_t i = 0; i + n <= cand.size(); ++i) {
    if (seen_before(cand, i, n)) continue;
    m += std::min(occurrences(cand, cand, i, n), occurrences(ref, cand, i, n));
  }
  return m;
}

inline double bleu_oracle(const std::vector<Tokens>& cands, const std::vector<Tokens>& refs, std::size_t max_n) {
  double c = 0, r = 0, log_sum = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    c += double(cands[i].size());
    r += double(refs[i].size());
  }
  for (std::size_t n = 1; n <= max_n; ++n) {
    double match = 0, total = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      match += double(clipped_matches(cands[i], refs[i], n));
      if (cands[i].size() >= n) total += double(cands[i].size() - n + 1);
    }
    log_sum += std::log(match > 0 ? match / total : 1e-9);
  }
  const double bp = c < r ? std::exp(1 - r / c) : 1.0;
  return bp * std::exp(log_sum / double(max_n));
}

inline double rouge_oracle(const Tokens& cand, const Tokens& ref) {
  if (cand.size() < 2 || ref.size() < 2) return 0;
  const double m = double(clipped_matches(cand, ref, 2));
  if (m == 0) return 0;
  const double p = m / double(cand.size() - 1), r = m / double(ref.size() - 1);
  return 2 * p * r / (p + r);
}

}  // namespace oracle
