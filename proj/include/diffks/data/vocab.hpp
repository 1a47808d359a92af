#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/data/corpus.hpp"

namespace diffks {

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kSos = 2;
inline constexpr int kEos = 3;
inline constexpr int kNumSpecials = 4;

inline constexpr std::array<std::string_view, kNumSpecials> kSpecialTokens = {"<pad>", "<unk>", "<sos>", "<eos>"};

inline bool is_special_token(std::string_view t) {
  return std::find(kSpecialTokens.begin(), kSpecialTokens.end(), t) != kSpecialTokens.end();
}

/// Token <-> id map. Ids 0..3 are the fixed specials; everything else follows in
/// frequency order.
class Vocabulary {
 public:
  Vocabulary() {
    for (auto t : kSpecialTokens) push(std::string(t));
  }

  /// Keeps the `cap` most frequent tokens of posts, responses and knowledge;
  /// ties go to the token seen first.
  static Vocabulary build(const Corpus& corpus, std::size_t cap) {
    if (cap < 1) throw ConfigError("vocabulary cap must be at least 1");
    if (corpus.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
    std::unordered_map<std::string, std::size_t> slot;
    std::vector<std::pair<std::string, std::size_t>> counts;
    auto see = [&](const Tokens& toks) {
      for (const auto& t : toks) {
        if (is_special_token(t)) continue;
        auto [it, inserted] = slot.try_emplace(t, counts.size());
        if (inserted) counts.emplace_back(t, 0);
        ++counts[it->second].second;
      }
    };
    for (const auto& d : corpus)
      for (const auto& turn : d.turns) {
        see(turn.post);
        see(turn.response);
        for (const auto& k : turn.knowledge) see(k);
      }
    std::stable_sort(counts.begin(), counts.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (std::size_t i = 0; i < counts.size() && i < cap; ++i) v.push(counts[i].first);
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& regular) {
    Vocabulary v;
    for (const auto& t : regular) {
      if (is_special_token(t)) throw DataError("vocabulary lists a special token: " + t);
      if (v.index_.count(t)) throw DataError("duplicate vocabulary token: " + t);
      v.push(t);
    }
    return v;
  }

  /// One regular token per line; line n (0-based) holds id n + 4.
  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return from_tokens(tokens);
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary file: " + path);
    for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  }

  int id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw DimensionError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::vector<std::string> regular_tokens() const { return {tokens_.begin() + kNumSpecials, tokens_.end()}; }

  std::vector<int> encode(const Tokens& toks) const {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(id(t));
    return ids;
  }
  Tokens decode(const std::vector<int>& ids) const {
    Tokens out;
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void push(std::string t) {
    index_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace diffks
