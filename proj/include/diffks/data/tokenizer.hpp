#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace diffks {

using Tokens = std::vector<std::string>;

namespace detail {

inline bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }
inline bool is_digit(unsigned char c) { return std::isdigit(c) != 0; }

/// Length of a single-letter abbreviation such as "u.s." or "e.g." starting at i, else 0.
inline std::size_t abbreviation_length(std::string_view s, std::size_t i) {
  std::size_t j = i, letters = 0;
  while (j + 1 < s.size() && std::isalpha(static_cast<unsigned char>(s[j])) && s[j + 1] == '.') {
    j += 2;
    ++letters;
  }
  if (letters < 2) return 0;
  if (j < s.size() && is_word_char(static_cast<unsigned char>(s[j]))) return 0;
  return j - i;
}

}  // namespace detail

/// Rule-based word tokenizer.
///
/// Rules, applied to each whitespace-separated chunk after ASCII lowercasing:
///  - a word is a run of letters/digits (bytes >= 0x80 count as letters);
///  - an apostrophe or hyphen between two word characters stays inside the word
///    ("it's", "don't", "well-known");
///  - '.' or ',' between two digits stays inside the number ("3.14", "1,000");
///  - single-letter abbreviations keep their periods ("u.s.", "e.g.");
///  - every other punctuation character is a token; runs of the same character
///    form one token ("...", "!!").
inline Tokens tokenize(std::string_view text) {
  std::string s(text);
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  Tokens out;
  const std::size_t n = s.size();
  std::size_t i = 0;
  while (i < n) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (detail::is_word_char(c)) {
      if (std::size_t a = detail::abbreviation_length(s, i); a > 0) {
        out.emplace_back(s.substr(i, a));
        i += a;
        continue;
      }
      std::size_t j = i;
      while (j < n) {
        const auto cj = static_cast<unsigned char>(s[j]);
        if (detail::is_word_char(cj)) {
          ++j;
          continue;
        }
        const bool has_next = j + 1 < n;
        const auto next = has_next ? static_cast<unsigned char>(s[j + 1]) : 0;
        const auto prev = static_cast<unsigned char>(s[j - 1]);
        if ((cj == '\'' || cj == '-') && has_next && detail::is_word_char(next)) {
          ++j;
          continue;
        }
        if ((cj == '.' || cj == ',') && has_next && detail::is_digit(prev) && detail::is_digit(next)) {
          ++j;
          continue;
        }
        break;
      }
      out.emplace_back(s.substr(i, j - i));
      i = j;
      continue;
    }
    std::size_t j = i + 1;
    while (j < n && s[j] == s[i]) ++j;
    out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Whitespace split, for text that is already tokenized.
inline Tokens split_tokens(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join_tokens(const Tokens& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

}  // namespace diffks
