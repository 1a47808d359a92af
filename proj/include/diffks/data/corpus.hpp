#pragma once

#include <cstddef>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/data/tokenizer.hpp"

namespace diffks {

struct Turn {
  Tokens post;
  Tokens response;
  std::vector<Tokens> knowledge;
  /// -1: no knowledge used; otherwise an index into `knowledge`.
  int gold_index = -1;

  bool operator==(const Turn&) const = default;
};

struct Dialogue {
  std::string id;
  std::vector<Turn> turns;

  bool operator==(const Dialogue&) const = default;
};

using Corpus = std::vector<Dialogue>;

/// How string fields of a corpus line are turned into tokens.
enum class CorpusFormat {
  raw_text,      ///< run the rule-based tokenizer
  pretokenized,  ///< split on whitespace only
};

inline CorpusFormat parse_corpus_format(std::string_view s) {
  if (s == "text" || s == "raw_text") return CorpusFormat::raw_text;
  if (s == "tokens" || s == "pretokenized") return CorpusFormat::pretokenized;
  throw ConfigError("unknown corpus format '" + std::string(s) + "' (expected text|tokens)");
}

class CorpusError : public DataError {
 public:
  CorpusError(const std::string& source, std::size_t line, const std::string& what)
      : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Checks the structural invariants of one dialogue; returns an error message or nullopt.
inline std::optional<std::string> validate_dialogue(const Dialogue& d) {
  if (d.turns.empty()) return "dialogue '" + d.id + "' has no turns";
  for (std::size_t t = 0; t < d.turns.size(); ++t) {
    const auto& turn = d.turns[t];
    const std::string where = "dialogue '" + d.id + "' turn " + std::to_string(t + 1);
    if (turn.post.empty()) return where + ": empty post";
    if (turn.response.empty()) return where + ": empty response";
    if (turn.gold_index < -1 || turn.gold_index >= static_cast<int>(turn.knowledge.size()))
      return where + ": gold_knowledge_index " + std::to_string(turn.gold_index) + " outside [-1, " +
             std::to_string(turn.knowledge.size()) + ")";
  }
  return std::nullopt;
}

inline Dialogue parse_dialogue_line(std::string_view line, CorpusFormat format, const std::string& source,
                                    std::size_t line_no) {
  auto tok = [format](const std::string& s) {
    return format == CorpusFormat::raw_text ? tokenize(s) : split_tokens(s);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorpusError(source, line_no, std::string("malformed record: ") + e.what());
  }
  Dialogue d;
  try {
    d.id = j.at("id").get<std::string>();
    for (const auto& jt : j.at("turns")) {
      Turn t;
      t.post = tok(jt.at("post").get<std::string>());
      t.response = tok(jt.at("response").get<std::string>());
      for (const auto& k : jt.at("knowledge")) t.knowledge.push_back(tok(k.get<std::string>()));
      t.gold_index = jt.at("gold_knowledge_index").get<int>();
      d.turns.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(source, line_no, std::string("malformed record: ") + e.what());
  }
  if (auto err = validate_dialogue(d)) throw CorpusError(source, line_no, *err);
  return d;
}

/// One dialogue per line; blank lines are skipped.
inline Corpus read_corpus(std::istream& in, CorpusFormat format, const std::string& source = "<stream>") {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    corpus.push_back(parse_dialogue_line(line, format, source, line_no));
  }
  return corpus;
}

inline Corpus load_corpus(const std::string& path, CorpusFormat format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path);
  return read_corpus(in, format, path);
}

/// Normalized single-line form: every string field is its tokens joined by one space.
inline std::string serialize_dialogue(const Dialogue& d) {
  nlohmann::json j;
  j["id"] = d.id;
  j["turns"] = nlohmann::json::array();
  for (const auto& t : d.turns) {
    nlohmann::json jt;
    jt["post"] = join_tokens(t.post);
    jt["response"] = join_tokens(t.response);
    jt["knowledge"] = nlohmann::json::array();
    for (const auto& k : t.knowledge) jt["knowledge"].push_back(join_tokens(k));
    jt["gold_knowledge_index"] = t.gold_index;
    j["turns"].push_back(std::move(jt));
  }
  return j.dump();
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& d : corpus) out << serialize_dialogue(d) << '\n';
}

inline void save_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus file: " + path);
  write_corpus(out, corpus);
}

inline std::size_t count_turns(const Corpus& corpus) {
  std::size_t n = 0;
  for (const auto& d : corpus) n += d.turns.size();
  return n;
}

/// Published split sizes of the two benchmark datasets, for validating converted files.
struct SplitSize {
  std::string_view dataset;
  std::string_view split;
  std::size_t dialogues;
};

inline constexpr SplitSize kKnownSplits[] = {
    {"wow", "train", 18430}, {"wow", "dev", 1948},   {"wow", "test_seen", 965}, {"wow", "test_unseen", 968},
    {"holle", "train", 7211}, {"holle", "dev", 930}, {"holle", "test", 913},
};

inline std::optional<std::size_t> expected_split_size(std::string_view dataset, std::string_view split) {
  for (const auto& s : kKnownSplits)
    if (s.dataset == dataset && s.split == split) return s.dialogues;
  return std::nullopt;
}

/// Throws DataError when a converted split does not have its published size.
inline void check_split_size(const Corpus& corpus, std::string_view dataset, std::string_view split) {
  auto expected = expected_split_size(dataset, split);
  if (!expected)
    throw ConfigError("unknown dataset split " + std::string(dataset) + "/" + std::string(split));
  if (corpus.size() != *expected)
    throw DataError(std::string(dataset) + "/" + std::string(split) + ": expected " +
                    std::to_string(*expected) + " dialogues, found " + std::to_string(corpus.size()));
}

}  // namespace diffks
