#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/data/dataset.hpp"

namespace diffks {

/// Flat "key = value" text configuration. '#' starts a comment.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& source = "<config>") {
    KeyValues kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto text = trim(line);
      if (text.empty()) continue;
      const auto eq = text.find('=');
      if (eq == std::string::npos)
        throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
      const auto key = trim(text.substr(0, eq));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
      kv.set(key, trim(text.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse(in, path);
  }

  static KeyValues parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  /// Applies "key=value".
  void set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
  }

 private:
  std::map<std::string, std::string> values_;
};

enum class SelectorVariant { fused, disentangled };
enum class Ablation { none, no_diffsel, no_ctxsel };
enum class HistorySource { predicted, gold };
enum class Precision { f32, f64 };

inline std::string to_string(SelectorVariant v) { return v == SelectorVariant::fused ? "fused" : "disentangled"; }
inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_diffsel: return "no_diffsel";
    case Ablation::no_ctxsel: return "no_ctxsel";
  }
  return "none";
}
inline std::string to_string(HistorySource h) { return h == HistorySource::gold ? "gold" : "predicted"; }
inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

/// Everything that fixes the parameter shapes and forward computation.
struct ModelConfig {
  std::size_t vocab_size = 0;  ///< derived from the vocabulary
  std::size_t emb_dim = 300;
  std::size_t enc_hidden = 200;  ///< per direction
  std::size_t dec_hidden = 400;
  std::size_t attn_dim = 0;  ///< 0: 2 * enc_hidden
  double dropout = 0.5;
  SelectorVariant variant = SelectorVariant::fused;
  Ablation ablation = Ablation::none;
  std::size_t history_turns = 1;  ///< M
  std::vector<double> history_weights;  ///< lambda_1..lambda_M; empty: 1/M each

  std::size_t attention_dim() const { return attn_dim ? attn_dim : 2 * enc_hidden; }

  /// lambda weights for M, validated: nonnegative and summing to 1.
  std::vector<double> lambdas() const {
    if (history_turns < 1) throw ConfigError("selector.M must be at least 1");
    if (history_weights.empty()) return std::vector<double>(history_turns, 1.0 / static_cast<double>(history_turns));
    if (history_weights.size() != history_turns)
      throw ConfigError("selector.lambda needs exactly M = " + std::to_string(history_turns) + " weights");
    double s = 0.0;
    for (double w : history_weights) {
      if (w < 0.0) throw ConfigError("selector.lambda weights must be nonnegative");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("selector.lambda weights must sum to 1");
    return history_weights;
  }
};

struct TrainConfig {
  ModelConfig model;
  LengthCaps caps;
  std::size_t vocab_cap = 20000;
  double lr = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;
  std::size_t batch_size = 8;
  std::size_t epochs = 20;
  double lambda_ks = 1.0;
  std::uint64_t seed = 1;
  Precision precision = Precision::f32;
  HistorySource eval_history = HistorySource::predicted;
  std::size_t max_decode_len = 50;
  std::string select_by = "bleu4";
  std::string train_file = "train.jsonl";
  std::string dev_file = "dev.jsonl";
  std::string data_format = "text";
  std::string embedding_file;
  std::string dataset;  ///< "wow" / "holle": check split sizes on load
  std::size_t jobs = 1;

  void validate() const {
    if (model.emb_dim < 1 || model.enc_hidden < 1 || model.dec_hidden < 1)
      throw ConfigError("model dimensions must be positive");
    if (!(model.dropout >= 0.0 && model.dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (lambda_ks < 0.0) throw ConfigError("lambda_ks must be nonnegative");
    if (vocab_cap < 1) throw ConfigError("vocab_cap must be positive");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be nonnegative");
    if (caps.context < 1 || caps.response < 1 || caps.knowledge < 1 || caps.pool < 1)
      throw ConfigError("length caps must be positive");
    if (max_decode_len < 1) throw ConfigError("eval.max_decode_len must be positive");
    if (select_by != "bleu4" && select_by != "acc") throw ConfigError("train.select_by must be bleu4 or acc");
    if (jobs < 1) throw ConfigError("jobs must be positive");
    (void)model.lambdas();
    (void)parse_corpus_format(data_format);
  }

  static TrainConfig from(const KeyValues& kv) {
    TrainConfig c;
    for (const auto& [key, value] : kv.values()) c.apply(key, value);
    c.validate();
    return c;
  }

  void apply(const std::string& key, const std::string& v) {
    if (key == "vocab_cap") vocab_cap = to_size(key, v);
    else if (key == "emb_dim") model.emb_dim = to_size(key, v);
    else if (key == "enc_hidden") model.enc_hidden = to_size(key, v);
    else if (key == "dec_hidden") model.dec_hidden = to_size(key, v);
    else if (key == "attn_dim") model.attn_dim = to_size(key, v);
    else if (key == "dropout") model.dropout = to_double(key, v);
    else if (key == "lr") lr = to_double(key, v);
    else if (key == "adam.beta1") beta1 = to_double(key, v);
    else if (key == "adam.beta2") beta2 = to_double(key, v);
    else if (key == "adam.eps") adam_eps = to_double(key, v);
    else if (key == "clip_norm") clip_norm = to_double(key, v);
    else if (key == "batch_size") batch_size = to_size(key, v);
    else if (key == "epochs") epochs = to_size(key, v);
    else if (key == "lambda_ks") lambda_ks = to_double(key, v);
    else if (key == "seed") seed = to_size(key, v);
    else if (key == "precision") {
      if (v == "f32") precision = Precision::f32;
      else if (v == "f64") precision = Precision::f64;
      else throw ConfigError("precision must be f32 or f64");
    } else if (key == "selector.variant") {
      if (v == "fused") model.variant = SelectorVariant::fused;
      else if (v == "disentangled") model.variant = SelectorVariant::disentangled;
      else throw ConfigError("selector.variant must be fused or disentangled");
    } else if (key == "selector.ablation") {
      if (v == "none") model.ablation = Ablation::none;
      else if (v == "no_diffsel") model.ablation = Ablation::no_diffsel;
      else if (v == "no_ctxsel") model.ablation = Ablation::no_ctxsel;
      else throw ConfigError("selector.ablation must be none, no_diffsel or no_ctxsel");
    } else if (key == "selector.M") model.history_turns = to_size(key, v);
    else if (key == "selector.lambda") model.history_weights = to_doubles(key, v);
    else if (key == "caps.context") caps.context = to_size(key, v);
    else if (key == "caps.response") caps.response = to_size(key, v);
    else if (key == "caps.knowledge") caps.knowledge = to_size(key, v);
    else if (key == "caps.pool") caps.pool = to_size(key, v);
    else if (key == "eval.history") {
      if (v == "predicted") eval_history = HistorySource::predicted;
      else if (v == "gold") eval_history = HistorySource::gold;
      else throw ConfigError("eval.history must be predicted or gold");
    } else if (key == "eval.max_decode_len") max_decode_len = to_size(key, v);
    else if (key == "train.select_by") select_by = v;
    else if (key == "data.train") train_file = v;
    else if (key == "data.dev") dev_file = v;
    else if (key == "data.format") data_format = v;
    else if (key == "data.dataset") dataset = v;
    else if (key == "embedding_file") embedding_file = v;
    else if (key == "jobs") jobs = to_size(key, v);
    else throw ConfigError("unknown config key: " + key);
  }

  /// Complete key-value echo; parsing it back yields an identical configuration.
  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("vocab_cap", std::to_string(vocab_cap));
    kv.set("emb_dim", std::to_string(model.emb_dim));
    kv.set("enc_hidden", std::to_string(model.enc_hidden));
    kv.set("dec_hidden", std::to_string(model.dec_hidden));
    kv.set("attn_dim", std::to_string(model.attn_dim));
    kv.set("dropout", fmt_double(model.dropout));
    kv.set("lr", fmt_double(lr));
    kv.set("adam.beta1", fmt_double(beta1));
    kv.set("adam.beta2", fmt_double(beta2));
    kv.set("adam.eps", fmt_double(adam_eps));
    kv.set("clip_norm", fmt_double(clip_norm));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("epochs", std::to_string(epochs));
    kv.set("lambda_ks", fmt_double(lambda_ks));
    kv.set("seed", std::to_string(seed));
    kv.set("precision", to_string(precision));
    kv.set("selector.variant", to_string(model.variant));
    kv.set("selector.ablation", to_string(model.ablation));
    kv.set("selector.M", std::to_string(model.history_turns));
    std::string lam;
    for (double w : model.lambdas()) lam += (lam.empty() ? "" : ",") + fmt_double(w);
    kv.set("selector.lambda", lam);
    kv.set("caps.context", std::to_string(caps.context));
    kv.set("caps.response", std::to_string(caps.response));
    kv.set("caps.knowledge", std::to_string(caps.knowledge));
    kv.set("caps.pool", std::to_string(caps.pool));
    kv.set("eval.history", to_string(eval_history));
    kv.set("eval.max_decode_len", std::to_string(max_decode_len));
    kv.set("train.select_by", select_by);
    kv.set("data.train", train_file);
    kv.set("data.dev", dev_file);
    kv.set("data.format", data_format);
    if (!dataset.empty()) kv.set("data.dataset", dataset);
    if (!embedding_file.empty()) kv.set("embedding_file", embedding_file);
    kv.set("jobs", std::to_string(jobs));
    return kv;
  }

  /// Shortest round-trip text, in plain decimal notation unless that gets long.
  static std::string fmt_double(double x) {
    char buf[400];
    auto r = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::fixed);
    if (r.ec == std::errc() && r.ptr - buf <= 16) return std::string(buf, r.ptr);
    r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
  }

 private:
  static std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size())
      throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
  }
  static double to_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
  }
  static std::vector<double> to_doubles(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = KeyValues::trim(item);
      if (!item.empty()) out.push_back(to_double(key, item));
    }
    return out;
  }
};

}  // namespace diffks
