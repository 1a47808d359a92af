#pragma once

#include <atomic>
#include <cstddef>
#include <cstdio>
#include <exception>
#include <mutex>
#include <nlohmann/json.hpp>
#include <string>
#include <thread>
#include <vector>

#include "diffks/core/rng.hpp"
#include "diffks/core/tensor.hpp"
#include "diffks/data/dataset.hpp"
#include "diffks/data/vocab.hpp"
#include "diffks/eval/metrics.hpp"
#include "diffks/model/model.hpp"
#include "diffks/train/rollout.hpp"

namespace diffks {

struct EvalReport {
  double acc = 0.0;
  std::vector<double> acc_by_turn;
  std::vector<std::size_t> turns_by_position;
  double bleu2 = 0.0;
  double bleu4 = 0.0;
  double rouge2 = 0.0;
  double nll_per_token = 0.0;  ///< teacher-forced on the chosen sentence
  std::size_t n_dialogues = 0;
  std::size_t n_turns = 0;
  HistorySource history = HistorySource::predicted;
  std::string config;  ///< key-value echo

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["acc"] = acc;
    j["acc_by_turn"] = acc_by_turn;
    j["turns_by_position"] = turns_by_position;
    j["bleu2"] = bleu2;
    j["bleu4"] = bleu4;
    j["rouge2"] = rouge2;
    j["nll_per_token"] = nll_per_token;
    j["n_dialogues"] = n_dialogues;
    j["n_turns"] = n_turns;
    j["history"] = to_string(history);
    j["config"] = config;
    return j;
  }

  /// Metrics x100, as in the usual results tables.
  std::string to_table(bool per_turn) const {
    char buf[256];
    std::string s;
    std::snprintf(buf, sizeof buf, "history=%s  dialogues=%zu  turns=%zu\n", to_string(history).c_str(), n_dialogues,
                  n_turns);
    s += buf;
    std::snprintf(buf, sizeof buf, "%8s %8s %8s %8s\n%8.2f %8.2f %8.2f %8.2f\n", "ACC", "BLEU-2", "BLEU-4", "ROUGE-2",
                  100 * acc, 100 * bleu2, 100 * bleu4, 100 * rouge2);
    s += buf;
    if (per_turn) {
      s += "\nselection accuracy by turn\n";
      std::string head, row, cnt;
      for (std::size_t t = 0; t < acc_by_turn.size(); ++t) {
        std::snprintf(buf, sizeof buf, "%8s", ordinal(t + 1).c_str());
        head += buf;
        std::snprintf(buf, sizeof buf, "%8.2f", 100 * acc_by_turn[t]);
        row += buf;
        std::snprintf(buf, sizeof buf, "%8zu", turns_by_position[t]);
        cnt += buf;
      }
      s += head + "\n" + row + "\n" + cnt + "  (turns)\n";
    }
    return s;
  }

  static std::string ordinal(std::size_t n) {
    const char* suffix = "th";
    if (n % 100 < 11 || n % 100 > 13) {
      if (n % 10 == 1) suffix = "st";
      else if (n % 10 == 2) suffix = "nd";
      else if (n % 10 == 3) suffix = "rd";
    }
    return std::to_string(n) + suffix;
  }
};

struct EvalOptions {
  HistorySource history = HistorySource::predicted;
  std::size_t max_decode_len = 50;
  std::size_t jobs = 1;
  std::string config;
};

/// Per-dialogue outputs kept alongside the report.
struct DialogueOutput {
  std::vector<TurnLossRecord> records;
  std::vector<Tokens> hypotheses;
};

struct Evaluation {
  EvalReport report;
  std::vector<DialogueOutput> dialogues;
};

/// Fraction of corpus tokens (posts, responses, knowledge) the vocabulary knows.
inline double vocabulary_coverage(const Corpus& corpus, const Vocabulary& vocab) {
  std::size_t known = 0, total = 0;
  auto count = [&](const Tokens& ts) {
    for (const auto& t : ts) {
      ++total;
      known += vocab.contains(t) ? 1 : 0;
    }
  };
  for (const auto& d : corpus)
    for (const auto& turn : d.turns) {
      count(turn.post);
      count(turn.response);
      for (const auto& k : turn.knowledge) count(k);
    }
  return total ? static_cast<double>(known) / static_cast<double>(total) : 1.0;
}

/// Throws DataError when the corpus looks like it was built for another vocabulary.
inline void check_vocabulary_match(const Corpus& corpus, const Vocabulary& vocab, double min_coverage = 0.5) {
  const double cov = vocabulary_coverage(corpus, vocab);
  if (cov < min_coverage) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "vocabulary mismatch: the checkpoint vocabulary covers only %.1f%% of corpus tokens (need %.0f%%)",
                  100 * cov, 100 * min_coverage);
    throw DataError(buf);
  }
}

/// Eval-mode rollout of every dialogue with greedy decoding. Dialogues are spread over
/// `jobs` threads that only read parameters; results are reduced in corpus order, so
/// the report does not depend on the thread count.
template <class T>
Evaluation evaluate(const DiffKSModel<T>& model, const Vocabulary& vocab, const std::vector<EncodedDialogue>& data,
                    const EvalOptions& opt) {
  if (data.empty()) throw DataError("evaluate: empty corpus");
  Evaluation ev;
  ev.dialogues.resize(data.size());
  RolloutOptions ro;
  ro.mode = RolloutMode::eval;
  ro.history = opt.history;
  ro.decode = true;
  ro.max_decode_len = opt.max_decode_len;

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < data.size(); i = next++) {
      try {
        Tape<T> tape(false);
        Rng rng(0);  // unused: eval applies no dropout
        auto roll = forward_dialogue(tape, model, data[i], ro, rng);
        auto& out = ev.dialogues[i];
        out.records = std::move(roll.records);
        for (const auto& g : roll.generated) out.hypotheses.push_back(vocab.decode(g));
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = data.size();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opt.jobs, data.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<std::pair<std::size_t, std::size_t>> pred, gold;
  std::vector<Tokens> hyps, refs;
  double nll = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& out = ev.dialogues[i];
    for (std::size_t t = 0; t < out.records.size(); ++t) {
      pred.emplace_back(t + 1, out.records[t].chosen);
      gold.emplace_back(t + 1, out.records[t].gold);
      nll += out.records[t].nll;
      tokens += out.records[t].n_tokens;
      hyps.push_back(out.hypotheses[t]);
      refs.push_back(data[i].turns[t].reference);
    }
  }
  auto acc = selection_accuracy(pred, gold);
  auto& r = ev.report;
  r.acc = acc.overall;
  r.acc_by_turn = acc.by_turn;
  r.turns_by_position = acc.counts;
  r.bleu2 = corpus_bleu(hyps, refs, 2);
  r.bleu4 = corpus_bleu(hyps, refs, 4);
  r.rouge2 = corpus_rouge2(hyps, refs);
  r.nll_per_token = tokens ? nll / static_cast<double>(tokens) : 0.0;
  r.n_dialogues = data.size();
  r.n_turns = pred.size();
  r.history = opt.history;
  r.config = opt.config;
  return ev;
}

}  // namespace diffks
