#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/core/rng.hpp"
#include "diffks/data/dataset.hpp"
#include "diffks/data/vocab.hpp"
#include "diffks/eval/evaluate.hpp"
#include "diffks/model/config.hpp"
#include "diffks/model/model.hpp"
#include "diffks/train/checkpoint.hpp"
#include "diffks/train/optim.hpp"
#include "diffks/train/rollout.hpp"

namespace diffks {

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;  ///< mean over dialogues of the summed turn losses
  double nll = 0.0;   ///< same averaging, L_NLL only
  double ks = 0.0;    ///< same averaging, L_KS only
  double nll_per_token = 0.0;
  double train_acc = 0.0;  ///< argmax selection vs gold under gold history
  double max_grad_norm = 0.0;
  std::size_t dialogues = 0;
  std::size_t turns = 0;
};

/// Called after each epoch; returning false stops the run early.
using EpochCallback = std::function<bool(const EpochStats&, const std::optional<EvalReport>&)>;

template <class T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, Vocabulary vocab, std::vector<EncodedDialogue> train, std::vector<EncodedDialogue> dev)
      : cfg_(with_vocab(std::move(cfg), vocab)),
        vocab_(std::move(vocab)),
        train_(std::move(train)),
        dev_(std::move(dev)),
        model_(cfg_.model) {
    cfg_.validate();
    if (train_.empty()) throw DataError("training corpus is empty");
    model_.initialize(cfg_.seed);
    if (!cfg_.embedding_file.empty()) model_.load_pretrained_embeddings(cfg_.embedding_file, vocab_);
  }

  DiffKSModel<T>& model() { return model_; }
  const DiffKSModel<T>& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::size_t epochs_done() const { return epochs_done_; }
  double best_metric() const { return best_metric_; }
  std::size_t best_epoch() const { return best_epoch_; }

  /// One pass over the shuffled training set; Adam step per batch. `epoch` is 1-based
  /// and keys both the shuffle and the dropout streams.
  EpochStats train_epoch(std::size_t epoch) {
    EpochStats st;
    st.epoch = epoch;
    std::size_t tokens = 0, hits = 0;
    auto& groups = model_.params().groups();
    AdamConfig adam{cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps};
    RolloutOptions ro;
    ro.mode = RolloutMode::train;
    ro.lambda_ks = cfg_.lambda_ks;
    for (const auto& batch : make_batches(turn_counts(train_), cfg_.batch_size, cfg_.seed, epoch)) {
      const T scale = T(1) / static_cast<T>(batch.dialogues.size());
      for (auto d : batch.dialogues) {
        Tape<T> tape;
        auto rng = make_rng(cfg_.seed, Stream::dropout, epoch, d);
        auto roll = forward_dialogue(tape, model_, train_[d], ro, rng);
        tape.backward(affine(roll.loss, scale));
        const auto tot = compute_total_loss(roll.records, cfg_.lambda_ks);
        st.loss += tot.total;
        st.nll += tot.nll;
        st.ks += tot.ks;
        for (const auto& r : roll.records) {
          tokens += r.n_tokens;
          hits += r.chosen == r.gold;
        }
        st.turns += roll.records.size();
        ++st.dialogues;
      }
      st.max_grad_norm = std::max(st.max_grad_norm, clip_grad_norm(groups, cfg_.clip_norm));
      adam_step(groups, adam);
    }
    st.nll_per_token = st.nll / static_cast<double>(tokens);
    st.loss /= static_cast<double>(st.dialogues);
    st.nll /= static_cast<double>(st.dialogues);
    st.ks /= static_cast<double>(st.dialogues);
    st.train_acc = static_cast<double>(hits) / static_cast<double>(st.turns);
    epochs_done_ = epoch;
    return st;
  }

  Evaluation evaluate_on(const std::vector<EncodedDialogue>& data, std::optional<HistorySource> history = {}) const {
    EvalOptions opt;
    opt.history = history.value_or(cfg_.eval_history);
    opt.max_decode_len = cfg_.max_decode_len;
    opt.jobs = cfg_.jobs;
    opt.config = cfg_.to_key_values().dump();
    return evaluate(model_, vocab_, data, opt);
  }

  CheckpointMeta meta() const {
    CheckpointMeta m;
    m.config = cfg_.to_key_values().dump();
    m.vocab = vocab_.regular_tokens();
    m.epoch = epochs_done_;
    m.best_metric = best_metric_;
    m.best_epoch = best_epoch_;
    return m;
  }

  void save(const std::string& path) const { save_checkpoint(path, model_.params(), meta()); }

  /// Restores parameters, Adam state and epoch counters. The checkpoint must have been
  /// written by a run with the same vocabulary and model shape.
  void resume(const std::string& path) {
    const auto head = read_checkpoint_meta(path);
    if (head.vocab != vocab_.regular_tokens()) throw DataError(path + ": vocabulary differs from the training data");
    const auto m = load_checkpoint(path, model_.params());
    epochs_done_ = m.epoch;
    best_metric_ = m.best_metric;
    best_epoch_ = m.best_epoch;
  }

  /// Trains epochs epochs_done()+1 .. config().epochs. Writes run_dir/epoch-<n>.ckpt,
  /// run_dir/best.ckpt (best dev metric so far) and appends JSON lines to run_dir/log;
  /// a fresh run starts the log with the config echo.
  void run(const std::string& run_dir, const EpochCallback& on_epoch = {}, std::ostream* progress = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(run_dir);
    const auto log_path = (fs::path(run_dir) / "log").string();
    const bool fresh = epochs_done_ == 0;
    std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot write log: " + log_path);
    if (fresh) {
      nlohmann::json head;
      head["config"] = config_json();
      head["parameters"] = model_.params().count();
      head["vocab_size"] = vocab_.size();
      head["train_dialogues"] = train_.size();
      head["dev_dialogues"] = dev_.size();
      log << head.dump() << "\n" << std::flush;
    }
    for (std::size_t epoch = epochs_done_ + 1; epoch <= cfg_.epochs; ++epoch) {
      auto st = train_epoch(epoch);
      std::optional<EvalReport> report;
      if (!dev_.empty()) report = evaluate_on(dev_).report;
      const double metric = report ? (cfg_.select_by == "acc" ? report->acc : report->bleu4) : -st.loss;
      const bool improved = best_epoch_ == 0 || metric > best_metric_;
      if (improved) {
        best_metric_ = metric;
        best_epoch_ = epoch;
      }
      save((fs::path(run_dir) / ("epoch-" + std::to_string(epoch) + ".ckpt")).string());
      if (improved) save((fs::path(run_dir) / "best.ckpt").string());

      nlohmann::json line;
      line["epoch"] = epoch;
      line["loss"] = st.loss;
      line["nll"] = st.nll;
      line["ks"] = st.ks;
      line["nll_per_token"] = st.nll_per_token;
      line["train_acc"] = st.train_acc;
      line["max_grad_norm"] = st.max_grad_norm;
      if (report) {
        line["dev"] = {{"acc", report->acc},       {"acc_by_turn", report->acc_by_turn}, {"bleu2", report->bleu2},
                       {"bleu4", report->bleu4},   {"rouge2", report->rouge2},           {"nll_per_token", report->nll_per_token}};
      }
      line["best_epoch"] = best_epoch_;
      log << line.dump() << "\n" << std::flush;
      if (progress) *progress << line.dump() << "\n" << std::flush;
      if (on_epoch && !on_epoch(st, report)) break;
    }
  }

  nlohmann::json config_json() const {
    nlohmann::json j = nlohmann::json::object();
    const auto kv = cfg_.to_key_values();
    for (const auto& [k, v] : kv.values()) j[k] = v;
    return j;
  }

 private:
  static TrainConfig with_vocab(TrainConfig cfg, const Vocabulary& vocab) {
    cfg.model.vocab_size = vocab.size();
    return cfg;
  }

  TrainConfig cfg_;
  Vocabulary vocab_;
  std::vector<EncodedDialogue> train_;
  std::vector<EncodedDialogue> dev_;
  DiffKSModel<T> model_;
  std::size_t epochs_done_ = 0;
  double best_metric_ = 0.0;
  std::size_t best_epoch_ = 0;
};

}  // namespace diffks
