#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "diffks/core/errors.hpp"
#include "diffks/data/corpus.hpp"
#include "diffks/data/dataset.hpp"
#include "diffks/data/synthetic.hpp"
#include "diffks/data/tokenizer.hpp"
#include "diffks/data/vocab.hpp"
#include "diffks/eval/evaluate.hpp"
#include "diffks/model/config.hpp"
#include "diffks/model/model.hpp"
#include "diffks/train/checkpoint.hpp"
#include "diffks/train/gradcheck_suite.hpp"
#include "diffks/train/trainer.hpp"

namespace diffks::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

/// Runs `body`, turning the library's exceptions into exit codes and a one-line message.
template <class F>
int guarded(F&& body, std::ostream& err = std::cerr) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumericalError;
  } catch (const DimensionError& e) {
    err << "shape mismatch: " << e.what() << "\n";
    return kDataError;
  } catch (const InvalidMaskError& e) {
    err << "invalid mask: " << e.what() << "\n";
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

/// Config file, then --set assignments, then --seed (later wins).
inline TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& sets,
                                  std::optional<std::uint64_t> seed) {
  auto kv = KeyValues::load(path);
  for (const auto& s : sets) kv.set_assignment(s);
  if (seed) kv.set("seed", std::to_string(*seed));
  return TrainConfig::from(kv);
}

inline Corpus load_split(const std::filesystem::path& dir, const std::string& file, const TrainConfig& cfg,
                         const std::string& split) {
  auto corpus = load_corpus((dir / file).string(), parse_corpus_format(cfg.data_format));
  if (!cfg.dataset.empty()) check_split_size(corpus, cfg.dataset, split);
  return corpus;
}

struct TrainOptions {
  std::string config;
  std::string data_dir;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string resume;
  bool quiet = false;
};

template <class T>
int train_with(const TrainConfig& cfg, const TrainOptions& opt, std::ostream& out) {
  const std::filesystem::path dir(opt.data_dir);
  const auto train = load_split(dir, cfg.train_file, cfg, "train");
  Corpus dev;
  if (!cfg.dev_file.empty()) dev = load_split(dir, cfg.dev_file, cfg, "dev");
  auto vocab = Vocabulary::build(train, cfg.vocab_cap);
  std::filesystem::create_directories(opt.run_dir);
  vocab.save((std::filesystem::path(opt.run_dir) / "vocab.txt").string());
  Trainer<T> trainer(cfg, vocab, encode_corpus(train, vocab, cfg.caps), encode_corpus(dev, vocab, cfg.caps));
  if (!opt.resume.empty()) trainer.resume(opt.resume);
  if (!opt.quiet)
    out << "training " << train.size() << " dialogues (" << count_turns(train) << " turns), dev " << dev.size()
        << ", vocab " << vocab.size() << ", parameters " << trainer.model().params().count() << ", precision "
        << to_string(cfg.precision) << "\n";
  trainer.run(opt.run_dir, {}, opt.quiet ? nullptr : &out);
  if (!opt.quiet)
    out << "best epoch " << trainer.best_epoch() << " (" << cfg.select_by << " " << trainer.best_metric() << ")\n";
  return kOk;
}

inline int cmd_train(const TrainOptions& opt, std::ostream& out = std::cout) {
  const auto cfg = resolve_config(opt.config, opt.sets, opt.seed);
  return cfg.precision == Precision::f64 ? train_with<double>(cfg, opt, out) : train_with<float>(cfg, opt, out);
}

/// A checkpoint opened for inference: config and vocabulary come from its header.
template <class T>
struct LoadedModel {
  TrainConfig config;
  Vocabulary vocab;
  DiffKSModel<T> model;

  LoadedModel(const CheckpointMeta& meta, const std::string& path)
      : config(TrainConfig::from(KeyValues::parse_string(meta.config))),
        vocab(Vocabulary::from_tokens(meta.vocab)),
        model(with_vocab(config.model, vocab)) {
    load_checkpoint(path, model.params());
  }

  static ModelConfig with_vocab(ModelConfig m, const Vocabulary& v) {
    m.vocab_size = v.size();
    return m;
  }
};

/// Runs `f.template operator()<T>()` with T matching the checkpoint's stored precision.
template <class F>
int with_checkpoint_precision(const CheckpointMeta& meta, F&& f) {
  if (meta.scalar_bytes == sizeof(float)) return f.template operator()<float>();
  if (meta.scalar_bytes == sizeof(double)) return f.template operator()<double>();
  throw DataError("checkpoint has unsupported scalar size " + std::to_string(meta.scalar_bytes));
}

struct EvalCliOptions {
  std::string checkpoint;
  std::string corpus;
  std::optional<HistorySource> history;
  bool per_turn = false;
  std::string out;  ///< report path prefix; default derives from the checkpoint
  std::optional<std::size_t> jobs;
};

inline int cmd_eval(const EvalCliOptions& opt, std::ostream& out = std::cout) {
  const auto meta = read_checkpoint_meta(opt.checkpoint);
  return with_checkpoint_precision(meta, [&]<class T>() {
    LoadedModel<T> lm(meta, opt.checkpoint);
    const auto corpus = load_corpus(opt.corpus, parse_corpus_format(lm.config.data_format));
    check_vocabulary_match(corpus, lm.vocab);
    EvalOptions eo;
    eo.history = opt.history.value_or(lm.config.eval_history);
    eo.max_decode_len = lm.config.max_decode_len;
    eo.jobs = opt.jobs.value_or(lm.config.jobs);
    eo.config = meta.config;
    const auto ev = evaluate(lm.model, lm.vocab, encode_corpus(corpus, lm.vocab, lm.config.caps), eo);

    std::string prefix = opt.out;
    if (prefix.empty()) {
      std::filesystem::path p(opt.checkpoint);
      prefix = (p.parent_path() / (p.stem().string() + ".eval-" + to_string(eo.history))).string();
    }
    auto j = ev.report.to_json();
    j["checkpoint"] = opt.checkpoint;
    j["corpus"] = opt.corpus;
    std::ofstream(prefix + ".json") << j.dump(2) << "\n";
    const auto table = ev.report.to_table(opt.per_turn);
    std::ofstream(prefix + ".txt") << table;
    out << table << "report: " << prefix << ".json\n";
    return kOk;
  });
}

struct GradcheckOptions {
  std::vector<CheckScale> scales{CheckScale::op, CheckScale::module, CheckScale::end2end};
  bool negative_control = false;
};

inline int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out = std::cout) {
  bool ok = true;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-8s %-58s %12s %8s %s\n", "scale", "check", "max rel err", "coords", "result");
  out << buf;
  auto print = [&](const GradCheckRow& r, const char* verdict) {
    std::snprintf(buf, sizeof buf, "%-8s %-58s %12.3e %8zu %s\n", to_string(r.scale).c_str(), r.name.c_str(),
                  r.result.max_rel_error, r.result.coordinates, verdict);
    out << buf;
  };
  for (auto scale : opt.scales)
    for (const auto& r : run_gradcheck(scale)) {
      print(r, r.passed() ? "PASS" : "FAIL");
      ok = ok && r.passed();
    }
  if (opt.negative_control) {
    const auto r = gradcheck::corrupted_check();
    print(r, r.passed() ? "PASS (unexpected: control should fail)" : "FAIL (expected)");
    ok = ok && !r.passed();
  }
  out << (ok ? "all gradient checks passed\n" : "gradient check FAILED\n");
  return ok ? kOk : kNumericalError;
}

struct SynthOptions {
  std::string kind;
  std::size_t K = 5, N = 200, T = 4;
  std::uint64_t seed = 1;
  std::string out;
  std::size_t dev_n = 0;  ///< extra dialogues from the same generator, written to dev_out
  std::string dev_out;
};

inline int cmd_synth(const SynthOptions& opt, std::ostream& out = std::cout) {
  if (opt.kind != "transition" && opt.kind != "context")
    throw ConfigError("synth kind must be transition or context, got '" + opt.kind + "'");
  if (opt.dev_n > 0 && opt.dev_out.empty()) throw ConfigError("--dev-n needs --dev-out");
  const std::size_t total = opt.N + opt.dev_n;
  auto corpus = opt.kind == "transition" ? make_synthetic_transition_corpus(opt.K, total, opt.T, opt.seed)
                                         : make_synthetic_context_corpus(opt.K, total, opt.T, opt.seed);
  Corpus dev(corpus.begin() + static_cast<std::ptrdiff_t>(opt.N), corpus.end());
  corpus.resize(opt.N);
  save_corpus(opt.out, corpus);
  out << "wrote " << corpus.size() << " dialogues (" << count_turns(corpus) << " turns) to " << opt.out << "\n";
  if (!dev.empty()) {
    save_corpus(opt.dev_out, dev);
    out << "wrote " << dev.size() << " dialogues (" << count_turns(dev) << " turns) to " << opt.dev_out << "\n";
  }
  return kOk;
}

/// Knowledge file: one sentence per line; a line "---" starts the pool of the next turn.
/// Turns past the last pool reuse it.
inline std::vector<std::vector<Tokens>> read_knowledge_pools(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open knowledge file: " + path);
  std::vector<std::vector<Tokens>> pools(1);
  std::string line;
  while (std::getline(in, line)) {
    if (KeyValues::trim(line) == "---") {
      pools.emplace_back();
      continue;
    }
    auto toks = tokenize(line);
    if (!toks.empty()) pools.back().push_back(std::move(toks));
  }
  pools.erase(std::remove_if(pools.begin(), pools.end(), [](const auto& p) { return p.empty(); }), pools.end());
  if (pools.empty()) throw DataError(path + ": no knowledge sentences");
  return pools;
}

struct ChatOptions {
  std::string checkpoint;
  std::string knowledge;
  bool show_selection = false;
};

/// Sequential inference: each user line is a post, the reply plays the role of the
/// response in the next context window, and the selection history persists.
inline int cmd_chat(const ChatOptions& opt, std::istream& in = std::cin, std::ostream& out = std::cout) {
  const auto meta = read_checkpoint_meta(opt.checkpoint);
  const auto pools = read_knowledge_pools(opt.knowledge);
  return with_checkpoint_precision(meta, [&]<class T>() {
    LoadedModel<T> lm(meta, opt.checkpoint);
    const auto& cfg = lm.config;
    Tape<T> tape(false);
    Rng rng(0);
    SelectionState<T> state;
    Dialogue session;
    session.id = "chat";
    std::string line;
    char buf[256];
    while (std::getline(in, line)) {
      auto post = tokenize(line);
      if (post.empty()) continue;
      const std::size_t t = session.turns.size() + 1;
      Turn turn;
      turn.post = post;
      turn.response = {"<pending>"};
      turn.knowledge = pools[std::min(t, pools.size()) - 1];
      session.turns.push_back(turn);

      EncodedTurn et;
      et.context = lm.vocab.encode(assemble_context(session, t, cfg.caps.context));
      auto cs = prepare_candidates(turn, cfg.caps);
      for (const auto& s : cs.sentences) et.candidates.push_back(lm.vocab.encode(s));
      et.mask = cs.mask;

      auto enc = lm.model.encode_turn(tape, et, false, rng);
      auto sel = select(enc.selector_inputs(et.mask), state, cfg.model, lm.model.selector());
      auto mem = lm.model.memory(enc, et, sel.chosen);
      auto s0 = init_state(enc.h_c, mem.h_k, lm.model.decoder());
      const auto reply = lm.vocab.decode(greedy_decode(s0, mem, lm.model.embedding(), lm.model.decoder(), cfg.max_decode_len));
      state.advance(slice_cols(enc.Hk, sel.chosen, 1), cfg.model.history_turns);
      session.turns.back().response = reply.empty() ? Tokens{"<eos>"} : reply;

      if (opt.show_selection) {
        const auto alpha = sel.alpha.values();
        out << "  [turn " << t << "] selected " << sel.chosen << ": "
            << (sel.chosen == 0 ? std::string("(no knowledge)") : join_tokens(cs.sentences[sel.chosen])) << "\n";
        std::vector<std::size_t> order(alpha.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return alpha[a] > alpha[b]; });
        for (std::size_t r = 0; r < std::min<std::size_t>(3, order.size()); ++r) {
          const auto i = order[r];
          std::snprintf(buf, sizeof buf, "    alpha[%zu] = %.4f  ", i, static_cast<double>(alpha[i]));
          out << buf << (i == 0 ? std::string("(no knowledge)") : join_tokens(cs.sentences[i])) << "\n";
        }
        if (sel.beta_diff.valid()) {
          double mx = 0.0;
          for (auto b : sel.beta_diff.values()) mx = std::max(mx, std::abs(static_cast<double>(b)));
          std::snprintf(buf, sizeof buf, "    differential score: max |beta_diff| = %.4g%s\n", mx,
                        t == 1 ? " (first turn: zero path)" : "");
          out << buf;
        } else {
          double mx = 0.0;
          for (auto o : sel.o.values()) mx = std::max(mx, std::abs(static_cast<double>(o)));
          std::snprintf(buf, sizeof buf, "    difference vector: max |o| = %.4g%s\n", mx,
                        t == 1 ? " (first turn: zero path)" : "");
          out << buf;
        }
      }
      out << (reply.empty() ? std::string("(empty reply)") : join_tokens(reply)) << "\n" << std::flush;
    }
    return kOk;
  });
}

}  // namespace diffks::cli
