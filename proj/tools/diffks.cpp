// Command-line front end: train, eval, gradcheck, synth, chat.

#include <CLI11.hpp>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diffks/cli/commands.hpp"

namespace cli = diffks::cli;

int main(int argc, char** argv) {
  CLI::App app{"Difference-aware knowledge selection for knowledge-grounded dialogue"};
  app.require_subcommand(1);

  cli::TrainOptions train;
  std::uint64_t train_seed = 0;
  auto* t = app.add_subcommand("train", "train a model; writes checkpoints and a log under RUN_DIR");
  t->add_option("config", train.config, "key = value config file")->required();
  t->add_option("data_dir", train.data_dir, "directory holding the train/dev corpora")->required();
  t->add_option("run_dir", train.run_dir, "output directory")->required();
  auto* seed_opt = t->add_option("--seed", train_seed, "overrides the config seed");
  t->add_option("--set", train.sets, "override a config key (key=value); repeatable");
  t->add_option("--resume", train.resume, "continue from this checkpoint");
  t->add_flag("--quiet", train.quiet, "no progress output");

  cli::EvalCliOptions eval;
  std::string history;
  std::size_t jobs = 0;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
  e->add_option("checkpoint", eval.checkpoint)->required();
  e->add_option("corpus", eval.corpus)->required();
  e->add_option("--history", history, "selection history source")->check(CLI::IsMember({"gold", "predicted"}));
  e->add_flag("--per-turn", eval.per_turn, "add accuracy by turn position");
  e->add_option("--out", eval.out, "report path prefix (.json and .txt are appended)");
  auto* jobs_opt = e->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  cli::GradcheckOptions grad;
  std::string scale = "all";
  auto* g = app.add_subcommand("gradcheck", "finite-difference gradient checks on a toy model (f64)");
  g->add_option("--scale", scale, "op, module, end2end or all")
      ->check(CLI::IsMember({"op", "module", "end2end", "all"}));
  g->add_flag("--negative-control", grad.negative_control, "also run a deliberately wrong backward rule");

  cli::SynthOptions synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic corpus");
  s->add_option("kind", synth.kind, "transition or context")->required();
  s->add_option("K", synth.K, "knowledge pool size")->required();
  s->add_option("N", synth.N, "dialogues")->required();
  s->add_option("T", synth.T, "turns per dialogue")->required();
  s->add_option("seed", synth.seed)->required();
  s->add_option("out", synth.out, "output JSON-lines file")->required();
  s->add_option("--dev-n", synth.dev_n, "extra held-out dialogues from the same generator");
  s->add_option("--dev-out", synth.dev_out, "file for the held-out dialogues");

  cli::ChatOptions chat;
  auto* c = app.add_subcommand("chat", "interactive session reading one utterance per line");
  c->add_option("checkpoint", chat.checkpoint)->required();
  c->add_option("knowledge_file", chat.knowledge, "sentences, one per line; '---' separates per-turn pools")
      ->required();
  c->add_flag("--show-selection", chat.show_selection, "print the selected sentence and the top-3 weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? cli::kOk : cli::kConfigError;
  }

  return cli::guarded([&] {
    if (*t) {
      if (*seed_opt) train.seed = train_seed;
      return cli::cmd_train(train);
    }
    if (*e) {
      if (!history.empty())
        eval.history = history == "gold" ? diffks::HistorySource::gold : diffks::HistorySource::predicted;
      if (*jobs_opt) eval.jobs = jobs;
      return cli::cmd_eval(eval);
    }
    if (*g) {
      static const std::map<std::string, diffks::CheckScale> scales{
          {"op", diffks::CheckScale::op}, {"module", diffks::CheckScale::module}, {"end2end", diffks::CheckScale::end2end}};
      if (scale != "all") grad.scales = {scales.at(scale)};
      return cli::cmd_gradcheck(grad);
    }
    if (*s) return cli::cmd_synth(synth);
    return cli::cmd_chat(chat);
  });
}
