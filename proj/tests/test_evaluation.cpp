#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "diffks/data/synthetic.hpp"
#include "diffks/eval/evaluate.hpp"
#include "diffks/eval/metrics.hpp"
#include "diffks/train/trainer.hpp"
#include "metric_oracle.hpp"

using namespace diffks;
using oracle::bleu_oracle;
using oracle::rouge_oracle;

namespace {

Tokens words(const std::string& s) {
  Tokens out;
  std::istringstream in(s);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

Tokens random_sentence(std::mt19937& gen) {
  std::uniform_int_distribution<int> len(1, 20), word(0, 9);
  Tokens s(static_cast<std::size_t>(len(gen)));
  for (auto& w : s) w = "w" + std::to_string(word(gen));
  return s;
}

}  // namespace

TEST(Bleu, IdenticalCorpusIsOne) {
  const std::vector<Tokens> c{words("a b c d e"), words("x y z w")};
  EXPECT_NEAR(corpus_bleu(c, c, 2), 1.0, 1e-12);
  EXPECT_NEAR(corpus_bleu(c, c, 4), 1.0, 1e-12);
}

TEST(Bleu, NoOverlapIsFloored) {
  const double b = corpus_bleu({words("a b c")}, {words("x y z")}, 2);
  EXPECT_GT(b, 0.0);
  EXPECT_NEAR(b, 1e-9, 1e-15);
}

TEST(Bleu, ShortCandidateExample) {
  const double b = corpus_bleu({words("the cat sat")}, {words("the cat sat down")}, 2);
  EXPECT_NEAR(b, std::exp(-1.0 / 3.0), 1e-12);
  EXPECT_NEAR(b, 0.7165, 1e-4);
}

TEST(Bleu, Errors) {
  EXPECT_THROW(corpus_bleu({}, {}, 2), DataError);
  EXPECT_THROW(corpus_bleu({words("a")}, {}, 2), DimensionError);
}

TEST(Rouge, Examples) {
  EXPECT_DOUBLE_EQ(rouge2(words("a b c d"), words("a b c d")), 1.0);
  EXPECT_DOUBLE_EQ(rouge2(words("a b c"), words("x y z")), 0.0);
  EXPECT_NEAR(rouge2(words("a b c d"), words("a b x d")), 1.0 / 3.0, 1e-12);
  EXPECT_EQ(rouge2(words("a"), words("a")), 0.0);
  EXPECT_EQ(rouge2(words("a b"), words("b")), 0.0);
}

TEST(Rouge, CorpusIsMeanOverPairs) {
  EXPECT_NEAR(corpus_rouge2({words("a b c d"), words("a b")}, {words("a b x d"), words("a b")}), (1.0 / 3.0 + 1.0) / 2,
              1e-12);
  EXPECT_THROW(corpus_rouge2({}, {}), DataError);
  EXPECT_THROW(corpus_rouge2({words("a b")}, {}), DimensionError);
}

TEST(Metrics, AgreeWithBruteForceOnRandomPairs) {
  std::mt19937 gen(2024);
  std::vector<Tokens> cands, refs;
  for (int i = 0; i < 50; ++i) {
    cands.push_back(random_sentence(gen));
    refs.push_back(random_sentence(gen));
    for (std::size_t n : {2u, 4u}) {
      const double got = corpus_bleu({cands.back()}, {refs.back()}, n);
      EXPECT_NEAR(got, bleu_oracle({cands.back()}, {refs.back()}, n), 1e-9) << "pair " << i << " n " << n;
      EXPECT_GE(got, 0.0);
      EXPECT_LE(got, 1.0);
    }
    const double r = rouge2(cands.back(), refs.back());
    EXPECT_NEAR(r, rouge_oracle(cands.back(), refs.back()), 1e-9) << "pair " << i;
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
    if (cands.back().size() >= 2) {
      EXPECT_DOUBLE_EQ(rouge2(cands.back(), cands.back()), 1.0);
    }
  }
  for (std::size_t n : {2u, 4u}) EXPECT_NEAR(corpus_bleu(cands, refs, n), bleu_oracle(cands, refs, n), 1e-9);
}

TEST(Accuracy, Examples) {
  std::vector<std::pair<std::size_t, std::size_t>> pred, gold;
  for (std::size_t i = 0; i < 200; ++i) {
    pred.emplace_back(1, i < 51 ? 0 : 1);
    gold.emplace_back(1, 0);
  }
  EXPECT_DOUBLE_EQ(selection_accuracy(pred, gold).overall, 0.255);

  auto all = selection_accuracy(gold, gold);
  EXPECT_EQ(all.overall, 1.0);
  EXPECT_EQ(all.by_turn, std::vector<double>{1.0});
}

TEST(Accuracy, PerTurnBuckets) {
  std::vector<std::pair<std::size_t, std::size_t>> pred, gold;
  for (int i = 0; i < 5; ++i) {
    pred.emplace_back(1, 2);
    gold.emplace_back(1, 2);
    pred.emplace_back(2, 0);
    gold.emplace_back(2, 1);
  }
  const auto t = selection_accuracy(pred, gold);
  EXPECT_EQ(t.by_turn, (std::vector<double>{1.0, 0.0}));
  EXPECT_EQ(t.overall, 0.5);
  EXPECT_EQ(t.counts, (std::vector<std::size_t>{5, 5}));
}

TEST(Accuracy, PerTurnAggregatesToOverall) {
  std::mt19937 gen(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::pair<std::size_t, std::size_t>> pred, gold;
    const int n = 1 + int(gen() % 60);
    for (int i = 0; i < n; ++i) {
      const std::size_t pos = 1 + gen() % 5;
      pred.emplace_back(pos, gen() % 3);
      gold.emplace_back(pos, gen() % 3);
    }
    const auto t = selection_accuracy(pred, gold);
    double weighted = 0;
    std::size_t total = 0;
    for (std::size_t p = 0; p < t.by_turn.size(); ++p) {
      weighted += t.by_turn[p] * double(t.counts[p]);
      total += t.counts[p];
    }
    ASSERT_EQ(total, t.total);
    EXPECT_NEAR(weighted / double(total), t.overall, 1e-12);
  }
}

TEST(Accuracy, MisalignedInputsThrow) {
  EXPECT_THROW(selection_accuracy({{1, 0}}, {}), DimensionError);
  EXPECT_THROW(selection_accuracy({{1, 0}}, {{2, 0}}), DimensionError);
}

TEST(Report, TableShapeAndOrdinals) {
  EvalReport r;
  r.acc = 0.255;
  r.acc_by_turn = {0.5, 0.25, 0.2, 0.1, 0.05};
  r.turns_by_position = {10, 10, 10, 10, 10};
  r.history = HistorySource::gold;
  const auto table = r.to_table(true);
  for (const char* col : {"1st", "2nd", "3rd", "4th", "5th", "ACC", "BLEU-2", "BLEU-4", "ROUGE-2", "history=gold", "25.50"})
    EXPECT_NE(table.find(col), std::string::npos) << col;
  EXPECT_EQ(r.to_table(false).find("1st"), std::string::npos);
  EXPECT_EQ(EvalReport::ordinal(11), "11th");
  EXPECT_EQ(EvalReport::ordinal(22), "22nd");

  const auto j = r.to_json();
  for (const char* k : {"acc", "acc_by_turn", "bleu2", "bleu4", "rouge2", "n_dialogues", "n_turns"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["history"], "gold");
}

namespace {

struct Fitted {
  Vocabulary vocab;
  std::vector<EncodedDialogue> data;
  std::unique_ptr<Trainer<float>> trainer;
};

// Five-token sentences so that BLEU-4 has 4-grams to count.
Corpus fitted_corpus() {
  SyntheticShape shape;
  shape.sentence_length = 5;
  return make_synthetic_transition_corpus(4, 6, 3, 9, shape);
}

Fitted fitted(std::size_t epochs) {
  Fitted f;
  auto corpus = fitted_corpus();
  f.vocab = Vocabulary::build(corpus, 1000);
  f.data = encode_corpus(corpus, f.vocab, LengthCaps{});
  TrainConfig c;
  c.model.emb_dim = 8;
  c.model.enc_hidden = 8;
  c.model.dec_hidden = 16;
  c.model.dropout = 0.0;
  c.lr = 0.01;
  c.max_decode_len = 10;
  f.trainer = std::make_unique<Trainer<float>>(c, f.vocab, f.data, std::vector<EncodedDialogue>{});
  for (std::size_t e = 1; e <= epochs; ++e) f.trainer->train_epoch(e);
  return f;
}

}  // namespace

TEST(Evaluate, DeterministicAndIndependentOfThreadCount) {
  auto f = fitted(3);
  EvalOptions opt;
  opt.max_decode_len = 10;
  const auto a = evaluate(f.trainer->model(), f.vocab, f.data, opt).report.to_json();
  const auto b = evaluate(f.trainer->model(), f.vocab, f.data, opt).report.to_json();
  opt.jobs = 3;
  const auto c = evaluate(f.trainer->model(), f.vocab, f.data, opt).report.to_json();
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_EQ(a.dump(), c.dump());
}

TEST(Evaluate, ReportCountsAndRanges) {
  auto f = fitted(2);
  for (auto h : {HistorySource::gold, HistorySource::predicted}) {
    EvalOptions opt;
    opt.history = h;
    opt.max_decode_len = 10;
    const auto ev = evaluate(f.trainer->model(), f.vocab, f.data, opt);
    const auto& r = ev.report;
    EXPECT_EQ(r.n_dialogues, 6u);
    EXPECT_EQ(r.n_turns, 18u);
    EXPECT_EQ(r.turns_by_position, (std::vector<std::size_t>{6, 6, 6}));
    EXPECT_EQ(r.history, h);
    for (double m : {r.acc, r.bleu2, r.bleu4, r.rouge2}) {
      EXPECT_GE(m, 0.0);
      EXPECT_LE(m, 1.0);
    }
    for (const auto& d : ev.dialogues)
      for (const auto& hyp : d.hypotheses) EXPECT_LE(hyp.size(), 10u);
  }
}

TEST(Evaluate, OverfitCorpusScoresPerfectly) {
  auto f = fitted(300);
  EvalOptions opt;
  opt.max_decode_len = 10;
  const auto r = evaluate(f.trainer->model(), f.vocab, f.data, opt).report;
  EXPECT_EQ(r.acc, 1.0);
  EXPECT_GT(r.bleu4, 0.99);
}

TEST(Evaluate, EmptyCorpusAndVocabularyMismatch) {
  auto f = fitted(0);
  EXPECT_THROW(evaluate(f.trainer->model(), f.vocab, {}, EvalOptions{}), DataError);
  auto foreign = make_synthetic_context_corpus(4, 3, 3, 1);
  for (auto& d : foreign)
    for (auto& t : d.turns) {
      for (auto& w : t.post) w = "zz" + w;
      for (auto& w : t.response) w = "zz" + w;
      for (auto& k : t.knowledge)
        for (auto& w : k) w = "zz" + w;
    }
  EXPECT_THROW(check_vocabulary_match(foreign, f.vocab), DataError);
  EXPECT_NO_THROW(check_vocabulary_match(fitted_corpus(), f.vocab));
}
