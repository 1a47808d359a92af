#pragma once

#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "diffks/core/ops.hpp"
#include "diffks/core/rng.hpp"
#include "diffks/core/tensor.hpp"
#include "diffks/data/dataset.hpp"
#include "diffks/data/vocab.hpp"
#include "diffks/model/config.hpp"
#include "diffks/model/decoder.hpp"
#include "diffks/model/gru.hpp"
#include "diffks/model/selector.hpp"

namespace diffks {

/// Per-turn encoder outputs.
template <class T>
struct TurnEncoding {
  Tensor<T> h_c;                        ///< 2H x 1
  Tensor<T> Hk;                         ///< 2H x n, column i = h_{k,i}; column 0 is k0
  Tensor<T> R;                          ///< 2H x n, correlated representations r_i
  std::vector<Tensor<T>> token_states;  ///< per candidate, 2H x L_i

  SelectorInputs<T> selector_inputs(const Mask& mask) const { return {h_c, Hk, R, mask}; }
};

/// Difference-aware knowledge selection model: shared embeddings, three BiGRU encoders
/// (context, knowledge sentence, knowledge correlation), a fused or disentangled selector
/// and a copy-augmented GRU decoder.
template <class T>
class DiffKSModel {
 public:
  explicit DiffKSModel(const ModelConfig& cfg) : cfg_(cfg) {
    if (cfg_.vocab_size <= static_cast<std::size_t>(kNumSpecials))
      throw ConfigError("model needs a vocabulary beyond the special tokens");
    (void)cfg_.lambdas();
    const std::size_t E = cfg_.emb_dim, H = cfg_.enc_hidden;
    embedding_ = &store_.add("embedding", "embedding", cfg_.vocab_size, E, Init::standard_normal);
    context_ = BiGruParams<T>::create(store_, "encoder.context", "encoder.context", E, H);
    knowledge_ = BiGruParams<T>::create(store_, "encoder.knowledge", "encoder.knowledge", E, H);
    correlation_ = BiGruParams<T>::create(store_, "encoder.correlation", "encoder.correlation", 2 * H, H);
    selector_ = SelectorParams<T>::create(store_, cfg_);
    decoder_ = DecoderParams<T>::create(store_, cfg_);
  }

  DiffKSModel(const DiffKSModel&) = delete;
  DiffKSModel& operator=(const DiffKSModel&) = delete;

  void initialize(std::uint64_t seed) {
    auto rng = make_rng(seed, Stream::init);
    store_.initialize(rng);
  }

  /// Overwrites embedding rows for vocabulary words found in a "word v1 .. vE" text file.
  /// Returns the number of rows loaded.
  std::size_t load_pretrained_embeddings(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embedding file: " + path);
    std::string line;
    std::size_t loaded = 0, line_no = 0;
    std::vector<double> row;
    while (std::getline(in, line)) {
      ++line_no;
      std::istringstream ss(line);
      std::string word;
      if (!(ss >> word)) continue;
      row.clear();
      double x;
      while (ss >> x) row.push_back(x);
      // word2vec text files start with a "count dim" header line.
      if (line_no == 1 && row.size() == 1) continue;
      if (row.size() != cfg_.emb_dim)
        throw DataError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(cfg_.emb_dim) +
                        " values, found " + std::to_string(row.size()));
      if (!vocab.contains(word)) continue;
      const auto id = static_cast<std::size_t>(vocab.id(word));
      for (std::size_t e = 0; e < cfg_.emb_dim; ++e)
        embedding_->value[id * cfg_.emb_dim + e] = static_cast<T>(row[e]);
      ++loaded;
    }
    return loaded;
  }

  /// Encodes context and candidates. Dropout touches word embeddings only and only
  /// when `training` is set.
  TurnEncoding<T> encode_turn(Tape<T>& tape, const EncodedTurn& turn, bool training, Rng& rng) const {
    if (turn.candidates.empty()) throw DimensionError("encode_turn: empty candidate set");
    TurnEncoding<T> enc;
    auto ctx = embed(tape, turn.context, training, rng);
    enc.h_c = bigru_encode(tape, ctx, pad_mask(turn.context), context_).summary;

    // All sentences share one embedding gather and one input projection per direction.
    std::vector<int> all;
    std::vector<std::size_t> offsets;
    for (const auto& s : turn.candidates) {
      if (s.empty()) throw DimensionError("encode_turn: empty knowledge sentence");
      offsets.push_back(all.size());
      all.insert(all.end(), s.begin(), s.end());
    }
    auto emb = embed(tape, all, training, rng);
    auto gx_f = input_projection(emb, knowledge_.fwd);
    auto gx_b = input_projection(emb, knowledge_.bwd);
    std::vector<Tensor<T>> summaries;
    for (std::size_t i = 0; i < turn.candidates.size(); ++i) {
      const auto& ids = turn.candidates[i];
      const std::size_t L = ids.size();
      auto out = bigru_scan(slice_cols(gx_f, offsets[i], L), slice_cols(gx_b, offsets[i], L), pad_mask(ids), knowledge_);
      enc.token_states.push_back(out.states);
      summaries.push_back(out.summary);
    }
    enc.Hk = concat(summaries, 1);
    enc.R = bigru_encode(tape, enc.Hk, turn.mask, correlation_).states;
    return enc;
  }

  KnowledgeMemory<T> memory(const TurnEncoding<T>& enc, const EncodedTurn& turn, std::size_t index) const {
    return {slice_cols(enc.Hk, index, 1), enc.token_states[index], CopySupport::from_sentence(turn.candidates[index])};
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  Param<T>& embedding() const { return *embedding_; }
  const BiGruParams<T>& context_encoder() const { return context_; }
  const BiGruParams<T>& knowledge_encoder() const { return knowledge_; }
  const BiGruParams<T>& correlation_encoder() const { return correlation_; }
  const SelectorParams<T>& selector() const { return selector_; }
  const DecoderParams<T>& decoder() const { return decoder_; }

 private:
  Tensor<T> embed(Tape<T>& tape, std::span<const int> ids, bool training, Rng& rng) const {
    return dropout(embedding_lookup(tape, *embedding_, ids), cfg_.dropout, training, rng);
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  Param<T>* embedding_ = nullptr;
  BiGruParams<T> context_;
  BiGruParams<T> knowledge_;
  BiGruParams<T> correlation_;
  SelectorParams<T> selector_;
  DecoderParams<T> decoder_;
};

}  // namespace diffks
