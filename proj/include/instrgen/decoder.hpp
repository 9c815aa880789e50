#pragma once

// Prefix-conditioned autoregressive decoder: a fully connected projection of
// the query states into the embedding space of a small causal transformer
// language model, with teacher-forced scoring and beam search.

#include "instrgen/autograd.hpp"
#include "instrgen/nn.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace instrgen {

class Vocab;

struct LmConfig {
  Eigen::Index d_dec = 64;
  int layers = 2;
  int heads = 4;
  int ffn_multiplier = 4;
  int vocab_size = 0;
  int max_len = 24;  // longest sequence including EOS
  int bos_id = 1;
  int eos_id = 2;
  std::vector<int> banned_ids{0, 1, 3};  // never generated (pad, bos, unk)
};

class LanguageModel {
 public:
  LanguageModel(nn::ParameterRegistry& reg, const std::string& name, const LmConfig& cfg, Rng& rng);

  // Logits for every input position of [prefix ; embed(input_ids)], one row
  // per input id. Row t predicts input_ids[t + 1].
  ag::Var logits(const std::optional<ag::Var>& prefix, std::span<const int> input_ids,
                 bool last_only = false) const;

  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }
  const LmConfig& config() const { return cfg_; }
  std::vector<ParamPtr> parameters() const { return params_; }

 private:
  struct Block {
    nn::LayerNorm norm1;
    nn::MultiHeadAttention attn;
    nn::LayerNorm norm2;
    nn::FeedForward ffn;
  };

  LmConfig cfg_;
  ParamPtr token_embedding_;
  ParamPtr position_embedding_;
  std::vector<Block> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear head_;
  std::vector<ParamPtr> params_;
  bool frozen_ = false;
};

struct Candidate {
  std::vector<int> tokens;  // generated ids, EOS included when complete
  std::vector<double> token_logprobs;
  double total_logprob = 0.0;
  bool complete = false;
};

struct BeamOptions {
  int beam_size = 5;
  int max_len = 24;
  bool length_normalize = false;
};

class PrefixDecoder {
 public:
  PrefixDecoder(nn::ParameterRegistry& reg, const std::string& name, Eigen::Index d_model,
                const LmConfig& cfg, Rng& rng);

  ag::Var project_prefix(const ag::Var& h_q) const;
  // Logits (1 x |V|) for the token after `tokens`, conditioned on the prefix.
  // Throws LengthExceeded once tokens.size() >= max_len.
  ag::Var next_token_logits(const std::optional<ag::Var>& prefix, std::span<const int> tokens) const;
  // Sum over positions of log p(y_t | prefix, y_<t); tokens include EOS when
  // the sequence is complete.
  ag::Var sequence_logprob(const std::optional<ag::Var>& prefix, std::span<const int> tokens) const;
  // Teacher-forced token cross-entropy summed over positions.
  ag::Var token_cross_entropy(const std::optional<ag::Var>& prefix, std::span<const int> tokens) const;

  // Sorted by descending score; lexicographic tie-break on token ids.
  std::vector<Candidate> beam_search(const std::optional<ag::Var>& prefix, const BeamOptions& options) const;
  Candidate greedy(const std::optional<ag::Var>& prefix, int max_len) const;

  LanguageModel& lm() { return lm_; }
  const LanguageModel& lm() const { return lm_; }
  const nn::Linear& projection() const { return projection_; }

 private:
  nn::Linear projection_;
  LanguageModel lm_;
};

struct PretrainOptions {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
  // Rows of random prefix shown during pretraining, so that the frozen model
  // has seen prefix slots before the query prefix is attached. 0 disables.
  int noise_prefix_rows = 0;
  double noise_prefix_scale = 1.0;
};

struct PretrainReport {
  std::vector<double> epoch_perplexity;
};

// Next-token cross-entropy on a corpus of EOS-terminated id sequences, then
// freezes the language model. Throws EmptyCorpus.
PretrainReport pretrain_lm(LanguageModel& lm, const std::vector<std::vector<int>>& corpus,
                           const PretrainOptions& options);

}  // namespace instrgen
