#pragma once

// The full instruction generator: feature projections, Triplet Qformer,
// pre-training heads and the prefix decoder, all in one parameter registry.

#include "instrgen/datasets.hpp"
#include "instrgen/decoder.hpp"
#include "instrgen/feature_provider.hpp"
#include "instrgen/nn.hpp"
#include "instrgen/triplet_qformer.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace instrgen {

struct ModelDims {
  Eigen::Index d_model = 64;
  int queries = 8;
  int layers = 2;
  int heads = 4;
  int ffn_multiplier = 4;
  int max_text_len = 32;
  Eigen::Index d_dec = 64;
  int lm_layers = 2;
  int lm_heads = 4;
  int max_len = 24;
  bool operator==(const ModelDims&) const = default;
};

// Heads used only by the query-transformer pre-training losses, one set per
// MCFormer: a text LM head over h_w and a matching head over query rows.
struct PretrainHeads {
  nn::Linear itg;
  nn::Linear itm;
};

class InstructionModel {
 public:
  InstructionModel(const ModelDims& dims, const ProviderManifest& manifest, Vocab vocab,
                   std::uint64_t seed);
  InstructionModel(const InstructionModel&) = delete;
  InstructionModel& operator=(const InstructionModel&) = delete;

  FeatureBundle bundle(const RawImageFeatures& target, const RawImageFeatures& receptacle) const;
  QueryStates encode(const RawImageFeatures& target, const RawImageFeatures& receptacle,
                     std::optional<std::span<const int>> text_ids = std::nullopt) const;
  ag::Var prefix(const RawImageFeatures& target, const RawImageFeatures& receptacle) const;

  std::vector<Candidate> generate(const RawImageFeatures& target, const RawImageFeatures& receptacle,
                                  const BeamOptions& options) const;
  std::string render(const Candidate& c) const;

  // [BOS] + ids(text) + [EOS], the text-branch input.
  std::vector<int> text_branch_ids(const std::string& text) const;
  // ids(text) + [EOS], the decoder target.
  std::vector<int> decoder_target_ids(const std::string& text) const;

  nn::ParameterRegistry& registry() { return registry_; }
  const nn::ParameterRegistry& registry() const { return registry_; }
  const FeatureProjector& features() const { return features_; }
  TripletQformer& qformer() { return qformer_; }
  const TripletQformer& qformer() const { return qformer_; }
  PrefixDecoder& decoder() { return decoder_; }
  const PrefixDecoder& decoder() const { return decoder_; }
  const PretrainHeads& heads(int block) const { return heads_[static_cast<std::size_t>(block)]; }
  const Vocab& vocab() const { return vocab_; }
  const ModelDims& dims() const { return dims_; }
  const ProviderManifest& manifest() const { return manifest_; }
  std::uint64_t seed() const { return seed_; }

  static constexpr int kGridBlock = 0;
  static constexpr int kRegionBlock = 1;

 private:
  ModelDims dims_;
  ProviderManifest manifest_;
  Vocab vocab_;
  std::uint64_t seed_;
  nn::ParameterRegistry registry_;
  Rng init_rng_;
  FeatureProjector features_;
  TripletQformer qformer_;
  std::vector<PretrainHeads> heads_;
  PrefixDecoder decoder_;
};

QformerConfig qformer_config(const ModelDims& dims, int vocab_size);
LmConfig lm_config(const ModelDims& dims, int vocab_size);

}  // namespace instrgen
