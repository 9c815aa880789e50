#pragma once

// MCFormer: a query transformer whose cross-attention layer holds N
// unshared attention blocks, one per feature element, with outputs summed.
// TripletQformer runs one MCFormer over the grid features (N = 3) and one
// over the region features (N = 2) and stacks their query outputs.

#include "instrgen/autograd.hpp"
#include "instrgen/feature_provider.hpp"
#include "instrgen/nn.hpp"

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace instrgen {

struct QformerConfig {
  Eigen::Index d_model = 64;
  int queries = 8;
  int layers = 2;
  int heads = 4;
  int ffn_multiplier = 4;
  int vocab_size = 0;     // text branch token table
  int max_text_len = 32;  // text branch positions
};

// Pre-norm self-attention with residual. One instance is referenced by both
// the image branch and the text branch of a layer.
struct SharedSelfAttention {
  nn::LayerNorm norm;
  nn::MultiHeadAttention attn;

  SharedSelfAttention(nn::ParameterRegistry& reg, const std::string& name,
                      const QformerConfig& cfg, Rng& rng);
  ag::Var operator()(const ag::Var& x, bool causal) const;
};

struct MCFormerLayerOutput {
  ag::Var h_out;
  std::optional<ag::Var> text_out;
  ag::Var h_l;               // after self-attention
  std::vector<ag::Var> a;    // one per cross-attention block
};

class MCFormerLayer {
 public:
  MCFormerLayer(nn::ParameterRegistry& reg, const std::string& name, const QformerConfig& cfg,
                int arity, Rng& rng);

  // h_l = h_in + SA(LN(h_in)); a_n = MHA_n(h_l, features[n]);
  // z = LN(sum_n a_n + h_l); h_out = z + FFN(z).
  // Text: t_l = t_in + SA_causal(LN(t_in)); t_out = t_l + FFN_t(LN_t(t_l)).
  MCFormerLayerOutput forward(const ag::Var& h_in, std::span<const ag::Var> features,
                              const std::optional<ag::Var>& text_in) const;

  int arity() const { return static_cast<int>(cross_.size()); }
  const std::shared_ptr<SharedSelfAttention>& image_self_attention() const { return image_sa_; }
  const std::shared_ptr<SharedSelfAttention>& text_self_attention() const { return text_sa_; }
  std::vector<nn::MultiHeadAttention>& cross_blocks() { return cross_; }
  const std::vector<nn::MultiHeadAttention>& cross_blocks() const { return cross_; }
  const nn::LayerNorm& cross_norm() const { return cross_norm_; }
  const nn::FeedForward& image_ffn() const { return image_ffn_; }
  const nn::LayerNorm& text_norm() const { return text_norm_; }
  const nn::FeedForward& text_ffn() const { return text_ffn_; }

 private:
  std::shared_ptr<SharedSelfAttention> image_sa_;
  std::shared_ptr<SharedSelfAttention> text_sa_;  // same object as image_sa_
  std::vector<nn::MultiHeadAttention> cross_;
  nn::LayerNorm cross_norm_;
  nn::FeedForward image_ffn_;
  nn::LayerNorm text_norm_;
  nn::FeedForward text_ffn_;
};

struct MCFormerOutput {
  ag::Var queries_out;               // Q x d_model
  std::optional<ag::Var> text_out;   // T x d_model, present iff text was given
};

class MCFormer {
 public:
  MCFormer(nn::ParameterRegistry& reg, const std::string& name, const QformerConfig& cfg,
           int arity, Rng& rng);

  // Throws FeatureArityMismatch unless features.size() == arity().
  MCFormerOutput forward(std::span<const ag::Var> features,
                         const std::optional<ag::Var>& text_in = std::nullopt) const;
  // Token + position embedding for the text branch.
  ag::Var embed_text(std::span<const int> ids) const;

  int arity() const { return arity_; }
  const ParamPtr& queries() const { return queries_; }
  std::vector<MCFormerLayer>& layers() { return layers_; }
  const std::vector<MCFormerLayer>& layers() const { return layers_; }
  const QformerConfig& config() const { return cfg_; }

  // Reorders the cross-attention blocks of every layer: new block i is old
  // block perm[i].
  void permute_cross_blocks(std::span<const int> perm);

 private:
  QformerConfig cfg_;
  int arity_;
  ParamPtr queries_;
  ParamPtr token_embedding_;
  ParamPtr position_embedding_;
  std::vector<MCFormerLayer> layers_;
};

struct QueryStates {
  ag::Var h_q_grid;     // Q x d_model
  ag::Var h_q_region;   // Q x d_model
  ag::Var h_q;          // 2Q x d_model, [grid ; region]
  std::optional<ag::Var> h_w_grid;
  std::optional<ag::Var> h_w_region;
};

class TripletQformer {
 public:
  TripletQformer(nn::ParameterRegistry& reg, const std::string& name, const QformerConfig& cfg,
                 Rng& rng);

  QueryStates forward(const FeatureBundle& bundle,
                      std::optional<std::span<const int>> text_ids = std::nullopt) const;

  MCFormer& grid() { return grid_; }
  const MCFormer& grid() const { return grid_; }
  MCFormer& region() { return region_; }
  const MCFormer& region() const { return region_; }

 private:
  MCFormer grid_;
  MCFormer region_;
};

}  // namespace instrgen
