#include "instrgen/triplet_qformer.hpp"

#include "instrgen/errors.hpp"

#include <algorithm>

namespace instrgen {

SharedSelfAttention::SharedSelfAttention(nn::ParameterRegistry& reg, const std::string& name,
                                         const QformerConfig& cfg, Rng& rng)
    : norm(reg, name + ".norm", cfg.d_model),
      attn(reg, name + ".attn", cfg.d_model, cfg.heads, rng) {}

ag::Var SharedSelfAttention::operator()(const ag::Var& x, bool causal) const {
  const ag::Var n = norm(x);
  return ag::add(x, attn(n, n, causal));
}

MCFormerLayer::MCFormerLayer(nn::ParameterRegistry& reg, const std::string& name,
                             const QformerConfig& cfg, int arity, Rng& rng)
    : image_sa_(std::make_shared<SharedSelfAttention>(reg, name + ".self_attn", cfg, rng)),
      text_sa_(image_sa_),
      cross_norm_(reg, name + ".cross_norm", cfg.d_model),
      image_ffn_(reg, name + ".image_ffn", cfg.d_model, cfg.d_model * cfg.ffn_multiplier, rng),
      text_norm_(reg, name + ".text_norm", cfg.d_model),
      text_ffn_(reg, name + ".text_ffn", cfg.d_model, cfg.d_model * cfg.ffn_multiplier, rng) {
  for (int n = 0; n < arity; ++n) {
    cross_.emplace_back(reg, name + ".cross" + std::to_string(n), cfg.d_model, cfg.heads, rng);
  }
}

MCFormerLayerOutput MCFormerLayer::forward(const ag::Var& h_in, std::span<const ag::Var> features,
                                           const std::optional<ag::Var>& text_in) const {
  if (features.size() != cross_.size()) {
    throw FeatureArityMismatch("layer expects " + std::to_string(cross_.size()) +
                               " feature elements, got " + std::to_string(features.size()));
  }
  MCFormerLayerOutput out;
  out.h_l = (*image_sa_)(h_in, /*causal=*/false);
  ag::Var sum = out.h_l;
  for (std::size_t n = 0; n < cross_.size(); ++n) {
    out.a.push_back(cross_[n](out.h_l, features[n]));
    sum = ag::add(sum, out.a.back());
  }
  const ag::Var z = cross_norm_(sum);
  out.h_out = ag::add(z, image_ffn_(z));

  if (text_in) {
    const ag::Var t_l = (*text_sa_)(*text_in, /*causal=*/true);
    out.text_out = ag::add(t_l, text_ffn_(text_norm_(t_l)));
  }
  return out;
}

MCFormer::MCFormer(nn::ParameterRegistry& reg, const std::string& name, const QformerConfig& cfg,
                   int arity, Rng& rng)
    : cfg_(cfg), arity_(arity) {
  if (cfg.vocab_size <= 0) throw ConfigError("query transformer needs a text vocabulary");
  queries_ = reg.normal(name + ".queries", cfg.queries, cfg.d_model, 0.5, rng);
  token_embedding_ = reg.normal(name + ".text.token_embedding", cfg.vocab_size, cfg.d_model, 0.5, rng);
  position_embedding_ = reg.normal(name + ".text.position_embedding", cfg.max_text_len, cfg.d_model, 0.1, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    layers_.emplace_back(reg, name + ".layer" + std::to_string(l), cfg, arity, rng);
  }
}

ag::Var MCFormer::embed_text(std::span<const int> ids) const {
  if (ids.empty()) throw ShapeMismatch("text branch needs at least one token");
  if (static_cast<int>(ids.size()) > cfg_.max_text_len) {
    throw LengthExceeded("text of " + std::to_string(ids.size()) + " tokens exceeds " +
                         std::to_string(cfg_.max_text_len));
  }
  std::vector<int> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  return ag::add(ag::gather_rows(ag::param(token_embedding_), ids),
                 ag::gather_rows(ag::param(position_embedding_), positions));
}

MCFormerOutput MCFormer::forward(std::span<const ag::Var> features,
                                 const std::optional<ag::Var>& text_in) const {
  if (static_cast<int>(features.size()) != arity_) {
    throw FeatureArityMismatch("MCFormer of arity " + std::to_string(arity_) + " given " +
                               std::to_string(features.size()) + " feature elements");
  }
  for (const auto& f : features) {
    if (f.cols() != cfg_.d_model) throw ShapeMismatch("feature width differs from d_model");
  }
  ag::Var h = ag::param(queries_);
  std::optional<ag::Var> t = text_in;
  for (const auto& layer : layers_) {
    auto out = layer.forward(h, features, t);
    h = out.h_out;
    t = out.text_out;
  }
  return {h, t};
}

void MCFormer::permute_cross_blocks(std::span<const int> perm) {
  if (static_cast<int>(perm.size()) != arity_) throw FeatureArityMismatch("permutation size");
  for (auto& layer : layers_) {
    auto& blocks = layer.cross_blocks();
    std::vector<nn::MultiHeadAttention> reordered;
    for (int i : perm) reordered.push_back(blocks.at(static_cast<std::size_t>(i)));
    blocks = std::move(reordered);
  }
}

TripletQformer::TripletQformer(nn::ParameterRegistry& reg, const std::string& name,
                               const QformerConfig& cfg, Rng& rng)
    : grid_(reg, name + ".grid", cfg, 3, rng), region_(reg, name + ".region", cfg, 2, rng) {}

QueryStates TripletQformer::forward(const FeatureBundle& bundle,
                                    std::optional<std::span<const int>> text_ids) const {
  std::optional<ag::Var> grid_text;
  std::optional<ag::Var> region_text;
  if (text_ids) {
    grid_text = grid_.embed_text(*text_ids);
    region_text = region_.embed_text(*text_ids);
  }
  const auto g = grid_.forward(bundle.grid, grid_text);
  const auto r = region_.forward(bundle.region, region_text);
  QueryStates s;
  s.h_q_grid = g.queries_out;
  s.h_q_region = r.queries_out;
  const std::vector<ag::Var> parts{g.queries_out, r.queries_out};
  s.h_q = ag::row_concat(parts);
  s.h_w_grid = g.text_out;
  s.h_w_region = r.text_out;
  return s;
}

}  // namespace instrgen
