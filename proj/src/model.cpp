#include "instrgen/model.hpp"

namespace instrgen {

QformerConfig qformer_config(const ModelDims& d, int vocab_size) {
  QformerConfig c;
  c.d_model = d.d_model;
  c.queries = d.queries;
  c.layers = d.layers;
  c.heads = d.heads;
  c.ffn_multiplier = d.ffn_multiplier;
  c.vocab_size = vocab_size;
  c.max_text_len = d.max_text_len;
  return c;
}

LmConfig lm_config(const ModelDims& d, int vocab_size) {
  LmConfig c;
  c.d_dec = d.d_dec;
  c.layers = d.lm_layers;
  c.heads = d.lm_heads;
  c.ffn_multiplier = d.ffn_multiplier;
  c.vocab_size = vocab_size;
  c.max_len = d.max_len;
  c.bos_id = Vocab::kBos;
  c.eos_id = Vocab::kEos;
  c.banned_ids = {Vocab::kPad, Vocab::kBos, Vocab::kUnk};
  return c;
}

InstructionModel::InstructionModel(const ModelDims& dims, const ProviderManifest& manifest, Vocab vocab,
                                   std::uint64_t seed)
    : dims_(dims),
      manifest_(manifest),
      vocab_(std::move(vocab)),
      seed_(seed),
      init_rng_(mix_seed(seed, "model_init")),
      features_(registry_, "features", manifest_, dims.d_model, init_rng_),
      qformer_(registry_, "qformer", qformer_config(dims, vocab_.size()), init_rng_),
      decoder_(registry_, "decoder", dims.d_model, lm_config(dims, vocab_.size()), init_rng_) {
  for (const char* block : {"grid", "region"}) {
    const std::string base = std::string("heads.") + block;
    heads_.push_back(PretrainHeads{
        nn::Linear(registry_, base + ".itg", dims.d_model, vocab_.size(), init_rng_),
        nn::Linear(registry_, base + ".itm", dims.d_model, 1, init_rng_)});
  }
}

FeatureBundle InstructionModel::bundle(const RawImageFeatures& target,
                                       const RawImageFeatures& receptacle) const {
  validate_features(target, manifest_);
  validate_features(receptacle, manifest_);
  return features_.assemble(target, receptacle);
}

QueryStates InstructionModel::encode(const RawImageFeatures& target, const RawImageFeatures& receptacle,
                                     std::optional<std::span<const int>> text_ids) const {
  return qformer_.forward(bundle(target, receptacle), text_ids);
}

ag::Var InstructionModel::prefix(const RawImageFeatures& target,
                                 const RawImageFeatures& receptacle) const {
  return decoder_.project_prefix(encode(target, receptacle).h_q);
}

std::vector<Candidate> InstructionModel::generate(const RawImageFeatures& target,
                                                  const RawImageFeatures& receptacle,
                                                  const BeamOptions& options) const {
  ag::NoGradGuard no_grad;
  return decoder_.beam_search(prefix(target, receptacle), options);
}

std::string InstructionModel::render(const Candidate& c) const { return vocab_.decode(c.tokens); }

std::vector<int> InstructionModel::text_branch_ids(const std::string& text) const {
  std::vector<int> ids{Vocab::kBos};
  for (int id : vocab_.encode(text)) ids.push_back(id);
  ids.push_back(Vocab::kEos);
  return ids;
}

std::vector<int> InstructionModel::decoder_target_ids(const std::string& text) const {
  std::vector<int> ids = vocab_.encode(text);
  ids.push_back(Vocab::kEos);
  return ids;
}

}  // namespace instrgen
