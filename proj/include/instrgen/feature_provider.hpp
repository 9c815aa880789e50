#pragma once

// Raw per-image features from pluggable backends, and the learned
// projections that turn a (target, receptacle) image pair into the paired
// region and grid token sets consumed by the query transformer.

#include "instrgen/autograd.hpp"
#include "instrgen/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace instrgen {

struct ProviderManifest {
  Eigen::Index d_dv = 32;  // detected-object visual vector
  Eigen::Index d_dt = 16;  // detected-object label text vector
  Eigen::Index d_sg = 32;  // SGM description embedding
  Eigen::Index d_g1 = 48;  // single-modal grid vector
  Eigen::Index d_g2 = 32;  // multimodal grid vector
  Eigen::Index d_g3 = 40;  // MLLM grid vector
  std::string backend_name = "synthetic";
  std::vector<std::string> vocabulary;  // noun phrases known to the detector

  void validate() const;
  bool operator==(const ProviderManifest&) const = default;
};

struct RawImageFeatures {
  std::string image_id;
  Matrix det_visual;  // K x d_dv
  Matrix det_label;   // K x d_dt
  std::vector<std::string> det_label_names;
  RowVector sgm_text;
  RowVector grid_single;
  RowVector grid_multi;
  RowVector grid_mllm;

  Eigen::Index detections() const { return det_visual.rows(); }
  bool operator==(const RawImageFeatures&) const = default;
};

// Throws ManifestMismatch on dimension disagreement, InvalidFeatures on
// non-finite values or inconsistent detection counts.
void validate_features(const RawImageFeatures& raw, const ProviderManifest& manifest);

class FeatureBackend {
 public:
  virtual ~FeatureBackend() = default;
  virtual const ProviderManifest& manifest() const = 0;
  virtual bool contains(const std::string& image_id) const = 0;
  // Deterministic; throws UnknownImage for absent ids.
  virtual RawImageFeatures get_raw_features(const std::string& image_id) const = 0;
  virtual std::vector<std::string> image_ids() const = 0;
};

// What the synthetic backend knows about one image.
struct DetectedObject {
  std::string color;
  std::string category;
};

struct ImageDescription {
  std::string image_id;
  std::vector<DetectedObject> objects;          // detector output, K = size
  std::vector<std::string> scene_words;         // attributes visible to grid encoders
  std::vector<std::string> description_words;   // SGM description content
};

// Unit-variance pseudo-random vector keyed by (field, token, seed).
RowVector synthetic_embedding(std::string_view field, std::string_view token,
                              Eigen::Index dim, std::uint64_t seed);
// Per-image noise keyed by (field, image_id, row, seed).
RowVector synthetic_noise(std::string_view field, std::string_view image_id, Eigen::Index row,
                          Eigen::Index dim, std::uint64_t seed);

class SyntheticBackend final : public FeatureBackend {
 public:
  SyntheticBackend(ProviderManifest manifest, std::vector<ImageDescription> images,
                   std::uint64_t seed, double noise_scale = 0.1);

  const ProviderManifest& manifest() const override { return manifest_; }
  bool contains(const std::string& image_id) const override;
  RawImageFeatures get_raw_features(const std::string& image_id) const override;
  std::vector<std::string> image_ids() const override;

  std::uint64_t seed() const { return seed_; }
  double noise_scale() const { return noise_scale_; }

 private:
  ProviderManifest manifest_;
  std::map<std::string, ImageDescription> images_;
  std::uint64_t seed_;
  double noise_scale_;
};

// Pre-extracted features: a directory with manifest.json and one
// <image_id>.json record per image. Everything is read at construction.
class FileCacheBackend final : public FeatureBackend {
 public:
  explicit FileCacheBackend(const std::filesystem::path& dir);

  const ProviderManifest& manifest() const override { return manifest_; }
  bool contains(const std::string& image_id) const override;
  RawImageFeatures get_raw_features(const std::string& image_id) const override;
  std::vector<std::string> image_ids() const override;

 private:
  ProviderManifest manifest_;
  std::map<std::string, RawImageFeatures> records_;
};

void write_feature_cache(const FeatureBackend& backend, const std::filesystem::path& dir);
std::string manifest_to_json(const ProviderManifest& manifest);
ProviderManifest manifest_from_json(const std::string& text);

// Region part has two elements (detections, SGM); grid part has three
// (single-modal, multimodal, MLLM). Target rows always precede receptacle rows.
struct FeatureBundle {
  std::vector<ag::Var> region;
  std::vector<ag::Var> grid;
};

class FeatureProjector {
 public:
  FeatureProjector() = default;
  FeatureProjector(nn::ParameterRegistry& reg, const std::string& name,
                   const ProviderManifest& manifest, Eigen::Index d_model, Rng& rng);

  // One row per detection: Linear([visual ; label]). K = 0 yields the
  // learned null token.
  ag::Var build_detection_tokens(const RawImageFeatures& raw) const;
  ag::Var build_sgm_token(const RawImageFeatures& raw) const;
  std::vector<ag::Var> assemble_region(const RawImageFeatures& target,
                                       const RawImageFeatures& receptacle) const;
  std::vector<ag::Var> assemble_grid(const RawImageFeatures& target,
                                     const RawImageFeatures& receptacle) const;
  FeatureBundle assemble(const RawImageFeatures& target, const RawImageFeatures& receptacle) const;

  const nn::Linear& detection() const { return det_; }
  const nn::Linear& sgm() const { return sgm_; }
  const nn::Linear& grid(int source) const { return grid_[static_cast<std::size_t>(source)]; }
  const ParamPtr& null_token() const { return null_; }
  Eigen::Index d_model() const { return d_model_; }

 private:
  nn::Linear det_;
  ParamPtr null_;
  nn::Linear sgm_;
  std::vector<nn::Linear> grid_;
  Eigen::Index d_model_ = 0;
};

}  // namespace instrgen
