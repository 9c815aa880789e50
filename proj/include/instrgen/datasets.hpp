#pragma once

// Synthetic fetch-and-carry scenes, dataset files, and the word vocabulary.

#include "instrgen/feature_provider.hpp"
#include "instrgen/metrics.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace instrgen {

struct TargetAttributes {
  std::string color;
  std::string category;
  std::string support;
  std::string room;
  bool operator==(const TargetAttributes&) const = default;
};

struct ReceptacleAttributes {
  std::string category;
  std::string material;
  std::string room;
  std::string relation;
  bool operator==(const ReceptacleAttributes&) const = default;
};

struct Scene {
  std::string scene_id;
  TargetAttributes target;
  ReceptacleAttributes receptacle;
  std::vector<DetectedObject> target_detections;      // includes the target object
  std::vector<DetectedObject> receptacle_detections;  // small objects near the receptacle
  std::uint64_t seed = 0;

  std::string target_image_id() const { return scene_id + "_tar"; }
  std::string receptacle_image_id() const { return scene_id + "_rec"; }
  bool operator==(const Scene& o) const;
};

struct SamplePair {
  std::string sample_id;
  std::string target_image_id;
  std::string receptacle_image_id;
  std::vector<std::string> references;
  bool operator==(const SamplePair&) const = default;
};

// Closed attribute vocabularies and reference templates.
struct GeneratorConfig {
  std::vector<std::string> colors{"red", "blue", "green", "yellow", "white", "black", "gray", "brown"};
  std::vector<std::string> categories{"cup", "bottle", "book", "cushion", "vase", "bowl", "towel", "plant"};
  std::vector<std::string> supports{"table", "sofa", "shelf", "desk", "counter", "bed"};
  std::vector<std::string> receptacles{"cabinet", "drawer", "chair", "dresser", "sink", "cupboard", "stool"};
  std::vector<std::string> materials{"wooden", "metal", "glass", "marble", "plastic"};
  std::vector<std::string> rooms{"kitchen", "bedroom", "bathroom", "office", "hallway", "lounge"};
  std::vector<std::string> relations{"on", "in", "beside", "near"};
  int min_references = 1;
  int max_references = 3;
  int max_distractors = 2;
  double noise_scale = 0.1;
  ProviderManifest manifest;  // dimensions of the emitted features
};

// Reference templates; template 0 is always the first reference of a scene.
std::vector<std::string> reference_templates();
std::string render_reference(const std::string& templ, const Scene& scene);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct SyntheticDataset {
  std::vector<Scene> scenes;
  std::vector<SamplePair> train;
  std::vector<SamplePair> val;
  std::vector<SamplePair> test;
  ProviderManifest manifest;
  std::uint64_t seed = 0;
  double noise_scale = 0.1;

  std::vector<SamplePair> all_pairs() const;
};

// Deterministic per seed. Throws BadRatios for negative ratios or ratios
// that do not sum to 1.
SyntheticDataset generate_synthetic_dataset(int n, std::uint64_t seed, SplitRatios ratios,
                                            const GeneratorConfig& config = {});

std::vector<ImageDescription> describe_images(const Scene& scene);
SyntheticBackend make_synthetic_backend(const SyntheticDataset& dataset);

metrics::ImageAttributes target_attributes(const Scene& scene);
metrics::ImageAttributes receptacle_attributes(const Scene& scene);

// Image id -> attribute words, built from scene records.
class AttributeIndex {
 public:
  AttributeIndex() = default;
  explicit AttributeIndex(const std::vector<Scene>& scenes);
  // Throws MissingAttributes for unknown ids.
  const metrics::ImageAttributes& at(const std::string& image_id) const;
  bool contains(const std::string& image_id) const { return index_.count(image_id) != 0; }

 private:
  std::map<std::string, metrics::ImageAttributes> index_;
};

// Dataset directory layout: {train,val,test}.jsonl, scenes/<id>.json,
// features/manifest.json + features/<image_id>.json.
void write_dataset_dir(const SyntheticDataset& dataset, const std::filesystem::path& dir);
std::vector<Scene> load_scenes(const std::filesystem::path& scenes_dir);
std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);

void save_dataset(const std::vector<SamplePair>& pairs, const std::filesystem::path& path);
// ParseError carries the 1-based line number; with a backend, every image id
// must resolve there or DanglingImageId is thrown.
std::vector<SamplePair> load_dataset(const std::filesystem::path& path,
                                     const FeatureBackend* backend = nullptr);

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSpecials = 4;

  Vocab();  // specials only
  // Words ordered by descending frequency, then lexicographically.
  static Vocab build(const std::vector<SamplePair>& pairs);
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const;
  std::vector<int> encode(const std::string& text) const;  // no BOS/EOS
  std::string decode(const std::vector<int>& ids) const;   // stops at EOS, skips PAD and BOS
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_special(int id) const { return id >= 0 && id < kSpecials; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

}  // namespace instrgen
