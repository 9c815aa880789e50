#pragma once

// Run configuration and the stage/generation/augmentation flows behind the
// command-line tool.

#include "instrgen/checkpoint.hpp"
#include "instrgen/datasets.hpp"
#include "instrgen/training.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

namespace instrgen {

struct RunPaths {
  std::filesystem::path dataset;        // directory with train/val/test.jsonl
  std::filesystem::path feature_cache;  // default: <dataset>/features
  std::filesystem::path scenes;         // default: <dataset>/scenes
  std::filesystem::path checkpoints;
  std::filesystem::path reports;
  std::vector<std::filesystem::path> extra_train;  // additional training files
};

struct LmPretrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 3e-3;
  int noise_prefix_rows = 0;
  double noise_prefix_scale = 1.0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  RunPaths paths;
  ModelDims model;
  LmPretrainConfig pretrain_lm;
  StageConfig tqpp = default_stage_config(Stage::kTqpp);
  StageConfig pdmp = default_stage_config(Stage::kPdmp);
  StageConfig hccp = default_stage_config(Stage::kHccp);
  std::string scorer = "stub";

  const StageConfig& stage(Stage s) const;
};

// Relative paths resolve against `base_dir`. Stage seeds default to the run
// seed. Throws ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::ordered_json run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);
// 16 hex digits of FNV-1a over the canonical JSON form.
std::string config_hash(const RunConfig& cfg);

// Training pairs with features and scene attributes resolved.
std::vector<TrainingExample> resolve_examples(const std::vector<SamplePair>& pairs,
                                              const FeatureBackend& backend,
                                              const AttributeIndex& attributes);

// Train split plus every extra training file.
std::vector<SamplePair> training_pairs(const RunConfig& cfg, const FeatureBackend& backend);

// Reads every checkpoint in the directory and returns the one recording
// `stage`, preferring a matching config hash. Throws MissingPrerequisite.
Checkpoint find_checkpoint(const std::filesystem::path& dir, const std::string& stage,
                           const std::string& preferred_hash);

struct StageOutcome {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::vector<double> losses;
  std::vector<std::string> warnings;
};

// stage is one of pretrain-lm, tqpp, pdmp, hccp.
StageOutcome run_stage(const RunConfig& cfg, const std::string& stage);

// One JSON line per sample: sample_id, candidates (text, total_logprob), stage,
// config_hash.
std::vector<std::string> generation_report(const InstructionModel& model, const Checkpoint& ckpt,
                                           const std::vector<SamplePair>& pairs,
                                           const FeatureBackend& backend, int beam_size);

// The top beam candidate of each pair becomes its only reference.
std::vector<SamplePair> emit_augmented_dataset(const InstructionModel& model,
                                               const std::vector<SamplePair>& pairs,
                                               const FeatureBackend& backend, int beam_size = 5);

// sample_id -> generated text, from a generation report or from records that
// carry a plain "text" field.
std::map<std::string, std::string> load_generations(const std::filesystem::path& path);

std::vector<metrics::EvalInput> eval_inputs(const std::vector<SamplePair>& pairs,
                                            const AttributeIndex& attributes);

}  // namespace instrgen
