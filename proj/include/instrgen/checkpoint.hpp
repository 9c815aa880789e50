#pragma once

// Binary checkpoints: magic, JSON metadata, named float64 arrays, checksum.
//
//   "IGCKPT01"
//   u64 metadata length, metadata JSON
//   u64 parameter count, then per parameter:
//     u32 name length, name, u64 rows, u64 cols, rows*cols f64 (column-major)
//   u64 FNV-1a of every preceding byte
//
// Integers and doubles are little-endian.

#include "instrgen/model.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace instrgen {

struct Checkpoint {
  std::string stage;  // pretrain-lm, tqpp, pdmp, hccp
  int epoch = 0;
  std::string config_hash;
  nlohmann::json metrics = nlohmann::json::object();
  // Completed stages, oldest first, ending with `stage`.
  std::vector<std::string> lineage;
  // Everything needed to rebuild the model before loading parameters.
  ModelDims dims;
  ProviderManifest manifest;
  std::vector<std::string> vocab;
  std::uint64_t model_seed = 0;
  bool lm_frozen = false;
  std::vector<std::pair<std::string, Matrix>> parameters;
};

Checkpoint capture_checkpoint(const InstructionModel& model, std::string stage, int epoch,
                              std::string config_hash, std::vector<std::string> lineage,
                              nlohmann::json metrics = nlohmann::json::object());

std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws CorruptCheckpoint on bad magic, truncation or checksum mismatch.
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// The warning text when the checkpoint was written under another config.
std::optional<std::string> config_hash_warning(const Checkpoint& ckpt, const std::string& expected_hash);

std::unique_ptr<InstructionModel> restore_model(const Checkpoint& ckpt);
// Copies every checkpoint parameter whose name starts with `prefix` into the
// model. Throws CorruptCheckpoint on a missing name or shape mismatch.
void load_parameters(InstructionModel& model, const Checkpoint& ckpt, const std::string& prefix = "");

nlohmann::json dims_to_json(const ModelDims& dims);
ModelDims dims_from_json(const nlohmann::json& j, ModelDims base = {});

}  // namespace instrgen
