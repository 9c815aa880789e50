#include "instrgen/pipeline.hpp"

#include "instrgen/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace instrgen {
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

LmPretrainConfig lm_config_from_json(const nlohmann::json& j, LmPretrainConfig c) {
  read_if(j, "epochs", c.epochs);
  read_if(j, "batch_size", c.batch_size);
  read_if(j, "learning_rate", c.learning_rate);
  read_if(j, "noise_prefix_rows", c.noise_prefix_rows);
  read_if(j, "noise_prefix_scale", c.noise_prefix_scale);
  if (c.epochs < 0 || c.batch_size < 1 || c.noise_prefix_rows < 0) throw ConfigError("bad pretrain_lm config");
  return c;
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::vector<std::vector<int>> lm_corpus(const InstructionModel& model, const std::vector<SamplePair>& pairs) {
  std::vector<std::vector<int>> corpus;
  for (const auto& p : pairs) {
    for (const auto& r : p.references) corpus.push_back(model.decoder_target_ids(r));
  }
  return corpus;
}

}  // namespace

const StageConfig& RunConfig::stage(Stage s) const {
  switch (s) {
    case Stage::kTqpp: return tqpp;
    case Stage::kPdmp: return pdmp;
    case Stage::kHccp: return hccp;
  }
  throw ConfigError("unknown stage");
}

RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  try {
    read_if(j, "seed", c.seed);
    read_if(j, "scorer", c.scorer);
    const auto& p = j.at("paths");
    c.paths.dataset = resolve(base_dir, p.at("dataset").get<std::string>());
    c.paths.feature_cache = p.contains("feature_cache")
                                ? resolve(base_dir, p.at("feature_cache").get<std::string>())
                                : c.paths.dataset / "features";
    c.paths.scenes = p.contains("scenes") ? resolve(base_dir, p.at("scenes").get<std::string>())
                                          : c.paths.dataset / "scenes";
    c.paths.checkpoints = resolve(base_dir, p.value("checkpoints", std::string("checkpoints")));
    c.paths.reports = resolve(base_dir, p.value("reports", std::string("reports")));
    if (p.contains("extra_train")) {
      for (const auto& e : p.at("extra_train")) c.paths.extra_train.push_back(resolve(base_dir, e.get<std::string>()));
    }
    if (j.contains("model")) c.model = dims_from_json(j.at("model"));
    if (j.contains("pretrain_lm")) c.pretrain_lm = lm_config_from_json(j.at("pretrain_lm"), c.pretrain_lm);
    for (Stage s : {Stage::kTqpp, Stage::kPdmp, Stage::kHccp}) {
      StageConfig base = default_stage_config(s);
      base.seed = c.seed;
      const std::string key = to_string(s);
      StageConfig sc = j.contains(key) ? stage_config_from_json(j.at(key), base) : base;
      if (sc.stage != s) throw ConfigError("section '" + key + "' declares stage " + to_string(sc.stage));
      (s == Stage::kTqpp ? c.tqpp : s == Stage::kPdmp ? c.pdmp : c.hccp) = sc;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["scorer"] = c.scorer;
  ojson paths;
  paths["dataset"] = c.paths.dataset.string();
  paths["feature_cache"] = c.paths.feature_cache.string();
  paths["scenes"] = c.paths.scenes.string();
  paths["checkpoints"] = c.paths.checkpoints.string();
  paths["reports"] = c.paths.reports.string();
  std::vector<std::string> extra;
  for (const auto& e : c.paths.extra_train) extra.push_back(e.string());
  paths["extra_train"] = extra;
  j["paths"] = paths;
  j["model"] = dims_to_json(c.model);
  j["pretrain_lm"] = {{"epochs", c.pretrain_lm.epochs},
                      {"batch_size", c.pretrain_lm.batch_size},
                      {"learning_rate", c.pretrain_lm.learning_rate},
                      {"noise_prefix_rows", c.pretrain_lm.noise_prefix_rows},
                      {"noise_prefix_scale", c.pretrain_lm.noise_prefix_scale}};
  for (Stage s : {Stage::kTqpp, Stage::kPdmp, Stage::kHccp}) j[to_string(s)] = stage_config_to_json(c.stage(s));
  return j;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j, fs::absolute(path).parent_path());
}

std::string config_hash(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(run_config_to_json(cfg).dump())));
  return buf;
}

std::vector<TrainingExample> resolve_examples(const std::vector<SamplePair>& pairs,
                                              const FeatureBackend& backend,
                                              const AttributeIndex& attributes) {
  std::vector<TrainingExample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    out.push_back(TrainingExample{p.sample_id, backend.get_raw_features(p.target_image_id),
                                  backend.get_raw_features(p.receptacle_image_id), p.references,
                                  attributes.at(p.target_image_id), attributes.at(p.receptacle_image_id)});
  }
  return out;
}

std::vector<SamplePair> training_pairs(const RunConfig& cfg, const FeatureBackend& backend) {
  std::vector<SamplePair> pairs = load_dataset(cfg.paths.dataset / "train.jsonl", &backend);
  for (const auto& extra : cfg.paths.extra_train) {
    const auto more = load_dataset(extra, &backend);
    pairs.insert(pairs.end(), more.begin(), more.end());
  }
  return pairs;
}

Checkpoint find_checkpoint(const fs::path& dir, const std::string& stage, const std::string& preferred_hash) {
  std::vector<fs::path> files;
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".ckpt") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::optional<Checkpoint> found;
  for (const auto& f : files) {
    Checkpoint c;
    try {
      c = load_checkpoint(f);
    } catch (const CorruptCheckpoint&) {
      continue;
    }
    if (c.stage != stage) continue;
    if (!found || c.config_hash == preferred_hash) found = std::move(c);
    if (found->config_hash == preferred_hash) break;
  }
  if (!found) {
    throw MissingPrerequisite("no '" + stage + "' checkpoint in " + dir.string());
  }
  return std::move(*found);
}

StageOutcome run_stage(const RunConfig& cfg, const std::string& stage) {
  if (!contains({"pretrain-lm", "tqpp", "pdmp", "hccp"}, stage)) throw ConfigError("unknown stage '" + stage + "'");
  const std::string hash = config_hash(cfg);
  StageOutcome outcome;

  // Prerequisites first, so a missing checkpoint fails before any data work.
  std::optional<Checkpoint> base;
  std::optional<Checkpoint> lm_source;
  if (stage == "pdmp" || stage == "hccp") {
    base = find_checkpoint(cfg.paths.checkpoints, stage == "pdmp" ? "tqpp" : "pdmp", hash);
    if (!contains(base->lineage, "pretrain-lm")) {
      if (stage == "hccp") throw MissingPrerequisite("pdmp checkpoint was trained without a 'pretrain-lm' stage");
      lm_source = find_checkpoint(cfg.paths.checkpoints, "pretrain-lm", hash);
      if (lm_source->vocab != base->vocab) {
        throw ConfigError("pretrain-lm and tqpp checkpoints use different vocabularies");
      }
    }
  } else if (stage == "tqpp") {
    try {
      base = find_checkpoint(cfg.paths.checkpoints, "pretrain-lm", hash);
    } catch (const MissingPrerequisite&) {
    }
  }
  for (const auto* c : {base ? &*base : nullptr, lm_source ? &*lm_source : nullptr}) {
    if (c == nullptr) continue;
    if (auto w = config_hash_warning(*c, hash)) outcome.warnings.push_back(*w);
  }

  const FileCacheBackend backend(cfg.paths.feature_cache);
  const std::vector<SamplePair> pairs = training_pairs(cfg, backend);
  if (pairs.empty()) throw EmptyCorpus("training split is empty");
  const AttributeIndex attributes(load_scenes(cfg.paths.scenes));

  std::unique_ptr<InstructionModel> model;
  std::vector<std::string> lineage;
  if (base) {
    model = restore_model(*base);
    lineage = base->lineage;
  } else {
    model = std::make_unique<InstructionModel>(cfg.model, backend.manifest(), Vocab::build(pairs), cfg.seed);
  }
  if (lm_source) {
    load_parameters(*model, *lm_source, "decoder.lm.");
    lineage.insert(lineage.begin(), "pretrain-lm");
  }
  lineage.push_back(stage);

  fs::create_directories(cfg.paths.checkpoints);
  outcome.checkpoint = cfg.paths.checkpoints / (stage + ".ckpt");
  outcome.log = cfg.paths.checkpoints / (stage + ".log.jsonl");
  std::ofstream log(outcome.log, std::ios::trunc);
  if (!log) throw IoError("cannot write " + outcome.log.string());

  nlohmann::json snapshot = nlohmann::json::object();
  int epochs = 0;
  if (stage == "pretrain-lm") {
    PretrainOptions opt;
    opt.epochs = cfg.pretrain_lm.epochs;
    opt.batch_size = cfg.pretrain_lm.batch_size;
    opt.learning_rate = cfg.pretrain_lm.learning_rate;
    opt.seed = cfg.seed;
    opt.noise_prefix_rows = cfg.pretrain_lm.noise_prefix_rows;
    opt.noise_prefix_scale = cfg.pretrain_lm.noise_prefix_scale;
    const PretrainReport rep = pretrain_lm(model->decoder().lm(), lm_corpus(*model, pairs), opt);
    for (std::size_t e = 0; e < rep.epoch_perplexity.size(); ++e) {
      StepLog s;
      s.epoch = static_cast<int>(e);
      s.step = static_cast<int>(e);
      s.loss = std::log(rep.epoch_perplexity[e]);
      s.components = {{"perplexity", rep.epoch_perplexity[e]}};
      ojson j = ojson::parse(step_log_to_json(s));
      j["stage"] = stage;
      log << j.dump() << '\n';
      outcome.losses.push_back(s.loss);
    }
    if (!rep.epoch_perplexity.empty()) snapshot["perplexity"] = rep.epoch_perplexity.back();
    epochs = opt.epochs;
  } else {
    const Stage s = stage_from_string(stage);
    const StageConfig& sc = cfg.stage(s);
    const std::vector<TrainingExample> examples = resolve_examples(pairs, backend, attributes);
    const metrics::ScorerRegistry scorers;
    const auto scorer = s == Stage::kHccp ? scorers.get(cfg.scorer) : nullptr;
    Trainer trainer(*model, sc, examples, scorer.get());
    double last_reward = 0.0;
    outcome.losses = trainer.run([&](const StepLog& step) {
      log << step_log_to_json(step) << '\n';
      if (step.mean_reward) last_reward = *step.mean_reward;
    });
    if (!outcome.losses.empty()) snapshot["final_loss"] = outcome.losses.back();
    if (s == Stage::kHccp) snapshot["final_mean_reward"] = last_reward;
    epochs = sc.epochs;
  }
  log.close();
  if (!log) throw IoError("short write to " + outcome.log.string());
  save_checkpoint(capture_checkpoint(*model, stage, epochs, hash, lineage, snapshot), outcome.checkpoint);
  return outcome;
}

std::vector<std::string> generation_report(const InstructionModel& model, const Checkpoint& ckpt,
                                           const std::vector<SamplePair>& pairs,
                                           const FeatureBackend& backend, int beam_size) {
  BeamOptions opt;
  opt.beam_size = beam_size;
  opt.max_len = model.dims().max_len;
  std::vector<std::string> lines;
  for (const auto& p : pairs) {
    const auto cands = model.generate(backend.get_raw_features(p.target_image_id),
                                      backend.get_raw_features(p.receptacle_image_id), opt);
    ojson j;
    j["sample_id"] = p.sample_id;
    ojson list = ojson::array();
    for (const auto& c : cands) list.push_back({{"text", model.render(c)}, {"total_logprob", c.total_logprob}});
    j["candidates"] = list;
    j["stage"] = ckpt.stage;
    j["config_hash"] = ckpt.config_hash;
    lines.push_back(j.dump());
  }
  return lines;
}

std::vector<SamplePair> emit_augmented_dataset(const InstructionModel& model, const std::vector<SamplePair>& pairs,
                                               const FeatureBackend& backend, int beam_size) {
  BeamOptions opt;
  opt.beam_size = beam_size;
  opt.max_len = model.dims().max_len;
  const auto max_words = static_cast<std::size_t>(
      std::max(0, std::min(model.dims().max_len - 1, model.dims().max_text_len - 2)));
  std::vector<SamplePair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto cands = model.generate(backend.get_raw_features(p.target_image_id),
                                      backend.get_raw_features(p.receptacle_image_id), opt);
    if (cands.empty()) throw EmptyCorpus("beam search returned no candidate for " + p.sample_id);
    // An unfinished top candidate is cut so the sentence stays trainable by
    // both the decoder (words + EOS) and the text branch (BOS + words + EOS).
    Candidate top = cands.front();
    if (!top.complete && top.tokens.size() > max_words) top.tokens.resize(max_words);
    out.push_back(SamplePair{p.sample_id + "_aug", p.target_image_id, p.receptacle_image_id, {model.render(top)}});
  }
  return out;
}

std::map<std::string, std::string> load_generations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read generations " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::string id = j.at("sample_id").get<std::string>();
      if (j.contains("candidates")) {
        const auto& c = j.at("candidates");
        out[id] = c.empty() ? std::string() : c.at(0).at("text").get<std::string>();
      } else {
        out[id] = j.at("text").get<std::string>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(n, e.what());
    }
  }
  return out;
}

std::vector<metrics::EvalInput> eval_inputs(const std::vector<SamplePair>& pairs, const AttributeIndex& attributes) {
  std::vector<metrics::EvalInput> out;
  for (const auto& p : pairs) {
    out.push_back({p.sample_id, p.references, attributes.at(p.target_image_id), attributes.at(p.receptacle_image_id)});
  }
  return out;
}

}  // namespace instrgen
