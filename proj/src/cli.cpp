#include "instrgen/cli.hpp"

#include "instrgen/errors.hpp"
#include "instrgen/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>

namespace instrgen {
namespace fs = std::filesystem;

namespace {

void write_lines(const std::vector<std::string>& lines, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  out.close();
  if (!out) throw IoError("short write to " + path.string());
}

fs::path default_features(const fs::path& dataset) { return dataset.parent_path() / "features"; }
fs::path default_scenes(const fs::path& dataset) { return dataset.parent_path() / "scenes"; }

int cmd_gen_data(int n, std::uint64_t seed, const fs::path& out_dir, SplitRatios ratios, std::ostream& out) {
  const SyntheticDataset ds = generate_synthetic_dataset(n, seed, ratios);
  write_dataset_dir(ds, out_dir);
  out << "wrote " << ds.scenes.size() << " scenes (" << ds.train.size() << " train, " << ds.val.size()
      << " val, " << ds.test.size() << " test) to " << out_dir.string() << '\n';
  return 0;
}

int cmd_train(const std::string& stage, const fs::path& config_path, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_run_config(config_path);
  const StageOutcome r = run_stage(cfg, stage);
  for (const auto& w : r.warnings) err << w << '\n';
  out << stage << ": " << r.losses.size() << " steps";
  if (!r.losses.empty()) out << ", final loss " << std::setprecision(6) << r.losses.back();
  out << "\ncheckpoint " << r.checkpoint.string() << "\nlog " << r.log.string() << '\n';
  return 0;
}

int cmd_generate(const fs::path& checkpoint, const fs::path& dataset, int beam_size, const fs::path& out_path,
                 fs::path features, std::ostream& out) {
  if (features.empty()) features = default_features(dataset);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const auto model = restore_model(ckpt);
  const FileCacheBackend backend(features);
  const auto pairs = load_dataset(dataset, &backend);
  write_lines(generation_report(*model, ckpt, pairs, backend, beam_size), out_path);
  out << "generated " << pairs.size() << " samples to " << out_path.string() << '\n';
  return 0;
}

int cmd_evaluate(const fs::path& dataset, const fs::path& generations, const fs::path& out_path, fs::path scenes,
                 const std::string& scorer_name, std::ostream& out) {
  if (scenes.empty()) scenes = default_scenes(dataset);
  const auto pairs = load_dataset(dataset);
  const AttributeIndex attributes(load_scenes(scenes));
  const metrics::ScorerRegistry registry;
  const auto scorer = registry.get(scorer_name);
  const auto report = metrics::evaluate(eval_inputs(pairs, attributes), load_generations(generations), *scorer);
  std::string hash;
  {
    std::ifstream in(generations);
    std::string first;
    if (std::getline(in, first)) {
      const auto j = nlohmann::json::parse(first, nullptr, false);
      if (j.is_object() && j.contains("config_hash") && j.at("config_hash").is_string()) {
        hash = j.at("config_hash").get<std::string>();
      }
    }
  }
  write_lines({report_to_json(report, hash)}, out_path);
  out << std::setprecision(17) << "cider_d " << report.cider_d << "\nbleu4 " << report.bleu4 << "\nstub_target "
      << report.stub_target << "\nstub_receptacle " << report.stub_receptacle << '\n';
  return 0;
}

int cmd_augment(const fs::path& checkpoint, const fs::path& dataset, const fs::path& out_path, fs::path features,
                int beam_size, std::ostream& out) {
  if (features.empty()) features = default_features(dataset);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const auto model = restore_model(ckpt);
  const FileCacheBackend backend(features);
  const auto pairs = load_dataset(dataset, &backend);
  const auto augmented = emit_augmented_dataset(*model, pairs, backend, beam_size);
  save_dataset(augmented, out_path);
  load_dataset(out_path, &backend);
  out << "augmented " << augmented.size() << " samples to " << out_path.string() << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Instruction generation for fetch-and-carry scenes", "instrgen"};
  app.require_subcommand(1);

  int n = 70;
  std::uint64_t seed = 0;
  std::string out_dir;
  SplitRatios ratios;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  gen->add_option("--n", n, "Number of scenes")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--train", ratios.train, "Train ratio");
  gen->add_option("--val", ratios.val, "Validation ratio");
  gen->add_option("--test", ratios.test, "Test ratio");

  std::string stage;
  std::string config;
  auto* train = app.add_subcommand("train", "Run one training stage");
  train->add_option("--stage", stage, "Stage")
      ->required()
      ->check(CLI::IsMember({"pretrain-lm", "tqpp", "pdmp", "hccp"}));
  train->add_option("--config", config, "Run config (JSON)")->required();

  std::string checkpoint;
  std::string dataset;
  std::string features;
  std::string out_path;
  int beam_size = 5;
  auto* generate = app.add_subcommand("generate", "Write a generation report");
  generate->add_option("--checkpoint", checkpoint)->required();
  generate->add_option("--dataset", dataset)->required();
  generate->add_option("--beam-size", beam_size)->check(CLI::PositiveNumber);
  generate->add_option("--features", features, "Feature cache (default: <dataset dir>/features)");
  generate->add_option("--out", out_path)->required();

  std::string generations;
  std::string scenes;
  std::string scorer = "stub";
  auto* evaluate = app.add_subcommand("evaluate", "Score generations against references");
  evaluate->add_option("--dataset", dataset)->required();
  evaluate->add_option("--generations", generations)->required();
  evaluate->add_option("--scenes", scenes, "Scene records (default: <dataset dir>/scenes)");
  evaluate->add_option("--scorer", scorer);
  evaluate->add_option("--out", out_path)->required();

  auto* augment = app.add_subcommand("augment", "Emit a one-sentence-per-pair dataset");
  augment->add_option("--checkpoint", checkpoint)->required();
  augment->add_option("--dataset", dataset)->required();
  augment->add_option("--features", features);
  augment->add_option("--beam-size", beam_size)->check(CLI::PositiveNumber);
  augment->add_option("--out", out_path)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(n, seed, out_dir, ratios, out);
    if (train->parsed()) return cmd_train(stage, config, out, err);
    if (generate->parsed()) return cmd_generate(checkpoint, dataset, beam_size, out_path, features, out);
    if (evaluate->parsed()) return cmd_evaluate(dataset, generations, out_path, scenes, scorer, out);
    if (augment->parsed()) return cmd_augment(checkpoint, dataset, out_path, features, beam_size, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "error: IoError: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace instrgen
