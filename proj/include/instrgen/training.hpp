#pragma once

// The three training stages (query-transformer pre-training, prefix decoder
// training, reward-calibrated fine-tuning), their losses, and reward
// computation.

#include "instrgen/metrics.hpp"
#include "instrgen/model.hpp"
#include "instrgen/optim.hpp"

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace instrgen {

enum class Stage { kTqpp, kPdmp, kHccp };

std::string to_string(Stage stage);
Stage stage_from_string(const std::string& name);  // throws ConfigError

struct StageConfig {
  Stage stage = Stage::kTqpp;
  int epochs = 10;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double temperature = 0.1;
  int beam_size = 5;
  std::array<double, 3> lambdas{0.25, 0.25, 0.5};
  std::uint64_t seed = 0;
  bool freeze_decoder = true;
  bool operator==(const StageConfig&) const = default;
};

// Keys mirror the field names; absent keys keep the defaults of `base`.
nlohmann::json stage_config_to_json(const StageConfig& cfg);
StageConfig stage_config_from_json(const nlohmann::json& j, StageConfig base);
StageConfig default_stage_config(Stage stage);

// A training pair with its features resolved and its scene attributes.
struct TrainingExample {
  std::string sample_id;
  RawImageFeatures target;
  RawImageFeatures receptacle;
  std::vector<std::string> references;
  metrics::ImageAttributes target_attributes;
  metrics::ImageAttributes receptacle_attributes;
};

// One (example, reference) pairing inside a batch.
struct BatchItem {
  const TrainingExample* example = nullptr;
  std::string reference;
};

// ---- losses ---------------------------------------------------------------

// s(i, j) = max over query rows of cos(query_row, text_j) / tau.
ag::Var itc_similarity(const ag::Var& query_out, const ag::Var& text_feat, double tau);
// Symmetric cross-entropy over the batch similarity matrix with diagonal
// targets. Throws BatchTooSmall below two pairs.
ag::Var itc_loss(std::span<const ag::Var> query_outs, std::span<const ag::Var> text_feats, double tau);
// Mean next-token cross-entropy of head(h_w) where row t predicts ids[t + 1].
ag::Var itg_loss(const nn::Linear& head, const ag::Var& h_w, std::span<const int> ids);
// Mean over query rows of head(h_q_part ⊙ text_feat): one 1x1 logit.
ag::Var itm_logit(const nn::Linear& head, const ag::Var& h_q_part, const ag::Var& text_feat);
ag::Var itm_loss(const nn::Linear& head, const ag::Var& h_q_part, const ag::Var& text_feat, bool match);

// Text feature for contrastive/matching losses: the h_w row at the EOS position.
ag::Var text_feature(const ag::Var& h_w);

struct TqppComponents {
  double itc_grid = 0.0;
  double itg_grid = 0.0;
  double itm_grid = 0.0;
  double itc_region = 0.0;
  double itg_region = 0.0;
  double itm_region = 0.0;
  double total() const;
  std::map<std::string, double> as_map() const;
};

struct TqppLoss {
  ag::Var loss;
  TqppComponents components;
};

// Matching negatives pair item i with the text of item (i + shift) % B.
TqppLoss tqpp_loss(const InstructionModel& model, std::span<const BatchItem> batch, double tau,
                   std::size_t negative_shift);

// Sum of token cross-entropies divided by the number of target tokens.
ag::Var pdmp_loss(const InstructionModel& model, std::span<const BatchItem> batch);

struct RewardRow {
  double p_tar = 0.0;
  double p_rec = 0.0;
  double cider = 0.0;
  double r = 0.0;
};

struct RewardBundle {
  std::vector<RewardRow> rows;
  double baseline = 0.0;
};

RewardRow compute_reward(const std::string& candidate, const std::vector<std::string>& references,
                         const metrics::ImageAttributes& target, const metrics::ImageAttributes& receptacle,
                         const std::array<double, 3>& lambdas, const metrics::Scorer& scorer,
                         const metrics::CiderScorer& cider);
// Fills the baseline with the mean reward of the rows.
RewardBundle make_reward_bundle(std::vector<RewardRow> rows);

// -(1/k) sum_i (r_i - b) log p(w_i). Rewards are constants. Throws
// BeamTooSmall for k < 2 and ShapeMismatch when sizes disagree.
ag::Var hcct_loss(std::span<const ag::Var> logprobs, const RewardBundle& rewards);
double hcct_loss(std::span<const Candidate> candidates, const RewardBundle& rewards);

struct HccpLoss {
  ag::Var loss;
  double mean_reward = 0.0;
};

// Beam candidates per item, generated without gradient at the current
// parameters.
std::vector<std::vector<Candidate>> beam_candidates(const InstructionModel& model,
                                                    std::span<const BatchItem> batch, int beam_size);
// Batch mean of the per-sample HCCT loss for fixed candidates.
HccpLoss hccp_loss(const InstructionModel& model, std::span<const BatchItem> batch,
                   const std::vector<std::vector<Candidate>>& candidates,
                   const std::array<double, 3>& lambdas, const metrics::Scorer& scorer,
                   const metrics::CiderScorer& cider);

// Mean over examples of the mean reward of their beam.
double mean_beam_reward(const InstructionModel& model, std::span<const TrainingExample> examples,
                        int beam_size, const std::array<double, 3>& lambdas,
                        const metrics::Scorer& scorer, const metrics::CiderScorer& cider);

metrics::CiderScorer training_cider(std::span<const TrainingExample> examples);

// ---- stage driver ---------------------------------------------------------

struct StepLog {
  Stage stage = Stage::kTqpp;
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
  std::map<std::string, double> components;
  std::optional<double> mean_reward;
};

std::string step_log_to_json(const StepLog& log);

using LogSink = std::function<void(const StepLog&)>;

// Parameters a stage may update: TQPP owns the feature projections, the
// Triplet Qformer and the pre-training heads; PDMP and HCCP own the feature
// projections, the Triplet Qformer, the prefix projection and, unless
// frozen, the language model.
std::vector<ParamPtr> stage_parameters(const InstructionModel& model, Stage stage, bool freeze_decoder);

class Trainer {
 public:
  // scorer is required for HCCP.
  Trainer(InstructionModel& model, StageConfig config, std::span<const TrainingExample> examples,
          const metrics::Scorer* scorer = nullptr);

  double tqpp_step(std::span<const BatchItem> batch);
  double pdmp_step(std::span<const BatchItem> batch);
  double hccp_step(std::span<const BatchItem> batch, double* mean_reward = nullptr);

  // Runs all epochs; returns the per-step losses.
  std::vector<double> run(const LogSink& sink = {});

  const StageConfig& config() const { return cfg_; }

 private:
  std::vector<std::vector<BatchItem>> epoch_batches();
  void apply(const ag::Var& loss);

  InstructionModel& model_;
  StageConfig cfg_;
  std::span<const TrainingExample> examples_;
  const metrics::Scorer* scorer_;
  std::optional<metrics::CiderScorer> cider_;
  Adam adam_;
  Rng rng_;
};

}  // namespace instrgen
