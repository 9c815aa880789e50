#include "instrgen/training.hpp"

#include "instrgen/errors.hpp"

#include <algorithm>
#include <numeric>

namespace instrgen {
namespace {

ag::Var sum_vars(const std::vector<ag::Var>& vars) {
  ag::Var total = vars.front();
  for (std::size_t i = 1; i < vars.size(); ++i) total = ag::add(total, vars[i]);
  return total;
}

const char* stage_key(Stage s) {
  switch (s) {
    case Stage::kTqpp: return "tqpp";
    case Stage::kPdmp: return "pdmp";
    case Stage::kHccp: return "hccp";
  }
  return "?";
}

void append(std::vector<ParamPtr>& out, const std::vector<ParamPtr>& more) {
  out.insert(out.end(), more.begin(), more.end());
}

}  // namespace

std::string to_string(Stage stage) { return stage_key(stage); }

Stage stage_from_string(const std::string& name) {
  for (Stage s : {Stage::kTqpp, Stage::kPdmp, Stage::kHccp}) {
    if (name == stage_key(s)) return s;
  }
  throw ConfigError("unknown stage '" + name + "'");
}

StageConfig default_stage_config(Stage stage) {
  StageConfig c;
  c.stage = stage;
  if (stage == Stage::kHccp) {
    c.learning_rate = 1e-5;
    c.epochs = 5;
  }
  return c;
}

nlohmann::json stage_config_to_json(const StageConfig& c) {
  return nlohmann::json{{"stage", to_string(c.stage)},
                        {"epochs", c.epochs},
                        {"batch_size", c.batch_size},
                        {"learning_rate", c.learning_rate},
                        {"temperature", c.temperature},
                        {"beam_size", c.beam_size},
                        {"lambdas", c.lambdas},
                        {"seed", c.seed},
                        {"freeze_decoder", c.freeze_decoder}};
}

StageConfig stage_config_from_json(const nlohmann::json& j, StageConfig c) {
  static const std::vector<std::string> known{"stage",     "epochs",    "batch_size", "learning_rate",
                                              "temperature", "beam_size", "lambdas",    "seed",
                                              "freeze_decoder"};
  if (!j.is_object()) throw ConfigError("stage config must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown stage config key '" + key + "'");
    }
  }
  try {
    if (j.contains("stage")) c.stage = stage_from_string(j.at("stage").get<std::string>());
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("temperature")) c.temperature = j.at("temperature").get<double>();
    if (j.contains("beam_size")) c.beam_size = j.at("beam_size").get<int>();
    if (j.contains("lambdas")) c.lambdas = j.at("lambdas").get<std::array<double, 3>>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("freeze_decoder")) c.freeze_decoder = j.at("freeze_decoder").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("stage config: ") + e.what());
  }
  if (c.epochs < 0 || c.batch_size < 1) throw ConfigError("epochs must be >= 0 and batch_size >= 1");
  if (c.temperature <= 0.0) throw ConfigError("temperature must be positive");
  if (c.learning_rate < 0.0) throw ConfigError("learning_rate must be non-negative");
  if (c.stage == Stage::kHccp && c.beam_size < 2) throw BeamTooSmall("HCCP needs beam_size >= 2");
  return c;
}

// ---- losses -----------------------------------------------------------------

ag::Var itc_similarity(const ag::Var& query_out, const ag::Var& text_feat, double tau) {
  const ag::Var cos = ag::matmul(ag::normalize_rows(query_out), ag::transpose(ag::normalize_rows(text_feat)));
  return ag::scale(ag::max_rows(cos), 1.0 / tau);
}

ag::Var itc_loss(std::span<const ag::Var> query_outs, std::span<const ag::Var> text_feats, double tau) {
  if (query_outs.size() != text_feats.size()) throw ShapeMismatch("itc: batch sizes differ");
  if (query_outs.size() < 2) throw BatchTooSmall("contrastive loss needs at least two pairs");
  if (tau <= 0.0) throw ConfigError("temperature must be positive");
  const ag::Var texts = ag::normalize_rows(ag::row_concat(text_feats));  // B x d
  std::vector<ag::Var> rows;
  rows.reserve(query_outs.size());
  for (const auto& q : query_outs) {
    rows.push_back(ag::max_rows(ag::matmul(ag::normalize_rows(q), ag::transpose(texts))));
  }
  const ag::Var sim = ag::scale(ag::row_concat(rows), 1.0 / tau);  // B x B
  std::vector<int> diag(query_outs.size());
  std::iota(diag.begin(), diag.end(), 0);
  const double inv = 1.0 / (2.0 * static_cast<double>(diag.size()));
  return ag::scale(ag::add(ag::cross_entropy_sum(sim, diag),
                           ag::cross_entropy_sum(ag::transpose(sim), diag)),
                   inv);
}

ag::Var itg_loss(const nn::Linear& head, const ag::Var& h_w, std::span<const int> ids) {
  if (ids.size() < 2) throw ShapeMismatch("itg: need at least one target token");
  if (h_w.rows() != static_cast<Eigen::Index>(ids.size())) throw ShapeMismatch("itg: h_w rows differ from ids");
  const auto n = static_cast<Eigen::Index>(ids.size()) - 1;
  const ag::Var logits = head(ag::row_slice(h_w, 0, n));
  return ag::scale(ag::cross_entropy_sum(logits, ids.subspan(1)), 1.0 / static_cast<double>(n));
}

ag::Var itm_logit(const nn::Linear& head, const ag::Var& h_q_part, const ag::Var& text_feat) {
  return ag::mean_all(head(ag::mul_row(h_q_part, text_feat)));
}

ag::Var itm_loss(const nn::Linear& head, const ag::Var& h_q_part, const ag::Var& text_feat, bool match) {
  return ag::bce_with_logits(itm_logit(head, h_q_part, text_feat), match ? 1.0 : 0.0);
}

ag::Var text_feature(const ag::Var& h_w) { return ag::row_slice(h_w, h_w.rows() - 1, 1); }

double TqppComponents::total() const {
  return itc_grid + itg_grid + itm_grid + itc_region + itg_region + itm_region;
}

std::map<std::string, double> TqppComponents::as_map() const {
  return {{"itc_grid", itc_grid},     {"itg_grid", itg_grid},     {"itm_grid", itm_grid},
          {"itc_region", itc_region}, {"itg_region", itg_region}, {"itm_region", itm_region}};
}

TqppLoss tqpp_loss(const InstructionModel& model, std::span<const BatchItem> batch, double tau,
                   std::size_t negative_shift) {
  const std::size_t b = batch.size();
  if (b < 2) throw BatchTooSmall("TQPP needs at least two pairs per batch");
  negative_shift %= b;
  if (negative_shift == 0) negative_shift = 1;

  std::array<std::vector<ag::Var>, 2> queries;
  std::array<std::vector<ag::Var>, 2> texts;
  std::array<std::vector<ag::Var>, 2> itg;
  for (const auto& item : batch) {
    const std::vector<int> ids = model.text_branch_ids(item.reference);
    const QueryStates s = model.encode(item.example->target, item.example->receptacle,
                                       std::span<const int>(ids));
    const std::array<const ag::Var*, 2> q{&s.h_q_grid, &s.h_q_region};
    const std::array<const ag::Var*, 2> w{&*s.h_w_grid, &*s.h_w_region};
    for (int blk = 0; blk < 2; ++blk) {
      queries[blk].push_back(*q[blk]);
      texts[blk].push_back(text_feature(*w[blk]));
      itg[blk].push_back(itg_loss(model.heads(blk).itg, *w[blk], ids));
    }
  }

  const double inv_b = 1.0 / static_cast<double>(b);
  std::array<ag::Var, 2> itc_v, itg_v, itm_v;
  for (int blk = 0; blk < 2; ++blk) {
    itc_v[blk] = itc_loss(queries[blk], texts[blk], tau);
    itg_v[blk] = ag::scale(sum_vars(itg[blk]), inv_b);
    std::vector<ag::Var> itm;
    for (std::size_t i = 0; i < b; ++i) {
      const auto& head = model.heads(blk).itm;
      itm.push_back(itm_loss(head, queries[blk][i], texts[blk][i], true));
      itm.push_back(itm_loss(head, queries[blk][i], texts[blk][(i + negative_shift) % b], false));
    }
    itm_v[blk] = ag::scale(sum_vars(itm), 0.5 * inv_b);
  }

  TqppLoss out;
  out.loss = sum_vars({itc_v[0], itg_v[0], itm_v[0], itc_v[1], itg_v[1], itm_v[1]});
  out.components = {itc_v[0].scalar(), itg_v[0].scalar(), itm_v[0].scalar(),
                    itc_v[1].scalar(), itg_v[1].scalar(), itm_v[1].scalar()};
  return out;
}

ag::Var pdmp_loss(const InstructionModel& model, std::span<const BatchItem> batch) {
  if (batch.empty()) throw BatchTooSmall("PDMP batch is empty");
  std::vector<ag::Var> ce;
  double tokens = 0.0;
  for (const auto& item : batch) {
    const std::vector<int> target = model.decoder_target_ids(item.reference);
    const ag::Var prefix = model.prefix(item.example->target, item.example->receptacle);
    ce.push_back(model.decoder().token_cross_entropy(prefix, target));
    tokens += static_cast<double>(target.size());
  }
  return ag::scale(sum_vars(ce), 1.0 / tokens);
}

RewardRow compute_reward(const std::string& candidate, const std::vector<std::string>& references,
                         const metrics::ImageAttributes& target, const metrics::ImageAttributes& receptacle,
                         const std::array<double, 3>& lambdas, const metrics::Scorer& scorer,
                         const metrics::CiderScorer& cider) {
  if (references.empty()) throw EmptyReferences("reward needs at least one reference");
  RewardRow row;
  row.p_tar = scorer.score(candidate, references, metrics::ImageSide::kTarget, target);
  row.p_rec = scorer.score(candidate, references, metrics::ImageSide::kReceptacle, receptacle);
  row.cider = cider.score(candidate, references);
  row.r = lambdas[0] * row.p_tar + lambdas[1] * row.p_rec + lambdas[2] * row.cider;
  return row;
}

RewardBundle make_reward_bundle(std::vector<RewardRow> rows) {
  RewardBundle b;
  b.rows = std::move(rows);
  // Mean taken relative to the first reward, so equal rewards give b == r exactly.
  if (!b.rows.empty()) {
    const double anchor = b.rows.front().r;
    double dev = 0.0;
    for (const auto& r : b.rows) dev += r.r - anchor;
    b.baseline = anchor + dev / static_cast<double>(b.rows.size());
  }
  return b;
}

ag::Var hcct_loss(std::span<const ag::Var> logprobs, const RewardBundle& rewards) {
  if (logprobs.size() < 2) throw BeamTooSmall("the beam baseline needs at least two candidates");
  if (logprobs.size() != rewards.rows.size()) throw ShapeMismatch("hcct: candidates and rewards differ in size");
  const double k = static_cast<double>(logprobs.size());
  std::vector<ag::Var> terms;
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    terms.push_back(ag::scale(logprobs[i], -(rewards.rows[i].r - rewards.baseline) / k));
  }
  return sum_vars(terms);
}

double hcct_loss(std::span<const Candidate> candidates, const RewardBundle& rewards) {
  std::vector<ag::Var> lp;
  for (const auto& c : candidates) lp.push_back(ag::constant(Matrix::Constant(1, 1, c.total_logprob)));
  ag::NoGradGuard no_grad;
  return hcct_loss(lp, rewards).scalar();
}

std::vector<std::vector<Candidate>> beam_candidates(const InstructionModel& model,
                                                    std::span<const BatchItem> batch, int beam_size) {
  BeamOptions opt;
  opt.beam_size = beam_size;
  opt.max_len = model.dims().max_len;
  std::vector<std::vector<Candidate>> out;
  for (const auto& item : batch) {
    out.push_back(model.generate(item.example->target, item.example->receptacle, opt));
  }
  return out;
}

HccpLoss hccp_loss(const InstructionModel& model, std::span<const BatchItem> batch,
                   const std::vector<std::vector<Candidate>>& candidates,
                   const std::array<double, 3>& lambdas, const metrics::Scorer& scorer,
                   const metrics::CiderScorer& cider) {
  if (batch.empty()) throw BatchTooSmall("HCCP batch is empty");
  if (candidates.size() != batch.size()) throw ShapeMismatch("hccp: one candidate list per item");
  std::vector<ag::Var> per_sample;
  double reward_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainingExample& ex = *batch[i].example;
    const auto& cands = candidates[i];
    std::vector<RewardRow> rows;
    for (const auto& c : cands) {
      rows.push_back(compute_reward(model.render(c), ex.references, ex.target_attributes,
                                    ex.receptacle_attributes, lambdas, scorer, cider));
    }
    const RewardBundle bundle = make_reward_bundle(std::move(rows));
    reward_sum += bundle.baseline;
    const ag::Var prefix = model.prefix(ex.target, ex.receptacle);
    std::vector<ag::Var> logps;
    for (const auto& c : cands) logps.push_back(model.decoder().sequence_logprob(prefix, c.tokens));
    per_sample.push_back(hcct_loss(logps, bundle));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  return {ag::scale(sum_vars(per_sample), inv), reward_sum * inv};
}

double mean_beam_reward(const InstructionModel& model, std::span<const TrainingExample> examples,
                        int beam_size, const std::array<double, 3>& lambdas,
                        const metrics::Scorer& scorer, const metrics::CiderScorer& cider) {
  if (examples.empty()) throw EmptyCorpus("no examples to score");
  BeamOptions opt;
  opt.beam_size = beam_size;
  opt.max_len = model.dims().max_len;
  double total = 0.0;
  for (const auto& ex : examples) {
    std::vector<RewardRow> rows;
    for (const auto& c : model.generate(ex.target, ex.receptacle, opt)) {
      rows.push_back(compute_reward(model.render(c), ex.references, ex.target_attributes,
                                    ex.receptacle_attributes, lambdas, scorer, cider));
    }
    total += make_reward_bundle(std::move(rows)).baseline;
  }
  return total / static_cast<double>(examples.size());
}

metrics::CiderScorer training_cider(std::span<const TrainingExample> examples) {
  std::vector<std::vector<std::string>> refs;
  for (const auto& ex : examples) refs.push_back(ex.references);
  return metrics::CiderScorer(metrics::DocumentFrequency(refs));
}

// ---- stage driver -----------------------------------------------------------

std::string step_log_to_json(const StepLog& log) {
  nlohmann::ordered_json j;
  j["stage"] = to_string(log.stage);
  j["epoch"] = log.epoch;
  j["step"] = log.step;
  j["loss"] = log.loss;
  j["components"] = log.components;
  j["mean_reward"] = log.mean_reward ? nlohmann::ordered_json(*log.mean_reward) : nlohmann::ordered_json();
  return j.dump();
}

std::vector<ParamPtr> stage_parameters(const InstructionModel& model, Stage stage, bool freeze_decoder) {
  const auto& reg = model.registry();
  std::vector<ParamPtr> out = reg.with_prefix("features.");
  append(out, reg.with_prefix("qformer."));
  if (stage == Stage::kTqpp) {
    append(out, reg.with_prefix("heads."));
    return out;
  }
  append(out, reg.with_prefix("decoder.prefix_projection."));
  if (!freeze_decoder) append(out, reg.with_prefix("decoder.lm."));
  return out;
}

Trainer::Trainer(InstructionModel& model, StageConfig config, std::span<const TrainingExample> examples,
                 const metrics::Scorer* scorer)
    : model_(model),
      cfg_(config),
      examples_(examples),
      scorer_(scorer),
      adam_(stage_parameters(model, config.stage, config.freeze_decoder),
            AdamOptions{config.learning_rate, 0.9, 0.999, 1e-8, 1.0}),
      rng_(mix_seed(config.seed, "stage_" + to_string(config.stage))) {
  if (examples_.empty()) throw EmptyCorpus("training set is empty");
  if (cfg_.stage != Stage::kTqpp) model_.decoder().lm().set_frozen(cfg_.freeze_decoder);
  if (cfg_.stage == Stage::kHccp) {
    if (cfg_.beam_size < 2) throw BeamTooSmall("HCCP needs beam_size >= 2");
    if (scorer_ == nullptr) throw ScorerUnavailable("HCCP needs a scorer");
    cider_.emplace(training_cider(examples_));
  }
  if (cfg_.stage == Stage::kTqpp && examples_.size() < 2) {
    throw BatchTooSmall("TQPP needs at least two training pairs");
  }
}

void Trainer::apply(const ag::Var& loss) {
  adam_.zero_grad();
  model_.registry().zero_grad();
  loss.backward();
  adam_.step();
}

double Trainer::tqpp_step(std::span<const BatchItem> batch) {
  std::uniform_int_distribution<std::size_t> shift(1, batch.size() - 1);
  const TqppLoss l = tqpp_loss(model_, batch, cfg_.temperature, shift(rng_));
  apply(l.loss);
  return l.loss.scalar();
}

double Trainer::pdmp_step(std::span<const BatchItem> batch) {
  const ag::Var l = pdmp_loss(model_, batch);
  apply(l);
  return l.scalar();
}

double Trainer::hccp_step(std::span<const BatchItem> batch, double* mean_reward) {
  const auto cands = beam_candidates(model_, batch, cfg_.beam_size);
  const HccpLoss l = hccp_loss(model_, batch, cands, cfg_.lambdas, *scorer_, *cider_);
  apply(l.loss);
  if (mean_reward != nullptr) *mean_reward = l.mean_reward;
  return l.loss.scalar();
}

std::vector<std::vector<BatchItem>> Trainer::epoch_batches() {
  // TQPP and HCCP draw one reference per scene, so no batch holds two texts
  // of the same scene; PDMP trains on every reference.
  std::vector<BatchItem> items;
  for (const auto& ex : examples_) {
    if (ex.references.empty()) throw EmptyReferences("sample " + ex.sample_id + " has no references");
    if (cfg_.stage == Stage::kPdmp) {
      for (const auto& r : ex.references) items.push_back({&ex, r});
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, ex.references.size() - 1);
      items.push_back({&ex, ex.references[pick(rng_)]});
    }
  }
  std::shuffle(items.begin(), items.end(), rng_);
  std::vector<std::vector<BatchItem>> batches;
  const auto bs = static_cast<std::size_t>(cfg_.batch_size);
  for (std::size_t start = 0; start < items.size(); start += bs) {
    const std::size_t end = std::min(items.size(), start + bs);
    batches.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(start),
                         items.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // Contrastive batches need two pairs; a trailing singleton joins its neighbour.
  if (cfg_.stage == Stage::kTqpp && batches.size() > 1 && batches.back().size() < 2) {
    auto last = batches.back();
    batches.pop_back();
    batches.back().insert(batches.back().end(), last.begin(), last.end());
  }
  return batches;
}

std::vector<double> Trainer::run(const LogSink& sink) {
  std::vector<double> losses;
  int step = 0;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    for (const auto& batch : epoch_batches()) {
      StepLog log;
      log.stage = cfg_.stage;
      log.epoch = epoch;
      log.step = step++;
      switch (cfg_.stage) {
        case Stage::kTqpp: {
          std::uniform_int_distribution<std::size_t> shift(1, batch.size() - 1);
          const TqppLoss l = tqpp_loss(model_, batch, cfg_.temperature, shift(rng_));
          apply(l.loss);
          log.loss = l.loss.scalar();
          log.components = l.components.as_map();
          break;
        }
        case Stage::kPdmp:
          log.loss = pdmp_step(batch);
          log.components = {{"token_ce", log.loss}};
          break;
        case Stage::kHccp: {
          double reward = 0.0;
          log.loss = hccp_step(batch, &reward);
          log.components = {{"hcct", log.loss}};
          log.mean_reward = reward;
          break;
        }
      }
      losses.push_back(log.loss);
      if (sink) sink(log);
    }
  }
  return losses;
}

}  // namespace instrgen
