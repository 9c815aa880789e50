#include "instrgen/checkpoint.hpp"
#include "instrgen/errors.hpp"
#include "instrgen/pipeline.hpp"
#include "instrgen/training.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

using namespace instrgen;
using instrgen::testing::grad_check;
using instrgen::testing::random_matrix;
using instrgen::testing::TempDir;
using instrgen::testing::tiny_dims;
using instrgen::testing::tiny_manifest;

namespace {

double log_sum_exp(const std::vector<double>& v) {
  double m = -1e300;
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) { return a.dot(b) / (a.norm() * b.norm()); }

nn::Linear make_linear(nn::ParameterRegistry& reg, const std::string& name, Eigen::Index in, Eigen::Index out,
                       std::uint64_t seed) {
  Rng rng(seed);
  return nn::Linear(reg, name, in, out, rng);
}

class ConstantScorer final : public metrics::Scorer {
 public:
  explicit ConstantScorer(double v) : v_(v) {}
  std::string name() const override { return "constant"; }
  double score(const std::string&, const std::vector<std::string>&, metrics::ImageSide,
               const metrics::ImageAttributes&) const override {
    return v_;
  }

 private:
  double v_;
};

struct Fixture {
  instrgen::testing::ToyData toy = instrgen::testing::toy_data(14, 5, tiny_manifest());
  std::unique_ptr<InstructionModel> model = make_model(1);

  std::unique_ptr<InstructionModel> make_model(std::uint64_t seed) const {
    return std::make_unique<InstructionModel>(tiny_dims(), toy.dataset.manifest, Vocab::build(toy.dataset.train),
                                              seed);
  }
  std::vector<BatchItem> batch(std::size_t n, std::size_t offset = 0) const {
    std::vector<BatchItem> b;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ex = toy.train[(offset + i) % toy.train.size()];
      b.push_back({&ex, ex.references[0]});
    }
    return b;
  }
};

std::vector<Matrix> snapshot(const std::vector<ParamPtr>& ps) {
  std::vector<Matrix> out;
  for (const auto& p : ps) out.push_back(p->value);
  return out;
}

}  // namespace

// ---- contrastive ------------------------------------------------------------

TEST(ItcLoss, OrthogonalPairsBeatChance) {
  const std::vector<ag::Var> q{ag::constant(Matrix{{1.0, 0.0}}), ag::constant(Matrix{{0.0, 1.0}})};
  const std::vector<ag::Var> t{ag::constant(Matrix{{2.0, 0.0}}), ag::constant(Matrix{{0.0, 3.0}})};
  const double l = itc_loss(q, t, 1.0).scalar();
  EXPECT_LT(l, std::log(2.0));
  EXPECT_NEAR(l, std::log(1.0 + std::exp(-1.0)), 1e-12);
}

TEST(ItcLoss, IdenticalFeaturesGiveLogBatchSize) {
  const Matrix q = random_matrix(3, 5, 1);
  const Matrix t = random_matrix(1, 5, 2);
  const std::vector<ag::Var> qs(4, ag::constant(q));
  const std::vector<ag::Var> ts(4, ag::constant(t));
  EXPECT_NEAR(itc_loss(qs, ts, 0.1).scalar(), std::log(4.0), 1e-12);
}

TEST(ItcLoss, MatchesDoubleLoopOracle) {
  const std::size_t b = 4;
  const double tau = 0.2;
  std::vector<ag::Var> qs, ts;
  for (std::size_t i = 0; i < b; ++i) {
    qs.push_back(ag::constant(random_matrix(3, 6, 10 + i)));
    ts.push_back(ag::constant(random_matrix(1, 6, 20 + i)));
  }
  Matrix s(b, b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      double best = -1e300;
      for (Eigen::Index r = 0; r < 3; ++r) best = std::max(best, cosine(qs[i].value().row(r), ts[j].value().row(0)));
      s(i, j) = best / tau;
    }
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> row, col;
    for (std::size_t j = 0; j < b; ++j) {
      row.push_back(s(i, j));
      col.push_back(s(j, i));
    }
    loss += (log_sum_exp(row) - s(i, i)) + (log_sum_exp(col) - s(i, i));
  }
  loss /= 2.0 * b;
  EXPECT_NEAR(itc_loss(qs, ts, tau).scalar(), loss, 1e-6);
  EXPECT_NEAR(itc_similarity(qs[1], ts[2], tau).scalar(), s(1, 2), 1e-12);
}

TEST(ItcLoss, SinglePairIsRejected) {
  const std::vector<ag::Var> one{ag::constant(Matrix::Ones(2, 3))};
  EXPECT_THROW(itc_loss(one, one, 0.1), BatchTooSmall);
}

// ---- generation and matching heads -------------------------------------------

TEST(ItgLoss, SingleWordVocabularyCostsNothing) {
  nn::ParameterRegistry reg;
  const auto head = make_linear(reg, "h", 4, 1, 1);
  EXPECT_NEAR(itg_loss(head, ag::constant(random_matrix(3, 4, 2)), std::vector<int>{0, 0, 0}).scalar(), 0.0, 1e-15);
}

TEST(ItgLoss, UniformLogitsCostLogV) {
  nn::ParameterRegistry reg;
  auto head = make_linear(reg, "h", 4, 9, 1);
  head.weight->value.setZero();
  EXPECT_NEAR(itg_loss(head, ag::constant(random_matrix(5, 4, 2)), std::vector<int>{1, 4, 8, 0, 2}).scalar(),
              std::log(9.0), 1e-12);
}

TEST(ItgLoss, MatchesPerPositionOracle) {
  nn::ParameterRegistry reg;
  const auto head = make_linear(reg, "h", 4, 6, 3);
  reg.get("h.bias")->value = random_matrix(1, 6, 9);
  const Matrix h = random_matrix(4, 4, 4);
  const std::vector<int> ids{1, 5, 3, 2};
  double total = 0.0;
  for (int t = 0; t < 3; ++t) {
    const Matrix logits = h.row(t) * head.weight->value + head.bias->value;
    std::vector<double> row(logits.data(), logits.data() + 6);
    total += log_sum_exp(row) - logits(0, ids[t + 1]);
  }
  EXPECT_NEAR(itg_loss(head, ag::constant(h), ids).scalar(), total / 3.0, 1e-12);
}

TEST(ItmLoss, ZeroLogitCostsLogTwo) {
  nn::ParameterRegistry reg;
  auto head = make_linear(reg, "h", 4, 1, 1);
  head.weight->value.setZero();
  const ag::Var q = ag::constant(random_matrix(3, 4, 1));
  const ag::Var t = ag::constant(random_matrix(1, 4, 2));
  EXPECT_NEAR(itm_loss(head, q, t, true).scalar(), std::log(2.0), 1e-15);
  EXPECT_NEAR(itm_loss(head, q, t, false).scalar(), std::log(2.0), 1e-15);
}

TEST(ItmLoss, SaturatesForConfidentMatches) {
  nn::ParameterRegistry reg;
  auto head = make_linear(reg, "h", 4, 1, 1);
  head.weight->value.setZero();
  head.bias->value(0, 0) = 60.0;
  const ag::Var q = ag::constant(random_matrix(3, 4, 1));
  const ag::Var t = ag::constant(random_matrix(1, 4, 2));
  EXPECT_LT(itm_loss(head, q, t, true).scalar(), 1e-20);
  EXPECT_NEAR(itm_loss(head, q, t, false).scalar(), 60.0, 1e-9);
}

TEST(ItmLoss, MatchesManualBce) {
  nn::ParameterRegistry reg;
  const auto head = make_linear(reg, "h", 4, 1, 5);
  head.bias->value(0, 0) = 0.3;
  const Matrix q = random_matrix(3, 4, 6);
  const Matrix t = random_matrix(1, 4, 7);
  double z = 0.0;
  for (Eigen::Index r = 0; r < 3; ++r) {
    for (Eigen::Index c = 0; c < 4; ++c) z += q(r, c) * t(0, c) * head.weight->value(c, 0);
  }
  z = z / 3.0 + 0.3;
  EXPECT_NEAR(itm_logit(head, ag::constant(q), ag::constant(t)).scalar(), z, 1e-12);
  EXPECT_NEAR(itm_loss(head, ag::constant(q), ag::constant(t), true).scalar(), std::log1p(std::exp(-z)), 1e-12);
  EXPECT_NEAR(itm_loss(head, ag::constant(q), ag::constant(t), false).scalar(), std::log1p(std::exp(z)), 1e-12);
}

// ---- stage losses -------------------------------------------------------------

TEST(TqppLoss, TotalIsTheSumOfSixComponents) {
  Fixture f;
  for (std::size_t shift : {1u, 2u, 3u}) {
    const auto b = f.batch(4);
    const TqppLoss l = tqpp_loss(*f.model, b, 0.1, shift);
    EXPECT_NEAR(l.loss.scalar(), l.components.total(), 1e-6);
    double sum = 0.0;
    for (const auto& [k, v] : l.components.as_map()) sum += v;
    EXPECT_NEAR(l.loss.scalar(), sum, 1e-6);
    EXPECT_EQ(l.components.as_map().size(), 6u);
  }
}

TEST(TqppLoss, TrainingNeverTouchesTheDecoder) {
  Fixture f;
  const auto dec = f.model->registry().with_prefix("decoder.");
  const auto before = snapshot(dec);
  const auto heads_before = snapshot(f.model->registry().with_prefix("heads."));
  StageConfig cfg = default_stage_config(Stage::kTqpp);
  cfg.epochs = 1;
  cfg.batch_size = 4;
  Trainer(*f.model, cfg, f.toy.train).run();
  EXPECT_EQ(snapshot(dec), before);
  EXPECT_NE(snapshot(f.model->registry().with_prefix("heads.")), heads_before);
}

TEST(PdmpLoss, MatchesManualTokenCrossEntropy) {
  Fixture f;
  const auto b = f.batch(2, 3);
  double total = 0.0;
  double tokens = 0.0;
  for (const auto& item : b) {
    const auto target = f.model->decoder_target_ids(item.reference);
    const ag::Var prefix = f.model->prefix(item.example->target, item.example->receptacle);
    for (std::size_t t = 0; t < target.size(); ++t) {
      const std::vector<int> head(target.begin(), target.begin() + static_cast<std::ptrdiff_t>(t));
      const Matrix logits = f.model->decoder().next_token_logits(prefix, head).value();
      std::vector<double> row(logits.data(), logits.data() + logits.size());
      total += log_sum_exp(row) - logits(0, target[t]);
    }
    tokens += static_cast<double>(target.size());
  }
  EXPECT_NEAR(pdmp_loss(*f.model, b).scalar(), total / tokens, 1e-10);
}

TEST(PdmpLoss, CertainDecoderCostsNothing) {
  Fixture f;
  f.model->registry().get("decoder.lm.head.weight")->value.setZero();
  auto bias = f.model->registry().get("decoder.lm.head.bias");
  bias->value.setZero();
  bias->value(0, Vocab::kEos) = 1000.0;
  const BatchItem item{&f.toy.train[0], ""};
  EXPECT_NEAR(pdmp_loss(*f.model, std::span<const BatchItem>(&item, 1)).scalar(), 0.0, 1e-12);
}

TEST(PdmpLoss, DecreasesOverEpochsOnTenSamples) {
  Fixture f;
  const std::span<const TrainingExample> ten(f.toy.train.data(), 10);
  StageConfig cfg = default_stage_config(Stage::kPdmp);
  cfg.epochs = 8;
  cfg.batch_size = 5;
  cfg.learning_rate = 3e-3;
  std::vector<StepLog> logs;
  Trainer(*f.model, cfg, ten).run([&](const StepLog& l) { logs.push_back(l); });
  std::vector<double> per_epoch(8, 0.0), count(8, 0.0);
  for (const auto& l : logs) {
    per_epoch[static_cast<std::size_t>(l.epoch)] += l.loss;
    count[static_cast<std::size_t>(l.epoch)] += 1.0;
  }
  EXPECT_LT(per_epoch.back() / count.back(), per_epoch.front() / count.front());
}

TEST(StageParameters, FrozenDecoderIsExcluded) {
  Fixture f;
  auto has = [](const std::vector<ParamPtr>& ps, const std::string& prefix) {
    return std::any_of(ps.begin(), ps.end(), [&](const ParamPtr& p) { return p->name.rfind(prefix, 0) == 0; });
  };
  const auto tq = stage_parameters(*f.model, Stage::kTqpp, true);
  EXPECT_FALSE(has(tq, "decoder."));
  EXPECT_TRUE(has(tq, "heads."));
  const auto pd = stage_parameters(*f.model, Stage::kPdmp, true);
  EXPECT_TRUE(has(pd, "decoder.prefix_projection."));
  EXPECT_FALSE(has(pd, "decoder.lm."));
  EXPECT_FALSE(has(pd, "heads."));
  EXPECT_TRUE(has(stage_parameters(*f.model, Stage::kHccp, false), "decoder.lm."));
}

// ---- rewards ------------------------------------------------------------------

TEST(Reward, DirectSubstitution) {
  const std::string ref = "move the red cup to the sink .";
  const metrics::CiderScorer cider(metrics::DocumentFrequency({{ref}}));
  const ConstantScorer one(1.0);
  const RewardRow row = compute_reward(ref, {ref}, {{"red"}}, {{"sink"}}, {0.25, 0.25, 0.5}, one, cider);
  EXPECT_DOUBLE_EQ(row.cider, 10.0);
  EXPECT_DOUBLE_EQ(row.r, 5.5);
  const RewardRow only_c = compute_reward(ref, {ref, "bring it"}, {{"red"}}, {{"sink"}}, {0.0, 0.0, 1.0}, one, cider);
  EXPECT_EQ(only_c.r, only_c.cider);
}

TEST(Reward, StubAndCiderMatchHandArithmetic) {
  const std::vector<std::string> refs{"bring the red cup to the sink .", "move the red cup to the sink in the kitchen ."};
  const metrics::CiderScorer cider(metrics::DocumentFrequency({refs}));
  const RewardRow row = compute_reward("bring the red cup to the sink .", refs, {{"red", "cup", "kitchen"}},
                                       {{"wooden", "sink", "kitchen"}}, {0.25, 0.25, 0.5},
                                       metrics::StubPolosScorer{}, cider);
  EXPECT_NEAR(row.p_tar, 0.8333333333333333, 1e-12);
  EXPECT_NEAR(row.p_rec, 0.6666666666666666, 1e-12);
  EXPECT_NEAR(row.cider, 7.713621159609111, 1e-9);
  EXPECT_NEAR(row.r, 4.231810579804556, 1e-9);
}

TEST(Reward, EmptyReferencesThrow) {
  const metrics::CiderScorer cider(metrics::DocumentFrequency({{"a"}}));
  EXPECT_THROW(compute_reward("a", {}, {{"a"}}, {{"a"}}, {1, 1, 1}, metrics::StubPolosScorer{}, cider),
               EmptyReferences);
}

// ---- reward-weighted beam loss ------------------------------------------------

namespace {

RewardBundle bundle_of(const std::vector<double>& r) {
  std::vector<RewardRow> rows;
  for (double v : r) rows.push_back({0.0, 0.0, 0.0, v});
  return make_reward_bundle(rows);
}

std::vector<Candidate> candidates_of(const std::vector<double>& logp) {
  std::vector<Candidate> c;
  for (double v : logp) c.push_back({{4, 2}, {v, 0.0}, v, true});
  return c;
}

}  // namespace

TEST(HcctLoss, HandWorkedPairIsMinusAQuarter) {
  EXPECT_EQ(hcct_loss(candidates_of({-1.0, -2.0}), bundle_of({1.0, 0.0})), -0.25);
  EXPECT_EQ(bundle_of({1.0, 0.0}).baseline, 0.5);
}

TEST(HcctLoss, AdvantagesSumToZero) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> r(static_cast<std::size_t>(2 + trial % 7));
    for (auto& v : r) v = d(rng);
    const RewardBundle b = bundle_of(r);
    double s = 0.0;
    for (const auto& row : b.rows) s += row.r - b.baseline;
    EXPECT_NEAR(s, 0.0, 1e-9);
  }
}

TEST(HcctLoss, ConstantRewardsGiveZeroLossAndGradient) {
  auto a = std::make_shared<Parameter>("a", Matrix::Constant(1, 1, -1.5));
  auto b = std::make_shared<Parameter>("b", Matrix::Constant(1, 1, -0.5));
  const std::vector<ag::Var> lp{ag::scale(ag::param(a), 2.0), ag::param(b), ag::add(ag::param(a), ag::param(b))};
  const ag::Var loss = hcct_loss(lp, bundle_of({0.7, 0.7, 0.7}));
  EXPECT_EQ(loss.scalar(), 0.0);
  loss.backward();
  EXPECT_EQ(a->grad(0, 0), 0.0);
  EXPECT_EQ(b->grad(0, 0), 0.0);
}

TEST(HcctLoss, InvariantToRewardShift) {
  const auto c = candidates_of({-3.2, -1.1, -7.4, -0.2});
  const std::vector<double> r{0.3, 2.5, -1.0, 4.0};
  std::vector<double> shifted;
  for (double v : r) shifted.push_back(v + 17.25);
  EXPECT_NEAR(hcct_loss(c, bundle_of(r)), hcct_loss(c, bundle_of(shifted)), 1e-9);
}

TEST(HcctLoss, RejectsShortOrMisalignedBeams) {
  EXPECT_THROW(hcct_loss(candidates_of({-1.0}), bundle_of({1.0})), BeamTooSmall);
  EXPECT_THROW(hcct_loss(candidates_of({-1.0, -2.0}), bundle_of({1.0, 2.0, 3.0})), ShapeMismatch);
  nlohmann::json j = {{"stage", "hccp"}, {"beam_size", 1}};
  EXPECT_THROW(stage_config_from_json(j, default_stage_config(Stage::kHccp)), BeamTooSmall);
}

TEST(HccpStep, ConstantRewardsLeaveParametersUnchanged) {
  Fixture f;
  const ConstantScorer c(0.4);
  StageConfig cfg = default_stage_config(Stage::kHccp);
  cfg.lambdas = {0.25, 0.25, 0.0};
  cfg.beam_size = 3;
  const auto before = snapshot(f.model->registry().all());
  Trainer t(*f.model, cfg, f.toy.train, &c);
  double reward = 0.0;
  const auto b = f.batch(3);
  EXPECT_EQ(t.hccp_step(b, &reward), 0.0);
  EXPECT_DOUBLE_EQ(reward, 0.2);
  EXPECT_EQ(snapshot(f.model->registry().all()), before);
}

TEST(HccpStep, SameSeedReproducesTheLoss) {
  Fixture f;
  const metrics::StubPolosScorer stub;
  StageConfig cfg = default_stage_config(Stage::kHccp);
  cfg.beam_size = 3;
  auto once = [&] {
    auto m = f.make_model(7);
    Trainer t(*m, cfg, f.toy.train, &stub);
    return t.hccp_step(f.batch(2));
  };
  EXPECT_EQ(once(), once());
}

TEST(HccpStep, RequiresAScorer) {
  Fixture f;
  EXPECT_THROW(Trainer(*f.model, default_stage_config(Stage::kHccp), f.toy.train), ScorerUnavailable);
}

// ---- reproducibility ------------------------------------------------------------

TEST(Trainer, FixedSeedReproducesLossTrajectories) {
  Fixture f;
  for (Stage s : {Stage::kTqpp, Stage::kPdmp}) {
    StageConfig cfg = default_stage_config(s);
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 11;
    auto run = [&] {
      auto m = f.make_model(2);
      return Trainer(*m, cfg, f.toy.train).run();
    };
    const auto a = run();
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, run());
  }
}

TEST(StageConfig, JsonRoundTripAndUnknownKeys) {
  StageConfig c = default_stage_config(Stage::kPdmp);
  c.lambdas = {0.1, 0.2, 0.7};
  c.seed = 99;
  c.freeze_decoder = false;
  EXPECT_EQ(stage_config_from_json(stage_config_to_json(c), StageConfig{}), c);
  EXPECT_THROW(stage_config_from_json({{"epochz", 3}}, c), ConfigError);
  EXPECT_THROW(stage_config_from_json({{"temperature", 0.0}}, c), ConfigError);
}

// ---- checkpoints ----------------------------------------------------------------

TEST(Checkpoint, SerializationIsLossless) {
  Fixture f;
  const Checkpoint ck = capture_checkpoint(*f.model, "pdmp", 3, "00ff", {"pretrain-lm", "tqpp", "pdmp"},
                                           {{"final_loss", 1.25}});
  const std::string bytes = serialize_checkpoint(ck);
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(back.stage, "pdmp");
  EXPECT_EQ(back.epoch, 3);
  EXPECT_EQ(back.lineage.size(), 3u);
  EXPECT_EQ(back.dims, tiny_dims());
  TempDir dir("ckpt");
  save_checkpoint(ck, dir.path() / "a.ckpt");
  save_checkpoint(load_checkpoint(dir.path() / "a.ckpt"), dir.path() / "b.ckpt");
  std::ifstream a(dir.path() / "a.ckpt", std::ios::binary), b(dir.path() / "b.ckpt", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
}

TEST(Checkpoint, RestoredModelReproducesForwardExactly) {
  Fixture f;
  StageConfig cfg = default_stage_config(Stage::kPdmp);
  cfg.epochs = 1;
  cfg.batch_size = 4;
  Trainer(*f.model, cfg, f.toy.train).run();
  const auto restored = restore_model(parse_checkpoint(serialize_checkpoint(
      capture_checkpoint(*f.model, "pdmp", 1, "h", {"pdmp"}))));
  BeamOptions opt;
  opt.beam_size = 3;
  for (const auto& ex : f.toy.val) {
    EXPECT_EQ(restored->prefix(ex.target, ex.receptacle).value(), f.model->prefix(ex.target, ex.receptacle).value());
    const auto a = restored->generate(ex.target, ex.receptacle, opt);
    const auto b = f.model->generate(ex.target, ex.receptacle, opt);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].tokens, b[i].tokens);
      EXPECT_EQ(a[i].total_logprob, b[i].total_logprob);
    }
  }
  EXPECT_TRUE(restored->decoder().lm().frozen());
}

TEST(Checkpoint, DamagedBytesAreRejected) {
  Fixture f;
  const std::string bytes = serialize_checkpoint(capture_checkpoint(*f.model, "tqpp", 0, "h", {"tqpp"}));
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() / 2)), CorruptCheckpoint);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 5)), CorruptCheckpoint);
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(parse_checkpoint(flipped), CorruptCheckpoint);
  EXPECT_THROW(parse_checkpoint("NOTACKPT" + bytes.substr(8)), CorruptCheckpoint);
  EXPECT_THROW(parse_checkpoint(bytes + "x"), CorruptCheckpoint);
  TempDir dir("trunc");
  std::ofstream(dir.path() / "t.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(load_checkpoint(dir.path() / "t.ckpt"), CorruptCheckpoint);
}

TEST(Checkpoint, ModifiedConfigTriggersHashWarning) {
  Fixture f;
  RunConfig cfg;
  const std::string h = config_hash(cfg);
  EXPECT_EQ(h.size(), 16u);
  const Checkpoint ck = capture_checkpoint(*f.model, "tqpp", 0, h, {"tqpp"});
  EXPECT_FALSE(config_hash_warning(ck, h).has_value());
  cfg.tqpp.learning_rate = 5e-4;
  const std::string h2 = config_hash(cfg);
  EXPECT_NE(h2, h);
  const auto w = config_hash_warning(ck, h2);
  ASSERT_TRUE(w.has_value());
  EXPECT_NE(w->find(h), std::string::npos);
}

TEST(Checkpoint, PartialLoadChecksNamesAndShapes) {
  Fixture f;
  auto other = f.make_model(9);
  Checkpoint ck = capture_checkpoint(*f.model, "pretrain-lm", 0, "h", {"pretrain-lm"});
  load_parameters(*other, ck, "decoder.lm.");
  EXPECT_EQ(other->registry().get("decoder.lm.head.weight")->value,
            f.model->registry().get("decoder.lm.head.weight")->value);
  EXPECT_NE(other->registry().get("decoder.prefix_projection.weight")->value,
            f.model->registry().get("decoder.prefix_projection.weight")->value);
  ck.parameters.front().second = Matrix::Zero(1, 1);
  EXPECT_THROW(load_parameters(*other, ck), CorruptCheckpoint);
}

// ---- gradient checks through the whole model ---------------------------------

namespace {

struct GradFixture : Fixture {
  GradFixture() { model->decoder().lm().set_frozen(false); }
  std::vector<ParamPtr> params() const { return model->registry().all(); }
};

}  // namespace

TEST(FullModelGradients, TqppLoss) {
  GradFixture f;
  const auto b = f.batch(3);
  const auto r = grad_check(f.params(), [&] { return tqpp_loss(*f.model, b, 0.5, 1).loss; }, 200, 1);
  EXPECT_GE(r.pass_fraction(), 0.99) << "worst " << r.worst;
}

TEST(FullModelGradients, PdmpLoss) {
  GradFixture f;
  const auto b = f.batch(2);
  const auto r = grad_check(f.params(), [&] { return pdmp_loss(*f.model, b); }, 200, 2);
  EXPECT_GE(r.pass_fraction(), 0.99) << "worst " << r.worst;
}

TEST(FullModelGradients, HcctLoss) {
  GradFixture f;
  const auto b = f.batch(2);
  const auto cands = beam_candidates(*f.model, b, 3);
  const auto r = grad_check(f.params(), [&] {
    std::vector<ag::Var> per_sample;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const ag::Var prefix = f.model->prefix(b[i].example->target, b[i].example->receptacle);
      std::vector<ag::Var> lp;
      std::vector<double> rewards;
      for (std::size_t k = 0; k < cands[i].size(); ++k) {
        lp.push_back(f.model->decoder().sequence_logprob(prefix, cands[i][k].tokens));
        rewards.push_back(0.5 * static_cast<double>(k) - static_cast<double>(i));
      }
      per_sample.push_back(hcct_loss(lp, bundle_of(rewards)));
    }
    return ag::add(per_sample[0], per_sample[1]);
  }, 200, 3);
  EXPECT_GE(r.pass_fraction(), 0.99) << "worst " << r.worst;
}
