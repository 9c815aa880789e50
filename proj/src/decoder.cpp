#include "instrgen/decoder.hpp"

#include "instrgen/errors.hpp"
#include "instrgen/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace instrgen {
namespace {

struct Hyp {
  std::vector<int> tokens;
  std::vector<double> logprobs;
  double total = 0.0;
};

double score_of(const Hyp& h, bool normalize) {
  if (!normalize || h.tokens.empty()) return h.total;
  return h.total / static_cast<double>(h.tokens.size());
}

// Higher score first; equal scores fall back to lexicographic token order.
bool better(const Hyp& a, const Hyp& b, bool normalize) {
  const double sa = score_of(a, normalize);
  const double sb = score_of(b, normalize);
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;
}

Candidate to_candidate(const Hyp& h, bool complete) {
  return {h.tokens, h.logprobs, h.total, complete};
}

}  // namespace

LanguageModel::LanguageModel(nn::ParameterRegistry& reg, const std::string& name, const LmConfig& cfg,
                             Rng& rng)
    : cfg_(cfg) {
  if (cfg.vocab_size <= 0) throw ConfigError("language model needs a vocabulary");
  token_embedding_ = reg.normal(name + ".token_embedding", cfg.vocab_size, cfg.d_dec, 0.5, rng);
  position_embedding_ = reg.normal(name + ".position_embedding", cfg.max_len, cfg.d_dec, 0.1, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string b = name + ".block" + std::to_string(l);
    blocks_.push_back(Block{nn::LayerNorm(reg, b + ".norm1", cfg.d_dec),
                            nn::MultiHeadAttention(reg, b + ".attn", cfg.d_dec, cfg.heads, rng),
                            nn::LayerNorm(reg, b + ".norm2", cfg.d_dec),
                            nn::FeedForward(reg, b + ".ffn", cfg.d_dec, cfg.d_dec * cfg.ffn_multiplier, rng)});
  }
  final_norm_ = nn::LayerNorm(reg, name + ".final_norm", cfg.d_dec);
  head_ = nn::Linear(reg, name + ".head", cfg.d_dec, cfg.vocab_size, rng);
  params_ = reg.with_prefix(name + ".");
}

void LanguageModel::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& p : params_) p->frozen = frozen;
}

ag::Var LanguageModel::logits(const std::optional<ag::Var>& prefix, std::span<const int> input_ids,
                              bool last_only) const {
  if (input_ids.empty()) throw ShapeMismatch("language model needs at least one input id");
  if (static_cast<int>(input_ids.size()) > cfg_.max_len) {
    throw LengthExceeded(std::to_string(input_ids.size()) + " inputs exceed max_len " +
                         std::to_string(cfg_.max_len));
  }
  std::vector<int> positions(input_ids.size());
  std::iota(positions.begin(), positions.end(), 0);
  ag::Var x = ag::add(ag::gather_rows(ag::param(token_embedding_), input_ids),
                      ag::gather_rows(ag::param(position_embedding_), positions));
  Eigen::Index offset = 0;
  if (prefix) {
    if (prefix->cols() != cfg_.d_dec) throw ShapeMismatch("prefix width differs from d_dec");
    offset = prefix->rows();
    const std::vector<ag::Var> parts{*prefix, x};
    x = ag::row_concat(parts);
  }
  for (const auto& b : blocks_) {
    const ag::Var n1 = b.norm1(x);
    x = ag::add(x, b.attn(n1, n1, /*causal=*/true));
    x = ag::add(x, b.ffn(b.norm2(x)));
  }
  const auto n = static_cast<Eigen::Index>(input_ids.size());
  const ag::Var tokens = last_only ? ag::row_slice(x, offset + n - 1, 1) : ag::row_slice(x, offset, n);
  return head_(final_norm_(tokens));
}

PrefixDecoder::PrefixDecoder(nn::ParameterRegistry& reg, const std::string& name, Eigen::Index d_model,
                             const LmConfig& cfg, Rng& rng)
    : projection_(reg, name + ".prefix_projection", d_model, cfg.d_dec, rng),
      lm_(reg, name + ".lm", cfg, rng) {}

ag::Var PrefixDecoder::project_prefix(const ag::Var& h_q) const { return projection_(h_q); }

ag::Var PrefixDecoder::next_token_logits(const std::optional<ag::Var>& prefix,
                                         std::span<const int> tokens) const {
  if (static_cast<int>(tokens.size()) >= lm_.config().max_len) {
    throw LengthExceeded("sequence already holds max_len tokens");
  }
  std::vector<int> input{lm_.config().bos_id};
  input.insert(input.end(), tokens.begin(), tokens.end());
  return lm_.logits(prefix, input, /*last_only=*/true);
}

ag::Var PrefixDecoder::sequence_logprob(const std::optional<ag::Var>& prefix,
                                        std::span<const int> tokens) const {
  if (tokens.empty()) throw ShapeMismatch("sequence_logprob needs a non-empty sequence");
  std::vector<int> input{lm_.config().bos_id};
  input.insert(input.end(), tokens.begin(), tokens.end() - 1);
  const ag::Var logp = ag::log_softmax_rows(lm_.logits(prefix, input));
  std::vector<std::pair<int, int>> coords;
  for (std::size_t t = 0; t < tokens.size(); ++t) coords.emplace_back(static_cast<int>(t), tokens[t]);
  return ag::pick_sum(logp, coords);
}

ag::Var PrefixDecoder::token_cross_entropy(const std::optional<ag::Var>& prefix,
                                           std::span<const int> tokens) const {
  if (tokens.empty()) throw ShapeMismatch("token_cross_entropy needs a non-empty sequence");
  std::vector<int> input{lm_.config().bos_id};
  input.insert(input.end(), tokens.begin(), tokens.end() - 1);
  return ag::cross_entropy_sum(lm_.logits(prefix, input), tokens);
}

std::vector<Candidate> PrefixDecoder::beam_search(const std::optional<ag::Var>& prefix,
                                                  const BeamOptions& opt) const {
  if (opt.beam_size < 1) throw ConfigError("beam_size must be at least 1");
  const auto& cfg = lm_.config();
  const int max_len = std::min(opt.max_len, cfg.max_len);
  ag::NoGradGuard no_grad;

  std::vector<bool> banned(static_cast<std::size_t>(cfg.vocab_size), false);
  for (int id : cfg.banned_ids) {
    if (id >= 0 && id < cfg.vocab_size) banned[static_cast<std::size_t>(id)] = true;
  }
  auto cmp = [&](const Hyp& a, const Hyp& b) { return better(a, b, opt.length_normalize); };
  const auto beam = static_cast<std::size_t>(opt.beam_size);

  std::vector<Hyp> live{Hyp{}};
  std::vector<Hyp> finished;
  for (int step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<Hyp> expansions;
    for (const auto& h : live) {
      const ag::Var lp = ag::log_softmax_rows(next_token_logits(prefix, h.tokens));
      for (int v = 0; v < cfg.vocab_size; ++v) {
        if (banned[static_cast<std::size_t>(v)]) continue;
        Hyp e = h;
        const double l = lp.value()(0, v);
        e.tokens.push_back(v);
        e.logprobs.push_back(l);
        e.total += l;
        expansions.push_back(std::move(e));
      }
    }
    const std::size_t keep = std::min(beam, expansions.size());
    std::partial_sort(expansions.begin(), expansions.begin() + static_cast<std::ptrdiff_t>(keep),
                      expansions.end(), cmp);
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      if (expansions[i].tokens.back() == cfg.eos_id) {
        finished.push_back(std::move(expansions[i]));
      } else {
        live.push_back(std::move(expansions[i]));
      }
    }
    // Log-probabilities only decrease, so once beam_size sequences are done
    // and no live one can overtake the worst of them, the search is over.
    if (!opt.length_normalize && finished.size() >= beam) {
      std::sort(finished.begin(), finished.end(), cmp);
      const double worst = finished[beam - 1].total;
      const bool can_improve = std::any_of(live.begin(), live.end(),
                                           [&](const Hyp& h) { return h.total > worst; });
      if (!can_improve) break;
    }
  }

  std::sort(finished.begin(), finished.end(), cmp);
  std::sort(live.begin(), live.end(), cmp);
  std::vector<Candidate> out;
  for (const auto& h : finished) {
    if (out.size() == beam) break;
    out.push_back(to_candidate(h, true));
  }
  for (const auto& h : live) {
    if (out.size() == beam) break;
    out.push_back(to_candidate(h, false));
  }
  return out;
}

Candidate PrefixDecoder::greedy(const std::optional<ag::Var>& prefix, int max_len) const {
  const auto& cfg = lm_.config();
  max_len = std::min(max_len, cfg.max_len);
  ag::NoGradGuard no_grad;
  Candidate c;
  for (int step = 0; step < max_len; ++step) {
    const ag::Var lp = ag::log_softmax_rows(next_token_logits(prefix, c.tokens));
    int best = -1;
    for (int v = 0; v < cfg.vocab_size; ++v) {
      if (std::find(cfg.banned_ids.begin(), cfg.banned_ids.end(), v) != cfg.banned_ids.end()) continue;
      if (best < 0 || lp.value()(0, v) > lp.value()(0, best)) best = v;
    }
    c.tokens.push_back(best);
    c.token_logprobs.push_back(lp.value()(0, best));
    c.total_logprob += lp.value()(0, best);
    if (best == cfg.eos_id) {
      c.complete = true;
      break;
    }
  }
  return c;
}

PretrainReport pretrain_lm(LanguageModel& lm, const std::vector<std::vector<int>>& corpus,
                           const PretrainOptions& opt) {
  if (corpus.empty()) throw EmptyCorpus("language-model pretraining needs at least one sequence");
  lm.set_frozen(false);
  Adam adam(lm.parameters(), AdamOptions{opt.learning_rate, 0.9, 0.999, 1e-8, 1.0});
  Rng rng(mix_seed(opt.seed, "pretrain_lm"));
  std::normal_distribution<double> noise(0.0, opt.noise_prefix_scale);
  const int bos = lm.config().bos_id;

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  PretrainReport report;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_nll = 0.0;
    double epoch_tokens = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      adam.zero_grad();
      std::vector<ag::Var> losses;
      double tokens = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& seq = corpus[order[i]];
        if (seq.empty()) throw EmptyCorpus("empty sequence in corpus");
        std::optional<ag::Var> prefix;
        if (opt.noise_prefix_rows > 0) {
          Matrix p(opt.noise_prefix_rows, lm.config().d_dec);
          for (Eigen::Index r = 0; r < p.rows(); ++r) {
            for (Eigen::Index c = 0; c < p.cols(); ++c) p(r, c) = noise(rng);
          }
          prefix = ag::constant(std::move(p));
        }
        std::vector<int> input{bos};
        input.insert(input.end(), seq.begin(), seq.end() - 1);
        losses.push_back(ag::cross_entropy_sum(lm.logits(prefix, input), seq));
        tokens += static_cast<double>(seq.size());
      }
      ag::Var total = losses.front();
      for (std::size_t i = 1; i < losses.size(); ++i) total = ag::add(total, losses[i]);
      epoch_nll += total.scalar();
      epoch_tokens += tokens;
      ag::scale(total, 1.0 / tokens).backward();
      adam.step();
    }
    report.epoch_perplexity.push_back(std::exp(epoch_nll / epoch_tokens));
  }
  lm.set_frozen(true);
  return report;
}

}  // namespace instrgen
