#include "instrgen/metrics.hpp"

#include "instrgen/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

namespace instrgen::metrics {
namespace {

constexpr char kSep = '\x1f';

bool is_split_punct(char c) {
  return c == '.' || c == ',' || c == '?' || c == '!' || c == ';' || c == ':';
}

struct CookedSentence {
  std::array<std::map<std::string, double>, kMaxOrder> vec;
  std::array<double, kMaxOrder> norm{};
  double length = 0.0;
};

CookedSentence cook(const NGramCounts& counts, double length, const DocumentFrequency& df) {
  CookedSentence c;
  c.length = length;
  for (int n = 0; n < kMaxOrder; ++n) {
    for (const auto& [g, tf] : counts[static_cast<std::size_t>(n)]) {
      const double w = static_cast<double>(tf) * df.idf(g);
      c.vec[static_cast<std::size_t>(n)][g] = w;
      c.norm[static_cast<std::size_t>(n)] += w * w;
    }
    c.norm[static_cast<std::size_t>(n)] = std::sqrt(c.norm[static_cast<std::size_t>(n)]);
  }
  return c;
}

std::array<double, kMaxOrder> similarity(const CookedSentence& cand, const CookedSentence& ref,
                                         const CiderOptions& opt) {
  std::array<double, kMaxOrder> val{};
  const double delta = cand.length - ref.length;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    for (const auto& [g, wc] : cand.vec[n]) {
      auto it = ref.vec[n].find(g);
      if (it == ref.vec[n].end()) continue;
      const double wr = it->second;
      val[n] += (opt.d_variant ? std::min(wc, wr) : wc) * wr;
    }
    if (cand.norm[n] != 0.0 && ref.norm[n] != 0.0) val[n] /= cand.norm[n] * ref.norm[n];
    if (opt.d_variant) val[n] *= std::exp(-(delta * delta) / (2.0 * opt.sigma * opt.sigma));
  }
  return val;
}

std::vector<std::string> set_of_ngrams(const std::vector<std::string>& refs) {
  std::set<std::string> all;
  for (const auto& r : refs) {
    const auto counts = count_ngrams(tokenize(r));
    for (const auto& order : counts) {
      for (const auto& [g, _] : order) all.insert(g);
    }
  }
  return {all.begin(), all.end()};
}

void check_references(const std::vector<std::string>& candidates,
                      const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size()) {
    throw ShapeMismatch("one reference set per candidate is required");
  }
  for (std::size_t i = 0; i < references.size(); ++i) {
    if (references[i].empty()) throw EmptyReferences("sample " + std::to_string(i) + " has none");
  }
}

}  // namespace

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (is_split_punct(ch)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::string join(const Tokens& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s.push_back(' ');
    s += tokens[i];
  }
  return s;
}

NGramCounts count_ngrams(const Tokens& tokens) {
  NGramCounts counts;
  for (int n = 1; n <= kMaxOrder; ++n) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
      std::string key = tokens[i];
      for (int k = 1; k < n; ++k) {
        key.push_back(kSep);
        key += tokens[i + static_cast<std::size_t>(k)];
      }
      ++counts[static_cast<std::size_t>(n - 1)][key];
    }
  }
  return counts;
}

DocumentFrequency::DocumentFrequency(const std::vector<std::vector<std::string>>& reference_sets)
    : corpus_size_(reference_sets.size()) {
  for (const auto& refs : reference_sets) {
    for (const auto& g : set_of_ngrams(refs)) ++df_[g];
  }
  log_corpus_size_ = corpus_size_ <= 1 ? 1.0 : std::log(static_cast<double>(corpus_size_));
}

int DocumentFrequency::df(const std::string& ngram) const {
  auto it = df_.find(ngram);
  return it == df_.end() ? 0 : it->second;
}

double DocumentFrequency::idf(const std::string& ngram) const {
  return log_corpus_size_ - std::log(std::max(1.0, static_cast<double>(df(ngram))));
}

CiderScorer::CiderScorer(DocumentFrequency df, CiderOptions options)
    : df_(std::move(df)), options_(options) {}

double CiderScorer::score(const std::string& candidate,
                          const std::vector<std::string>& references) const {
  if (references.empty()) throw EmptyReferences("candidate has no references");
  const Tokens ct = tokenize(candidate);
  const CookedSentence cand = cook(count_ngrams(ct), static_cast<double>(ct.size()), df_);
  std::array<double, kMaxOrder> acc{};
  for (const auto& r : references) {
    const Tokens rt = tokenize(r);
    const CookedSentence ref = cook(count_ngrams(rt), static_cast<double>(rt.size()), df_);
    const auto s = similarity(cand, ref, options_);
    for (std::size_t n = 0; n < kMaxOrder; ++n) acc[n] += s[n];
  }
  double mean = 0.0;
  for (double v : acc) mean += v;
  mean /= kMaxOrder;
  return 10.0 * mean / static_cast<double>(references.size());
}

CiderResult cider_d(const std::vector<std::string>& candidates,
                    const std::vector<std::vector<std::string>>& references, CiderOptions options) {
  check_references(candidates, references);
  const CiderScorer scorer(DocumentFrequency(references), options);
  CiderResult out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out.per_sample.push_back(scorer.score(candidates[i], references[i]));
  }
  double total = 0.0;
  for (double s : out.per_sample) total += s;
  out.corpus = out.per_sample.empty() ? 0.0 : total / static_cast<double>(out.per_sample.size());
  return out;
}

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  candidate_length += o.candidate_length;
  reference_length += o.reference_length;
  return *this;
}

BleuStats bleu_stats(const std::string& candidate, const std::vector<std::string>& references) {
  if (references.empty()) throw EmptyReferences("candidate has no references");
  const Tokens ct = tokenize(candidate);
  const NGramCounts cc = count_ngrams(ct);
  BleuStats s;
  s.candidate_length = static_cast<double>(ct.size());

  std::array<std::map<std::string, int>, kMaxOrder> max_ref;
  double best_len = -1.0;
  for (const auto& r : references) {
    const Tokens rt = tokenize(r);
    const double len = static_cast<double>(rt.size());
    const double d = std::abs(len - s.candidate_length);
    const double best_d = std::abs(best_len - s.candidate_length);
    if (best_len < 0.0 || d < best_d || (d == best_d && len < best_len)) best_len = len;
    const NGramCounts rc = count_ngrams(rt);
    for (std::size_t n = 0; n < kMaxOrder; ++n) {
      for (const auto& [g, c] : rc[n]) max_ref[n][g] = std::max(max_ref[n][g], c);
    }
  }
  s.reference_length = best_len;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    for (const auto& [g, c] : cc[n]) {
      s.totals[n] += c;
      auto it = max_ref[n].find(g);
      if (it != max_ref[n].end()) s.matches[n] += std::min(c, it->second);
    }
  }
  return s;
}

double bleu_from_stats(const BleuStats& t, bool smooth) {
  if (t.candidate_length <= 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    double m = t.matches[n];
    double tot = t.totals[n];
    if (smooth && n > 0) {
      m += 1.0;
      tot += 1.0;
    }
    if (m <= 0.0 || tot <= 0.0) return 0.0;
    log_sum += std::log(m / tot);
  }
  const double bp = t.candidate_length < t.reference_length
                        ? std::exp(1.0 - t.reference_length / t.candidate_length)
                        : 1.0;
  return bp * std::exp(log_sum / kMaxOrder);
}

double bleu4(const std::vector<std::string>& candidates,
             const std::vector<std::vector<std::string>>& references, bool smooth) {
  check_references(candidates, references);
  BleuStats total;
  for (std::size_t i = 0; i < candidates.size(); ++i) total += bleu_stats(candidates[i], references[i]);
  return bleu_from_stats(total, smooth);
}

std::string to_string(ImageSide side) {
  return side == ImageSide::kTarget ? "target" : "receptacle";
}

double unigram_f1(const std::string& candidate, const std::vector<std::string>& references) {
  const Tokens ct = tokenize(candidate);
  if (ct.empty()) return 0.0;
  std::map<std::string, int> cc;
  for (const auto& t : ct) ++cc[t];
  double best = 0.0;
  for (const auto& r : references) {
    const Tokens rt = tokenize(r);
    if (rt.empty()) continue;
    std::map<std::string, int> rc;
    for (const auto& t : rt) ++rc[t];
    double overlap = 0.0;
    for (const auto& [w, c] : cc) {
      auto it = rc.find(w);
      if (it != rc.end()) overlap += std::min(c, it->second);
    }
    if (overlap == 0.0) continue;
    const double p = overlap / static_cast<double>(ct.size());
    const double rec = overlap / static_cast<double>(rt.size());
    best = std::max(best, 2.0 * p * rec / (p + rec));
  }
  return best;
}

double StubPolosScorer::score(const std::string& candidate,
                              const std::vector<std::string>& references, ImageSide side,
                              const ImageAttributes& image) const {
  if (image.words.empty()) throw MissingAttributes("no attribute words for the " + to_string(side) + " image");
  const Tokens ct = tokenize(candidate);
  const std::set<std::string> present(ct.begin(), ct.end());
  double hits = 0.0;
  for (const auto& w : image.words) {
    if (present.count(w) != 0) hits += 1.0;
  }
  const double coverage = hits / static_cast<double>(image.words.size());
  const double s = 0.5 * unigram_f1(candidate, references) + 0.5 * coverage;
  return std::clamp(s, 0.0, 1.0);
}

ScorerRegistry::ScorerRegistry() { add(std::make_shared<StubPolosScorer>()); }

void ScorerRegistry::add(std::shared_ptr<const Scorer> scorer) {
  const std::string n = scorer->name();
  scorers_[n] = std::move(scorer);
}

std::shared_ptr<const Scorer> ScorerRegistry::get(const std::string& name) const {
  auto it = scorers_.find(name);
  if (it == scorers_.end()) throw ScorerUnavailable("no scorer registered as '" + name + "'");
  return it->second;
}

EvalReport evaluate(const std::vector<EvalInput>& dataset,
                    const std::map<std::string, std::string>& generations, const Scorer& scorer,
                    CiderOptions options) {
  std::vector<std::string> cands;
  std::vector<std::vector<std::string>> refs;
  for (const auto& s : dataset) {
    auto it = generations.find(s.sample_id);
    if (it == generations.end()) {
      throw CoverageGap(s.sample_id, "no generation for sample '" + s.sample_id + "'");
    }
    cands.push_back(it->second);
    refs.push_back(s.references);
  }
  const CiderResult cider = cider_d(cands, refs, options);

  EvalReport report;
  BleuStats total;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    EvalRow row;
    row.sample_id = dataset[i].sample_id;
    row.candidate = cands[i];
    row.cider_d = cider.per_sample[i];
    row.stub_target = scorer.score(cands[i], refs[i], ImageSide::kTarget, dataset[i].target);
    row.stub_receptacle = scorer.score(cands[i], refs[i], ImageSide::kReceptacle, dataset[i].receptacle);
    row.bleu = bleu_stats(cands[i], refs[i]);
    total += row.bleu;
    report.stub_target += row.stub_target;
    report.stub_receptacle += row.stub_receptacle;
    report.rows.push_back(std::move(row));
  }
  const double n = dataset.empty() ? 1.0 : static_cast<double>(dataset.size());
  report.cider_d = cider.corpus;
  report.bleu4 = bleu_from_stats(total);
  report.stub_target /= n;
  report.stub_receptacle /= n;
  return report;
}

std::string report_to_json(const EvalReport& report, const std::string& config_hash) {
  using nlohmann::json;
  json j;
  j["cider_d"] = report.cider_d;
  j["bleu4"] = report.bleu4;
  j["stub_target"] = report.stub_target;
  j["stub_receptacle"] = report.stub_receptacle;
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  json rows = json::array();
  for (const auto& r : report.rows) {
    json row;
    row["sample_id"] = r.sample_id;
    row["candidate"] = r.candidate;
    row["cider_d"] = r.cider_d;
    row["stub_target"] = r.stub_target;
    row["stub_receptacle"] = r.stub_receptacle;
    row["bleu_matches"] = r.bleu.matches;
    row["bleu_totals"] = r.bleu.totals;
    row["candidate_length"] = r.bleu.candidate_length;
    row["reference_length"] = r.bleu.reference_length;
    rows.push_back(std::move(row));
  }
  j["samples"] = std::move(rows);
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  using nlohmann::json;
  EvalReport r;
  try {
    const json j = json::parse(text);
    r.cider_d = j.at("cider_d").get<double>();
    r.bleu4 = j.at("bleu4").get<double>();
    r.stub_target = j.at("stub_target").get<double>();
    r.stub_receptacle = j.at("stub_receptacle").get<double>();
    for (const auto& row : j.at("samples")) {
      EvalRow e;
      e.sample_id = row.at("sample_id").get<std::string>();
      e.candidate = row.at("candidate").get<std::string>();
      e.cider_d = row.at("cider_d").get<double>();
      e.stub_target = row.at("stub_target").get<double>();
      e.stub_receptacle = row.at("stub_receptacle").get<double>();
      e.bleu.matches = row.at("bleu_matches").get<std::array<double, kMaxOrder>>();
      e.bleu.totals = row.at("bleu_totals").get<std::array<double, kMaxOrder>>();
      e.bleu.candidate_length = row.at("candidate_length").get<double>();
      e.bleu.reference_length = row.at("reference_length").get<double>();
      r.rows.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("evaluation report: ") + e.what());
  }
  return r;
}

}  // namespace instrgen::metrics
