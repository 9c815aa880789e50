#pragma once

// Caption metrics computed from scratch: CIDEr-D, corpus BLEU-4, and a
// pluggable learned-metric interface with a deterministic stub scorer.

#include <array>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace instrgen::metrics {

using Tokens = std::vector<std::string>;

// Lowercases, splits the punctuation marks . , ? ! ; : into their own
// tokens and collapses whitespace.
Tokens tokenize(std::string_view text);
std::string join(const Tokens& tokens);

constexpr int kMaxOrder = 4;

// n-gram counts for n = 1..4; index 0 holds unigrams. Keys join the words
// with a unit separator.
using NGramCounts = std::array<std::map<std::string, int>, kMaxOrder>;
NGramCounts count_ngrams(const Tokens& tokens);

struct CiderOptions {
  double sigma = 6.0;
  bool d_variant = true;  // count clipping and Gaussian length penalty
};

// Document frequencies over a reference corpus: df(g) is the number of
// reference sets (samples) in which n-gram g occurs at least once.
class DocumentFrequency {
 public:
  DocumentFrequency() = default;
  explicit DocumentFrequency(const std::vector<std::vector<std::string>>& reference_sets);

  int df(const std::string& ngram) const;
  std::size_t corpus_size() const { return corpus_size_; }
  // log(M) - log(max(1, df)). A one-set corpus uses 1 in place of log(1).
  double idf(const std::string& ngram) const;

 private:
  std::map<std::string, int> df_;
  std::size_t corpus_size_ = 0;
  double log_corpus_size_ = 0.0;
};

// Scores single candidates against their references with a fixed
// document-frequency table.
class CiderScorer {
 public:
  explicit CiderScorer(DocumentFrequency df, CiderOptions options = {});
  double score(const std::string& candidate, const std::vector<std::string>& references) const;
  const DocumentFrequency& document_frequency() const { return df_; }

 private:
  DocumentFrequency df_;
  CiderOptions options_;
};

struct CiderResult {
  std::vector<double> per_sample;
  double corpus = 0.0;
};

// IDF comes from the references of the evaluated corpus itself.
CiderResult cider_d(const std::vector<std::string>& candidates,
                    const std::vector<std::vector<std::string>>& references,
                    CiderOptions options = {});

struct BleuStats {
  std::array<double, kMaxOrder> matches{};
  std::array<double, kMaxOrder> totals{};
  double candidate_length = 0.0;
  double reference_length = 0.0;  // closest reference length, ties to the shorter

  BleuStats& operator+=(const BleuStats& other);
};

BleuStats bleu_stats(const std::string& candidate, const std::vector<std::string>& references);
double bleu_from_stats(const BleuStats& total, bool smooth = false);
double bleu4(const std::vector<std::string>& candidates,
             const std::vector<std::vector<std::string>>& references, bool smooth = false);

enum class ImageSide { kTarget, kReceptacle };

std::string to_string(ImageSide side);

// Ground-truth attribute words visible in one image (color, category,
// material, room ...).
struct ImageAttributes {
  std::vector<std::string> words;
};

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::string name() const = 0;
  // Bounded in [0, 1] and deterministic.
  virtual double score(const std::string& candidate, const std::vector<std::string>& references,
                       ImageSide side, const ImageAttributes& image) const = 0;
};

double unigram_f1(const std::string& candidate, const std::vector<std::string>& references);

// 0.5 * best unigram F1 against the references + 0.5 * fraction of the
// image's attribute words that appear in the candidate.
class StubPolosScorer final : public Scorer {
 public:
  std::string name() const override { return "stub"; }
  double score(const std::string& candidate, const std::vector<std::string>& references,
               ImageSide side, const ImageAttributes& image) const override;
};

class ScorerRegistry {
 public:
  ScorerRegistry();  // registers the stub
  void add(std::shared_ptr<const Scorer> scorer);
  // Throws ScorerUnavailable for unknown names.
  std::shared_ptr<const Scorer> get(const std::string& name) const;

 private:
  std::map<std::string, std::shared_ptr<const Scorer>> scorers_;
};

struct EvalInput {
  std::string sample_id;
  std::vector<std::string> references;
  ImageAttributes target;
  ImageAttributes receptacle;
};

struct EvalRow {
  std::string sample_id;
  std::string candidate;
  double cider_d = 0.0;
  double stub_target = 0.0;
  double stub_receptacle = 0.0;
  BleuStats bleu;
};

struct EvalReport {
  double cider_d = 0.0;
  double bleu4 = 0.0;
  double stub_target = 0.0;
  double stub_receptacle = 0.0;
  std::vector<EvalRow> rows;
};

// generations maps sample_id to the candidate sentence. Throws CoverageGap
// naming the first dataset sample with no generation.
EvalReport evaluate(const std::vector<EvalInput>& dataset,
                    const std::map<std::string, std::string>& generations, const Scorer& scorer,
                    CiderOptions options = {});

std::string report_to_json(const EvalReport& report, const std::string& config_hash = "");
EvalReport report_from_json(const std::string& text);

}  // namespace instrgen::metrics
