#pragma once

// Parameter registry and the small set of layers the model is built from.

#include "instrgen/autograd.hpp"
#include "instrgen/rng.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace instrgen::nn {

using ag::Var;

// Owns every named parameter of a model. Names are unique; a layer that is
// used in two places (the shared self-attention) is registered once.
class ParameterRegistry {
 public:
  ParamPtr add(const std::string& name, Matrix init);
  ParamPtr normal(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                  double stddev, Rng& rng);
  ParamPtr zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  ParamPtr ones(const std::string& name, Eigen::Index rows, Eigen::Index cols);

  const std::vector<ParamPtr>& all() const { return params_; }
  ParamPtr find(const std::string& name) const;
  ParamPtr get(const std::string& name) const;  // throws if absent
  std::vector<ParamPtr> with_prefix(const std::string& prefix) const;

  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::vector<ParamPtr> params_;
  std::map<std::string, std::size_t> index_;
};

struct Linear {
  ParamPtr weight;  // in x out
  ParamPtr bias;    // 1 x out

  Linear() = default;
  Linear(ParameterRegistry& reg, const std::string& name, Eigen::Index in,
         Eigen::Index out, Rng& rng);
  Var operator()(const Var& x) const;
  Eigen::Index in_features() const { return weight->value.rows(); }
  Eigen::Index out_features() const { return weight->value.cols(); }
};

struct LayerNorm {
  ParamPtr gamma;
  ParamPtr beta;

  LayerNorm() = default;
  LayerNorm(ParameterRegistry& reg, const std::string& name, Eigen::Index width);
  Var operator()(const Var& x) const;
};

// Multi-head scaled dot-product attention with separate query/key/value and
// output projections.
struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterRegistry& reg, const std::string& name,
                     Eigen::Index width, int heads, Rng& rng);
  Var operator()(const Var& query, const Var& context, bool causal = false) const;
};

struct FeedForward {
  Linear up, down;

  FeedForward() = default;
  FeedForward(ParameterRegistry& reg, const std::string& name, Eigen::Index width,
              Eigen::Index hidden, Rng& rng);
  Var operator()(const Var& x) const;
};

}  // namespace instrgen::nn
