#include "instrgen/nn.hpp"

#include "instrgen/errors.hpp"

#include <cmath>

namespace instrgen::nn {

ParamPtr ParameterRegistry::add(const std::string& name, Matrix init) {
  if (index_.count(name) != 0) throw ConfigError("duplicate parameter name " + name);
  auto p = std::make_shared<Parameter>(name, std::move(init));
  index_[name] = params_.size();
  params_.push_back(p);
  return p;
}

ParamPtr ParameterRegistry::normal(const std::string& name, Eigen::Index rows,
                                   Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  }
  return add(name, std::move(m));
}

ParamPtr ParameterRegistry::zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  return add(name, Matrix::Zero(rows, cols));
}

ParamPtr ParameterRegistry::ones(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  return add(name, Matrix::Ones(rows, cols));
}

ParamPtr ParameterRegistry::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second];
}

ParamPtr ParameterRegistry::get(const std::string& name) const {
  auto p = find(name);
  if (!p) throw ConfigError("no parameter named " + name);
  return p;
}

std::vector<ParamPtr> ParameterRegistry::with_prefix(const std::string& prefix) const {
  std::vector<ParamPtr> out;
  for (const auto& p : params_) {
    if (p->name.compare(0, prefix.size(), prefix) == 0) out.push_back(p);
  }
  return out;
}

void ParameterRegistry::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::size_t ParameterRegistry::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

Linear::Linear(ParameterRegistry& reg, const std::string& name, Eigen::Index in,
               Eigen::Index out, Rng& rng)
    : weight(reg.normal(name + ".weight", in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
      bias(reg.zeros(name + ".bias", 1, out)) {}

Var Linear::operator()(const Var& x) const {
  return ag::add_row(ag::matmul(x, ag::param(weight)), ag::param(bias));
}

LayerNorm::LayerNorm(ParameterRegistry& reg, const std::string& name, Eigen::Index width)
    : gamma(reg.ones(name + ".gamma", 1, width)), beta(reg.zeros(name + ".beta", 1, width)) {}

Var LayerNorm::operator()(const Var& x) const {
  return ag::layer_norm(x, ag::param(gamma), ag::param(beta));
}

MultiHeadAttention::MultiHeadAttention(ParameterRegistry& reg, const std::string& name,
                                       Eigen::Index width, int heads_, Rng& rng)
    : q(reg, name + ".q", width, width, rng),
      k(reg, name + ".k", width, width, rng),
      v(reg, name + ".v", width, width, rng),
      o(reg, name + ".o", width, width, rng),
      heads(heads_) {
  if (heads <= 0 || width % heads != 0) {
    throw ConfigError("attention width must be divisible by the head count");
  }
}

Var MultiHeadAttention::operator()(const Var& query, const Var& context, bool causal) const {
  const Var qs = q(query);
  const Var ks = k(context);
  const Var vs = v(context);
  const Eigen::Index head_dim = qs.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Var qh = ag::col_slice(qs, h * head_dim, head_dim);
    const Var kh = ag::col_slice(ks, h * head_dim, head_dim);
    const Var vh = ag::col_slice(vs, h * head_dim, head_dim);
    const Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_sqrt);
    outs.push_back(ag::matmul(ag::softmax_rows(scores, causal), vh));
  }
  return o(heads == 1 ? outs.front() : ag::col_concat(outs));
}

FeedForward::FeedForward(ParameterRegistry& reg, const std::string& name, Eigen::Index width,
                         Eigen::Index hidden, Rng& rng)
    : up(reg, name + ".up", width, hidden, rng), down(reg, name + ".down", hidden, width, rng) {}

Var FeedForward::operator()(const Var& x) const { return down(ag::gelu(up(x))); }

}  // namespace instrgen::nn
