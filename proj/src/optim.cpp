#include "instrgen/optim.hpp"

#include <cmath>

namespace instrgen {

Adam::Adam(std::vector<ParamPtr> params, AdamOptions options)
    : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++t_;
  double scale = 1.0;
  if (opt_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params_) {
      if (!p->frozen) sq += p->grad.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > opt_.clip_norm) scale = opt_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    if (p.frozen) continue;
    const Matrix g = p.grad * scale;
    m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
    v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
    const Matrix mhat = m_[i] / bc1;
    const Matrix vhat = v_[i] / bc2;
    p.value.array() -= opt_.learning_rate * mhat.array() / (vhat.array().sqrt() + opt_.epsilon);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

}  // namespace instrgen
