#pragma once

#include "instrgen/autograd.hpp"

#include <vector>

namespace instrgen {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

// Adam over a fixed parameter list. Frozen parameters are skipped.
class Adam {
 public:
  Adam(std::vector<ParamPtr> params, AdamOptions options);

  void step();
  void zero_grad();
  const std::vector<ParamPtr>& params() const { return params_; }
  long steps() const { return t_; }

 private:
  std::vector<ParamPtr> params_;
  AdamOptions opt_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

}  // namespace instrgen
