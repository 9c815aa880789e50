#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// Every operation produces a Var that owns its value and, when gradients are
// enabled, a closure that scatters the incoming gradient into its parents.
// The graph lives exactly as long as the root Var that references it.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace instrgen {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool frozen = false;

  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParamPtr = std::shared_ptr<Parameter>;

namespace ag {

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  // Adds g into this node's gradient, allocating on first touch.
  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  // Back-propagates from a 1x1 root. Parameter leaves accumulate into
  // Parameter::grad; call Parameter::zero_grad between steps.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Gradient recording is on by default; NoGradGuard turns it off for the
// enclosing scope on the current thread (generation, evaluation).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Matrix value);
Var param(const ParamPtr& p);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// a (m x n) + b (1 x n) broadcast over rows.
Var add_row(const Var& a, const Var& b);
// a (m x n) scaled per column by b (1 x n) broadcast over rows.
Var mul_row(const Var& a, const Var& b);
Var sum_all(const Var& a);
Var mean_all(const Var& a);
// Column-wise mean: (m x n) -> (1 x n).
Var mean_rows(const Var& a);
// Column-wise max: (m x n) -> (1 x n); the gradient goes to the first argmax.
Var max_rows(const Var& a);

Var gelu(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Row-wise softmax. With causal set, entry (i, j) is masked when j > i.
Var softmax_rows(const Var& a, bool causal = false);
Var log_softmax_rows(const Var& a);
Var normalize_rows(const Var& a, double eps = 1e-12);

Var row_concat(std::span<const Var> parts);
Var col_concat(std::span<const Var> parts);
Var row_slice(const Var& a, Eigen::Index start, Eigen::Index count);
Var col_slice(const Var& a, Eigen::Index start, Eigen::Index count);

// Rows of a table selected by id: result row i is table.row(ids[i]).
Var gather_rows(const Var& table, std::span<const int> ids);
// Sum of a(row_i, col_i) for the given coordinates -> 1x1.
Var pick_sum(const Var& a, std::span<const std::pair<int, int>> coords);
// Sum over rows of -log softmax(logits)[row, target[row]] -> 1x1.
Var cross_entropy_sum(const Var& logits, std::span<const int> targets);
// Binary cross-entropy with logits for a 1x1 logit and a {0,1} label.
Var bce_with_logits(const Var& logit, double label);

}  // namespace ag
}  // namespace instrgen
