#include "instrgen/autograd.hpp"

#include "instrgen/errors.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

namespace instrgen::ag {
namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const char* what) {
  if (!cond) throw ShapeMismatch(what);
}

// Builds a result node. Parents and the backward closure are retained only
// when recording is on and some parent carries a gradient.
Var make(Matrix value, std::vector<Var> parents,
         std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.shared());
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

Matrix softmax_of(const Matrix& x, bool causal) {
  Matrix p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index width = causal ? std::min<Eigen::Index>(i + 1, x.cols()) : x.cols();
    const double mx = x.row(i).head(width).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < width; ++j) {
      p(i, j) = std::exp(x(i, j) - mx);
      z += p(i, j);
    }
    for (Eigen::Index j = 0; j < width; ++j) p(i, j) /= z;
    for (Eigen::Index j = width; j < x.cols(); ++j) p(i, j) = 0.0;
  }
  return p;
}

Matrix log_softmax_of(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    const double lse = mx + std::log((x.row(i).array() - mx).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  return out;
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

double Var::scalar() const {
  require(node_ && node_->value.size() == 1, "scalar() on a non 1x1 value");
  return node_->value(0, 0);
}

void Var::backward() const {
  require(node_ && node_->value.size() == 1, "backward() requires a 1x1 root");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var param(const ParamPtr& p) {
  auto node = std::make_shared<Node>();
  node->value = p->value;
  if (g_grad_enabled && !p->frozen) {
    node->requires_grad = true;
    node->backward_fn = [p](Node& self) { p->grad += self.grad; };
  }
  return Var(std::move(node));
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul inner dimensions differ");
  return make(a.value() * b.value(), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * self.grad);
  });
}

Var transpose(const Var& a) {
  return make(a.value().transpose(), {a}, [](Node& self) {
    parent(self, 0).accumulate(self.grad.transpose());
  });
}

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add shapes differ");
  return make(a.value() + b.value(), {a, b}, [](Node& self) {
    parent(self, 0).accumulate(self.grad);
    parent(self, 1).accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub shapes differ");
  return make(a.value() - b.value(), {a, b}, [](Node& self) {
    parent(self, 0).accumulate(self.grad);
    parent(self, 1).accumulate(-self.grad);
  });
}

Var hadamard(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard shapes differ");
  return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) pa.accumulate(self.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(self.grad.cwiseProduct(pa.value));
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a}, [s](Node& self) {
    parent(self, 0).accumulate(self.grad * s);
  });
}

Var add_row(const Var& a, const Var& b) {
  require(b.rows() == 1 && b.cols() == a.cols(), "add_row expects a 1 x n bias");
  Matrix out = a.value();
  out.rowwise() += b.value().row(0);
  return make(std::move(out), {a, b}, [](Node& self) {
    parent(self, 0).accumulate(self.grad);
    Node& pb = parent(self, 1);
    if (pb.requires_grad) pb.accumulate(self.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& b) {
  require(b.rows() == 1 && b.cols() == a.cols(), "mul_row expects a 1 x n scale");
  Matrix out = a.value().array().rowwise() * b.value().row(0).array();
  return make(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      pa.accumulate(self.grad.array().rowwise() * pb.value.row(0).array());
    }
    if (pb.requires_grad) {
      pb.accumulate(self.grad.cwiseProduct(pa.value).colwise().sum());
    }
  });
}

Var sum_all(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {a}, [](Node& self) {
    Node& pa = parent(self, 0);
    pa.accumulate(Matrix::Constant(pa.value.rows(), pa.value.cols(), self.grad(0, 0)));
  });
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / n);
}

Var mean_rows(const Var& a) {
  const double m = static_cast<double>(a.rows());
  Matrix out = a.value().colwise().sum() / m;
  return make(std::move(out), {a}, [m](Node& self) {
    Node& pa = parent(self, 0);
    pa.accumulate(self.grad.replicate(pa.value.rows(), 1) / m);
  });
}

Var max_rows(const Var& a) {
  require(a.rows() > 0, "max_rows on an empty matrix");
  const Matrix& v = a.value();
  Matrix out(1, v.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(v.cols()));
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < v.rows(); ++i) {
      if (v(i, j) > v(best, j)) best = i;
    }
    arg[static_cast<std::size_t>(j)] = best;
    out(0, j) = v(best, j);
  }
  return make(std::move(out), {a}, [arg = std::move(arg)](Node& self) {
    Node& pa = parent(self, 0);
    Matrix g = Matrix::Zero(pa.value.rows(), pa.value.cols());
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(arg[static_cast<std::size_t>(j)], j) = self.grad(0, j);
    pa.accumulate(g);
  });
}

Var gelu(const Var& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double kA = 0.044715;
  const Matrix& x = a.value();
  Matrix out = x.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  });
  return make(std::move(out), {a}, [](Node& self) {
    Node& pa = parent(self, 0);
    Matrix d = pa.value.unaryExpr([](double v) {
      const double u = kC * (v + kA * v * v * v);
      const double t = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kA * v * v);
      return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    });
    pa.accumulate(self.grad.cwiseProduct(d));
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm gamma shape");
  require(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm beta shape");
  const Matrix& v = x.value();
  const Eigen::Index n = v.cols();
  Matrix xhat(v.rows(), n);
  Eigen::VectorXd inv_std(v.rows());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double mu = v.row(i).mean();
    const double var = (v.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (v.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x, gamma, beta},
              [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                Node& px = parent(self, 0);
                Node& pg = parent(self, 1);
                Node& pb = parent(self, 2);
                const Matrix& g = self.grad;
                if (pg.requires_grad) pg.accumulate(g.cwiseProduct(xhat).colwise().sum());
                if (pb.requires_grad) pb.accumulate(g.colwise().sum());
                if (px.requires_grad) {
                  Matrix dxhat = g.array().rowwise() * pg.value.row(0).array();
                  Matrix dx(g.rows(), g.cols());
                  for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    const double m1 = dxhat.row(i).mean();
                    const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                    dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i);
                  }
                  px.accumulate(dx);
                }
              });
}

Var softmax_rows(const Var& a, bool causal) {
  Matrix p = softmax_of(a.value(), causal);
  Matrix saved = p;
  return make(std::move(p), {a}, [p = std::move(saved)](Node& self) {
    const Matrix& g = self.grad;
    Eigen::VectorXd dot = g.cwiseProduct(p).rowwise().sum();
    Matrix d = p.array() * (g.colwise() - dot).array();
    parent(self, 0).accumulate(d);
  });
}

Var log_softmax_rows(const Var& a) {
  Matrix out = log_softmax_of(a.value());
  Matrix p = out.array().exp();
  return make(std::move(out), {a}, [p = std::move(p)](Node& self) {
    const Matrix& g = self.grad;
    Eigen::VectorXd total = g.rowwise().sum();
    Matrix d = g - (p.array().colwise() * total.array()).matrix();
    parent(self, 0).accumulate(d);
  });
}

Var normalize_rows(const Var& a, double eps) {
  const Matrix& v = a.value();
  Eigen::VectorXd norms = v.rowwise().norm().array().max(eps);
  Matrix y = v.array().colwise() / norms.array();
  Matrix saved = y;
  return make(std::move(y), {a}, [y = std::move(saved), norms = std::move(norms)](Node& self) {
    const Matrix& g = self.grad;
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = (g - (y.array().colwise() * dot.array()).matrix()).array().colwise() / norms.array();
    parent(self, 0).accumulate(d);
  });
}

Var row_concat(std::span<const Var> parts) {
  require(!parts.empty(), "row_concat of nothing");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, "row_concat widths differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return make(std::move(out), ps, [](Node& self) {
    Eigen::Index r0 = 0;
    for (auto& p : self.parents) {
      const Eigen::Index n = p->value.rows();
      if (p->requires_grad) p->accumulate(self.grad.middleRows(r0, n));
      r0 += n;
    }
  });
}

Var col_concat(std::span<const Var> parts) {
  require(!parts.empty(), "col_concat of nothing");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "col_concat heights differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return make(std::move(out), ps, [](Node& self) {
    Eigen::Index c0 = 0;
    for (auto& p : self.parents) {
      const Eigen::Index n = p->value.cols();
      if (p->requires_grad) p->accumulate(self.grad.middleCols(c0, n));
      c0 += n;
    }
  });
}

Var row_slice(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "row_slice out of range");
  return make(a.value().middleRows(start, count), {a}, [start, count](Node& self) {
    Node& pa = parent(self, 0);
    Matrix g = Matrix::Zero(pa.value.rows(), pa.value.cols());
    g.middleRows(start, count) = self.grad;
    pa.accumulate(g);
  });
}

Var col_slice(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "col_slice out of range");
  return make(a.value().middleCols(start, count), {a}, [start, count](Node& self) {
    Node& pa = parent(self, 0);
    Matrix g = Matrix::Zero(pa.value.rows(), pa.value.cols());
    g.middleCols(start, count) = self.grad;
    pa.accumulate(g);
  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make(std::move(out), {table}, [ids = std::move(saved)](Node& self) {
    Node& pt = parent(self, 0);
    Matrix g = Matrix::Zero(pt.value.rows(), pt.value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    pt.accumulate(g);
  });
}

Var pick_sum(const Var& a, std::span<const std::pair<int, int>> coords) {
  Matrix out(1, 1);
  out(0, 0) = 0.0;
  for (const auto& [r, c] : coords) {
    require(r >= 0 && r < a.rows() && c >= 0 && c < a.cols(), "pick_sum out of range");
    out(0, 0) += a.value()(r, c);
  }
  std::vector<std::pair<int, int>> saved(coords.begin(), coords.end());
  return make(std::move(out), {a}, [coords = std::move(saved)](Node& self) {
    Node& pa = parent(self, 0);
    Matrix g = Matrix::Zero(pa.value.rows(), pa.value.cols());
    for (const auto& [r, c] : coords) g(r, c) += self.grad(0, 0);
    pa.accumulate(g);
  });
}

Var cross_entropy_sum(const Var& logits, std::span<const int> targets) {
  require(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "one target per row");
  Matrix logp = log_softmax_of(logits.value());
  Matrix out(1, 1);
  out(0, 0) = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    require(targets[i] >= 0 && targets[i] < logits.cols(), "target id out of range");
    out(0, 0) -= logp(static_cast<Eigen::Index>(i), targets[i]);
  }
  std::vector<int> saved(targets.begin(), targets.end());
  return make(std::move(out), {logits}, [logp = std::move(logp), t = std::move(saved)](Node& self) {
    Matrix g = logp.array().exp();
    for (std::size_t i = 0; i < t.size(); ++i) g(static_cast<Eigen::Index>(i), t[i]) -= 1.0;
    parent(self, 0).accumulate(g * self.grad(0, 0));
  });
}

Var bce_with_logits(const Var& logit, double label) {
  require(logit.rows() == 1 && logit.cols() == 1, "bce_with_logits expects a 1x1 logit");
  const double z = logit.scalar();
  Matrix out(1, 1);
  out(0, 0) = std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
  return make(std::move(out), {logit}, [z, label](Node& self) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    Matrix g(1, 1);
    g(0, 0) = (s - label) * self.grad(0, 0);
    parent(self, 0).accumulate(g);
  });
}

}  // namespace instrgen::ag
