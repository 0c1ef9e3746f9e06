#include "cahqp/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace cahqp::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

Node& parent(Node& n, size_t i) { return *n.parents[i]; }

}  // namespace

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Var(std::move(m));
}

Var Var::zeros(Eigen::Index rows, Eigen::Index cols) { return Var(Matrix::Zero(rows, cols)); }

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("item() on non-scalar Var");
  return node_->value(0, 0);
}

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.defined() || root.rows() != 1 || root.cols() != 1) {
    throw std::logic_error("backward() requires a 1x1 root");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- arithmetic -------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix v = a.value() * b.value();
  return make_op(std::move(v), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.grad_buffer().noalias() += n.grad * pb.value.transpose();
    if (pb.requires_grad) pb.grad_buffer().noalias() += pa.value.transpose() * n.grad;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Matrix v = a.value() * b.value().transpose();
  return make_op(std::move(v), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.grad_buffer().noalias() += n.grad * pb.value;
    if (pb.requires_grad) pb.grad_buffer().noalias() += n.grad.transpose() * pa.value;
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
    for (size_t i = 0; i < 2; ++i) {
      if (parent(n, i).requires_grad) parent(n, i).grad_buffer() += n.grad;
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).grad_buffer() += n.grad;
    if (parent(n, 1).requires_grad) parent(n, 1).grad_buffer() -= n.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Matrix v = a.value().cwiseProduct(b.value());
  return make_op(std::move(v), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.grad_buffer() += n.grad.cwiseProduct(pb.value);
    if (pb.requires_grad) pb.grad_buffer() += n.grad.cwiseProduct(pa.value);
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  Matrix v = a.value().cwiseQuotient(b.value());
  return make_op(std::move(v), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.grad_buffer() += n.grad.cwiseQuotient(pb.value);
    if (pb.requires_grad) {
      pb.grad_buffer().array() -= n.grad.array() * n.value.array() / pb.value.array();
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return make_op(std::move(v), {a, row}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).grad_buffer() += n.grad;
    if (parent(n, 1).requires_grad) parent(n, 1).grad_buffer() += n.grad.colwise().sum();
  });
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("mul_row: shape mismatch");
  Matrix v = a.value().array().rowwise() * row.value().row(0).array();
  return make_op(std::move(v), {a, row}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pr = parent(n, 1);
    if (pa.requires_grad) pa.grad_buffer().array() += n.grad.array().rowwise() * pr.value.row(0).array();
    if (pr.requires_grad) pr.grad_buffer() += n.grad.cwiseProduct(pa.value).colwise().sum();
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw std::invalid_argument("mul_col: shape mismatch");
  Matrix v = a.value().array().colwise() * col.value().col(0).array();
  return make_op(std::move(v), {a, col}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pc = parent(n, 1);
    if (pa.requires_grad) pa.grad_buffer().array() += n.grad.array().colwise() * pc.value.col(0).array();
    if (pc.requires_grad) pc.grad_buffer() += n.grad.cwiseProduct(pa.value).rowwise().sum();
  });
}

Var add_const(const Var& a, const Matrix& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw std::invalid_argument("add_const: shape mismatch");
  return make_op(a.value() + c, {a}, [](Node& n) { parent(n, 0).grad_buffer() += n.grad; });
}

Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a}, [s](Node& n) { parent(n, 0).grad_buffer() += n.grad * s; });
}

Var add_scalar(const Var& a, double s) {
  Matrix v = a.value().array() + s;
  return make_op(std::move(v), {a}, [](Node& n) { parent(n, 0).grad_buffer() += n.grad; });
}

Var minimum(const Var& a, const Var& b) {
  require_same_shape(a, b, "minimum");
  Matrix v = a.value().cwiseMin(b.value());
  return make_op(std::move(v), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    const auto take_a = (pa.value.array() <= pb.value.array());
    if (pa.requires_grad) pa.grad_buffer().array() += take_a.select(n.grad.array(), 0.0);
    if (pb.requires_grad) pb.grad_buffer().array() += take_a.select(0.0, n.grad.array());
  });
}

Var maximum(const Var& a, const Var& b) {
  require_same_shape(a, b, "maximum");
  Matrix v = a.value().cwiseMax(b.value());
  return make_op(std::move(v), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    const auto take_a = (pa.value.array() >= pb.value.array());
    if (pa.requires_grad) pa.grad_buffer().array() += take_a.select(n.grad.array(), 0.0);
    if (pb.requires_grad) pb.grad_buffer().array() += take_a.select(0.0, n.grad.array());
  });
}

Var transpose(const Var& a) {
  Matrix v = a.value().transpose();
  return make_op(std::move(v), {a}, [](Node& n) { parent(n, 0).grad_buffer() += n.grad.transpose(); });
}

// ---- nonlinearities ---------------------------------------------------------

Var relu(const Var& a) {
  Matrix v = a.value().cwiseMax(0.0);
  return make_op(std::move(v), {a}, [](Node& n) {
    parent(n, 0).grad_buffer().array() += (n.value.array() > 0.0).select(n.grad.array(), 0.0);
  });
}

Var sigmoid(const Var& a) {
  Matrix v = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return make_op(std::move(v), {a}, [](Node& n) {
    parent(n, 0).grad_buffer().array() += n.grad.array() * n.value.array() * (1.0 - n.value.array());
  });
}

Var abs(const Var& a) {
  Matrix v = a.value().cwiseAbs();
  return make_op(std::move(v), {a}, [](Node& n) {
    Node& pa = parent(n, 0);
    pa.grad_buffer().array() += n.grad.array() * pa.value.array().sign();
  });
}

Var log(const Var& a) {
  Matrix v = a.value().array().log();
  return make_op(std::move(v), {a}, [](Node& n) {
    Node& pa = parent(n, 0);
    pa.grad_buffer().array() += n.grad.array() / pa.value.array();
  });
}

namespace {

Matrix softmax_rows_value(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

}  // namespace

Var softmax_rows(const Var& a) {
  return make_op(softmax_rows_value(a.value()), {a}, [](Node& n) {
    const Matrix& y = n.value;
    Eigen::VectorXd dots = n.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = (n.grad.colwise() - dots).cwiseProduct(y);
    parent(n, 0).grad_buffer() += g;
  });
}

Var log_softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix v(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    v.row(i) = x.row(i).array() - lse;
  }
  return make_op(std::move(v), {a}, [](Node& n) {
    Matrix p = n.value.array().exp();
    Eigen::VectorXd gsum = n.grad.rowwise().sum();
    Matrix g = n.grad - (p.array().colwise() * gsum.array()).matrix();
    parent(n, 0).grad_buffer() += g;
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
    throw std::invalid_argument("layer_norm: affine shape mismatch");
  }
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return make_op(std::move(v), {x, gamma, beta}, [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
    Node& px = parent(n, 0);
    Node& pg = parent(n, 1);
    Node& pb = parent(n, 2);
    if (pg.requires_grad) pg.grad_buffer() += n.grad.cwiseProduct(xhat).colwise().sum();
    if (pb.requires_grad) pb.grad_buffer() += n.grad.colwise().sum();
    if (px.requires_grad) {
      const double d = static_cast<double>(xhat.cols());
      Matrix gxhat = n.grad.array().rowwise() * pg.value.row(0).array();
      Matrix& out = px.grad_buffer();
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        const double mean_g = gxhat.row(i).mean();
        const double mean_gx = gxhat.row(i).dot(xhat.row(i)) / d;
        out.row(i).array() += inv_std(i) * (gxhat.row(i).array() - mean_g - xhat.row(i).array() * mean_gx);
      }
    }
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  Eigen::VectorXd norms = a.value().rowwise().norm();
  Matrix v(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) v.row(i) = a.value().row(i) / std::max(norms(i), eps);
  return make_op(std::move(v), {a}, [norms = std::move(norms), eps](Node& n) {
    Matrix& out = parent(n, 0).grad_buffer();
    for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
      if (norms(i) > eps) {
        const double proj = n.value.row(i).dot(n.grad.row(i));
        out.row(i) += (n.grad.row(i) - n.value.row(i) * proj) / norms(i);
      } else {
        out.row(i) += n.grad.row(i) / eps;
      }
    }
  });
}

// ---- reductions and reshaping -----------------------------------------------

Var sum(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return make_op(std::move(v), {a}, [](Node& n) { parent(n, 0).grad_buffer().array() += n.grad(0, 0); });
}

Var mean(const Var& a) {
  Matrix v(1, 1);
  const double count = static_cast<double>(a.value().size());
  v(0, 0) = a.value().sum() / count;
  return make_op(std::move(v), {a}, [count](Node& n) {
    parent(n, 0).grad_buffer().array() += n.grad(0, 0) / count;
  });
}

Var mean_rows(const Var& a) {
  const double count = static_cast<double>(a.rows());
  Matrix v = a.value().colwise().sum() / count;
  return make_op(std::move(v), {a}, [count](Node& n) {
    parent(n, 0).grad_buffer().rowwise() += n.grad.row(0) / count;
  });
}

Var max_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix v(1, x.cols());
  std::vector<Eigen::Index> arg(static_cast<size_t>(x.cols()));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    Eigen::Index r = 0;
    v(0, j) = x.col(j).maxCoeff(&r);
    arg[static_cast<size_t>(j)] = r;
  }
  return make_op(std::move(v), {a}, [arg = std::move(arg)](Node& n) {
    Matrix& out = parent(n, 0).grad_buffer();
    for (size_t j = 0; j < arg.size(); ++j) out(arg[j], static_cast<Eigen::Index>(j)) += n.grad(0, static_cast<Eigen::Index>(j));
  });
}

Var mean_cols(const Var& a) {
  const double count = static_cast<double>(a.cols());
  Matrix v = a.value().rowwise().sum() / count;
  return make_op(std::move(v), {a}, [count](Node& n) {
    parent(n, 0).grad_buffer().colwise() += n.grad.col(0) / count;
  });
}

Var max_cols(const Var& a) {
  const Matrix& x = a.value();
  Matrix v(x.rows(), 1);
  std::vector<Eigen::Index> arg(static_cast<size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index c = 0;
    v(i, 0) = x.row(i).maxCoeff(&c);
    arg[static_cast<size_t>(i)] = c;
  }
  return make_op(std::move(v), {a}, [arg = std::move(arg)](Node& n) {
    Matrix& out = parent(n, 0).grad_buffer();
    for (size_t i = 0; i < arg.size(); ++i) out(static_cast<Eigen::Index>(i), arg[i]) += n.grad(static_cast<Eigen::Index>(i), 0);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op(std::move(v), std::vector<Var>(parts.begin(), parts.end()), [offsets = std::move(offsets)](Node& n) {
    for (size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = *n.parents[i];
      if (p.requires_grad) p.grad_buffer() += n.grad.middleRows(offsets[i], p.value.rows());
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op(std::move(v), std::vector<Var>(parts.begin(), parts.end()), [offsets = std::move(offsets)](Node& n) {
    for (size_t i = 0; i < n.parents.size(); ++i) {
      Node& p = *n.parents[i];
      if (p.requires_grad) p.grad_buffer() += n.grad.middleCols(offsets[i], p.value.cols());
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw std::out_of_range("slice_rows: range");
  Matrix v = a.value().middleRows(begin, count);
  return make_op(std::move(v), {a}, [begin, count](Node& n) {
    parent(n, 0).grad_buffer().middleRows(begin, count) += n.grad;
  });
}

Var slice_cols(const Var& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) throw std::out_of_range("slice_cols: range");
  Matrix v = a.value().middleCols(begin, count);
  return make_op(std::move(v), {a}, [begin, count](Node& n) {
    parent(n, 0).grad_buffer().middleCols(begin, count) += n.grad;
  });
}

Var gather_rows(const Var& a, std::span<const int> indices) {
  Matrix v(static_cast<Eigen::Index>(indices.size()), a.cols());
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= a.rows()) throw std::out_of_range("gather_rows: index");
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return make_op(std::move(v), {a}, [idx = std::move(idx)](Node& n) {
    Matrix& out = parent(n, 0).grad_buffer();
    for (size_t i = 0; i < idx.size(); ++i) out.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
  });
}

// ---- gradient routing -------------------------------------------------------

Var detach(const Var& a) { return Var(a.value()); }

Var gradient_reversal(const Var& a, double strength) {
  return make_op(a.value(), {a}, [strength](Node& n) { parent(n, 0).grad_buffer() -= strength * n.grad; });
}

// ---- fused losses -----------------------------------------------------------

Var cross_entropy(const Var& logits, std::span<const int> targets, std::span<const double> weights) {
  const Eigen::Index rows = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != rows || static_cast<Eigen::Index>(weights.size()) != rows) {
    throw std::invalid_argument("cross_entropy: targets/weights length mismatch");
  }
  Matrix probs = softmax_rows_value(logits.value());
  double total_w = 0.0;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= logits.cols()) throw std::out_of_range("cross_entropy: target class");
    const double w = weights[static_cast<size_t>(i)];
    const double m = logits.value().row(i).maxCoeff();
    const double lse = m + std::log((logits.value().row(i).array() - m).exp().sum());
    loss += w * (lse - logits.value()(i, t));
    total_w += w;
  }
  if (total_w <= 0.0) throw std::invalid_argument("cross_entropy: non-positive total weight");
  Matrix v(1, 1);
  v(0, 0) = loss / total_w;
  std::vector<int> t(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return make_op(std::move(v), {logits},
                 [probs = std::move(probs), t = std::move(t), w = std::move(w), total_w](Node& n) {
                   Matrix& out = parent(n, 0).grad_buffer();
                   const double g = n.grad(0, 0) / total_w;
                   for (Eigen::Index i = 0; i < probs.rows(); ++i) {
                     const double s = g * w[static_cast<size_t>(i)];
                     out.row(i) += s * probs.row(i);
                     out(i, t[static_cast<size_t>(i)]) -= s;
                   }
                 });
}

Var binary_cross_entropy(const Var& prob, double label, double clamp) {
  const Matrix& p = prob.value();
  const double count = static_cast<double>(p.size());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p.data()[i], clamp, 1.0 - clamp);
    loss -= label * std::log(q) + (1.0 - label) * std::log(1.0 - q);
  }
  Matrix v(1, 1);
  v(0, 0) = loss / count;
  return make_op(std::move(v), {prob}, [label, clamp, count](Node& n) {
    Node& pp = parent(n, 0);
    Matrix& out = pp.grad_buffer();
    const double g = n.grad(0, 0) / count;
    for (Eigen::Index i = 0; i < pp.value.size(); ++i) {
      const double q = pp.value.data()[i];
      if (q <= clamp || q >= 1.0 - clamp) continue;
      out.data()[i] += g * (-label / q + (1.0 - label) / (1.0 - q));
    }
  });
}

// ---- convolution ------------------------------------------------------------

int conv_output_extent(int extent, int kernel, int stride, int pad) {
  return (extent + 2 * pad - kernel) / stride + 1;
}

Var conv2d(const Var& x, int height, int width, const Var& weight, int kernel, int stride, int pad) {
  const Eigen::Index channels = x.cols();
  if (x.rows() != static_cast<Eigen::Index>(height) * width) throw std::invalid_argument("conv2d: spatial size mismatch");
  if (weight.rows() != static_cast<Eigen::Index>(kernel) * kernel * channels) {
    throw std::invalid_argument("conv2d: weight rows must equal kernel*kernel*in_channels");
  }
  const int out_h = conv_output_extent(height, kernel, stride, pad);
  const int out_w = conv_output_extent(width, kernel, stride, pad);
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("conv2d: empty output");

  Matrix col = Matrix::Zero(static_cast<Eigen::Index>(out_h) * out_w, weight.rows());
  const Matrix& xv = x.value();
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * out_w + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= height) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= width) continue;
          col.row(r).segment((static_cast<Eigen::Index>(ky) * kernel + kx) * channels, channels) =
              xv.row(static_cast<Eigen::Index>(iy) * width + ix);
        }
      }
    }
  }
  Matrix v = col * weight.value();
  auto backward_fn = [col = std::move(col), height, width, kernel, stride, pad, out_h, out_w,
                      channels](Node& n) {
    Node& px = parent(n, 0);
    Node& pw = parent(n, 1);
    if (pw.requires_grad) pw.grad_buffer().noalias() += col.transpose() * n.grad;
    if (!px.requires_grad) return;
    Matrix gcol = n.grad * pw.value.transpose();
    Matrix& out = px.grad_buffer();
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        const Eigen::Index r = static_cast<Eigen::Index>(oy) * out_w + ox;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= width) continue;
            out.row(static_cast<Eigen::Index>(iy) * width + ix) +=
                gcol.row(r).segment((static_cast<Eigen::Index>(ky) * kernel + kx) * channels, channels);
          }
        }
      }
    }
  };
  return make_op(std::move(v), {x, weight}, std::move(backward_fn));
}

}  // namespace cahqp::ag
