#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices. Every value is a 2-D matrix; scalars are 1x1.
//
// A Var is a handle to a graph node. Ops build new nodes that remember their
// parents and a backward closure. backward(root) runs the closures in reverse
// topological order and accumulates gradients into every node that requires
// them. Parameters are leaf Vars created with requires_grad = true; their
// gradients persist across backward() calls until zero_grad().

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cahqp::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return grad.size() != 0; }
  Matrix& grad_buffer() {
    if (!has_grad()) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  static Var scalar(double v);
  static Var zeros(Eigen::Index rows, Eigen::Index cols);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  // Only meaningful for leaves (parameters, inputs).
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  void zero_grad() const { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
  friend Var make_op(Matrix, std::vector<Var>, std::function<void(Node&)>);
};

// Builds an op node. The closure receives the node itself; parent gradients
// should only be touched when parent->requires_grad is set.
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
void backward(const Var& root);

// While alive, ops record no graph (inference mode). Thread-local.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// ---- arithmetic -------------------------------------------------------------
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var div(const Var& a, const Var& b);  // elementwise
Var add_row(const Var& a, const Var& row);  // broadcast a [m x n] + row [1 x n]
Var mul_row(const Var& a, const Var& row);  // a[i, j] * row[j]
Var mul_col(const Var& a, const Var& col);  // a[i, j] * col[i]
Var add_const(const Var& a, const Matrix& c);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);
Var transpose(const Var& a);

// ---- nonlinearities ---------------------------------------------------------
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var abs(const Var& a);
Var log(const Var& a);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

// ---- reductions and reshaping -----------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var mean_rows(const Var& a);  // [m x n] -> [1 x n]
Var max_rows(const Var& a);   // [m x n] -> [1 x n]
Var mean_cols(const Var& a);  // [m x n] -> [m x 1]
Var max_cols(const Var& a);   // [m x n] -> [m x 1]
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index begin, Eigen::Index count);
Var gather_rows(const Var& a, std::span<const int> indices);

// ---- gradient routing -------------------------------------------------------
Var detach(const Var& a);
// Identity forward; backward multiplies the incoming gradient by -strength.
Var gradient_reversal(const Var& a, double strength);

// ---- fused losses -----------------------------------------------------------
// Weighted mean of per-row cross-entropy: sum_i w_i * -log softmax(x_i)[t_i] / sum_i w_i.
Var cross_entropy(const Var& logits, std::span<const int> targets, std::span<const double> weights);
// Mean over entries of -(t log p + (1 - t) log(1 - p)), p clamped to [clamp, 1 - clamp].
Var binary_cross_entropy(const Var& prob, double label, double clamp = 1e-7);

// ---- convolution ------------------------------------------------------------
// x: [height * width x in_channels] in row-major spatial order.
// weight: [kernel * kernel * in_channels x out_channels], rows ordered (ky, kx, c).
// Output: [out_h * out_w x out_channels] with out = (in + 2 pad - kernel) / stride + 1.
Var conv2d(const Var& x, int height, int width, const Var& weight, int kernel, int stride, int pad);
int conv_output_extent(int extent, int kernel, int stride, int pad);

}  // namespace cahqp::ag
