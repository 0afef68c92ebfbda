#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rise/tensor.hpp"

namespace rise::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode graph.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return grad.shape() == value.shape() && grad.numel() == value.numel(); }
  Tensor& ensure_grad();
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const { return node_->value.item(); }

  Node* get() const { return node_.get(); }
  const NodePtr& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  NodePtr node_;
};

/// Leaf that takes no gradient.
Var constant(Tensor value);
/// Trainable leaf.
Var parameter(Tensor value);

/// Disables graph recording on this thread while alive.
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

// Binary elementwise ops. `b` may match `a` exactly, be a scalar, a row
// (1 x cols) or a column (rows x 1); it is broadcast over `a`.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

Var matmul(const Var& a, const Var& b);
/// x W + b with b a 1 x out row, fused into one node.
Var affine(const Var& x, const Var& w, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var square(const Var& a);
/// Values clipped to [lo, hi]; gradient is zero where clipping is active.
Var clamp(const Var& a, double lo, double hi);

/// Sum of all entries, shape [].
Var sum(const Var& a);
/// Mean of all entries, shape [].
Var mean(const Var& a);
/// Per-row sum over columns, shape rows x 1.
Var row_sum(const Var& a);
/// Per-row log((1/cols) sum exp(.)) over columns, shape rows x 1.
Var log_mean_exp_rows(const Var& a);

/// Horizontal concatenation of matrices with equal row counts.
Var concat_cols(const std::vector<Var>& parts);
/// Columns [start, start + count).
Var slice_cols(const Var& a, std::size_t start, std::size_t count);
Var reshape(const Var& a, Shape shape);

/// out.row(i) = a.row(index[i]).
Var gather_rows(const Var& a, std::vector<std::size_t> index);
/// Flat gather: out[i] = a[index[i]], or 0 where index[i] < 0.
Var gather(const Var& a, std::vector<std::int64_t> index, Shape out_shape);
/// out.row(s) = sum of a.row(i) over i with segment[i] == s.
Var segment_sum(const Var& a, std::vector<std::size_t> segment, std::size_t n_segments);
/// Like segment_sum but divided by the segment size; empty segments give 0.
Var segment_mean(const Var& a, std::vector<std::size_t> segment, std::size_t n_segments);

/// Elementwise log N(x; mu, sigma^2). All three operands share one shape.
Var gaussian_log_pdf(const Var& x, const Var& mu, const Var& sigma);

/// Reverse pass from a scalar loss. Gradients of every node reachable from
/// `loss` are reset before accumulation.
void backward(const Var& loss);

/// log((1/m) sum exp(v_i)) with max-shift; entries may be -inf.
double log_mean_exp(std::span<const double> v);

/// Max relative error between the reverse-mode gradient of `f` at `x` and
/// central differences with step `h`. Denominator is
/// max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double h = 1e-5);

}  // namespace rise::ad
