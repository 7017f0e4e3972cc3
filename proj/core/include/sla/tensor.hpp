#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sla {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized lazily, same length as values
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Pulls this node's grad into the parents' grads. Only set on nodes
  // produced by an operation with at least one grad-tracking operand.
  std::function<void(TensorNode&)> backprop;

  std::size_t size() const { return values.size(); }
  bool is_leaf() const { return parents.empty(); }
  void ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor of 64-bit floats with reverse-mode automatic
/// differentiation. Copying a Tensor copies the handle, not the buffer;
/// operations build a graph of nodes that backward() walks in reverse
/// topological order.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->size(); }
  std::size_t rank() const { return node_->shape.size(); }

  std::span<const double> values() const { return node_->values; }
  std::span<double> values_mut() { return node_->values; }
  double value_at(std::size_t flat_index) const { return node_->values[flat_index]; }
  double scalar_value() const;

  bool requires_grad() const { return node_->requires_grad; }
  /// Gradient buffer; empty span until a backward pass has reached this
  /// tensor.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->grad.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  /// Constant copy of the values: no parents, no gradient tracking.
  Tensor detach() const;

  /// Reverse-mode pass from a scalar. Gradients on leaf tensors accumulate
  /// additively across calls; intermediate nodes are re-seeded each pass.
  void backward() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op_result(Shape shape, std::vector<double> values,
                               std::vector<Tensor> parents,
                               std::function<void(detail::TensorNode&)> backprop);
};

/// Matrix product a[m x k] * b[k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[b x d] * w[k x d]^T -> [b x k]. The natural orientation for classifier
/// heads stored one row per class.
Tensor linear(const Tensor& x, const Tensor& w);

Tensor add(const Tensor& a, const Tensor& b);
/// m[b x k] + v[k], v broadcast across rows.
Tensor add_rowvec(const Tensor& m, const Tensor& v);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& t, double factor);
Tensor relu(const Tensor& t);
Tensor sum(const Tensor& t);  // -> scalar

/// Row-wise log-softmax over the last dimension (rank 1 or 2), computed with
/// max subtraction so finite inputs up to |1e4| cannot overflow. Non-finite
/// input is a numeric error.
Tensor log_softmax(const Tensor& logits);

/// Row-wise softmax over the last dimension. exp(log_softmax).
Tensor softmax(const Tensor& logits);

/// Mean over the batch of -log_softmax(logits)[b, labels[b]].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Mean over the batch of sum_k p_k (log p_k - log_softmax(logits)_k).
/// target_probs is a constant: rows must be valid distributions and the
/// tensor must not require gradients. Gradient flows into logits only.
Tensor kl_divergence(const Tensor& target_probs, const Tensor& logits);

/// Same values under a new shape of equal size.
Tensor reshape(const Tensor& t, Shape shape);

/// New matrix from the given rows of m, differentiable (scatter-add on the
/// way back). Rows may repeat.
Tensor gather_rows(const Tensor& m, std::vector<std::size_t> rows);

/// Columns {offset, offset+stride, offset+2*stride, ...} of m.
Tensor select_columns(const Tensor& m, std::size_t stride, std::size_t offset);

}  // namespace sla
