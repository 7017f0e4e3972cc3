#include "sla/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace sla {

namespace {

using EigenRowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMajor>;
using ConstMatMap = Eigen::Map<const EigenRowMajor>;

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

// Last dimension is the softmax axis; everything before it is the batch.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
  require(t.rank() == 1 || t.rank() == 2,
          "expected rank-1 or rank-2 tensor, got shape " + shape_string(t.shape()));
  if (t.rank() == 1) return {1, t.shape()[0]};
  return {t.shape()[0], t.shape()[1]};
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

void TensorNode::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

}  // namespace detail

Tensor make_op_result(Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(detail::TensorNode&)> backprop) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  bool track = false;
  for (const Tensor& p : parents) track = track || p.requires_grad();
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.node());
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_values(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(shape_product(shape), value);
  return from_values(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  const std::size_t expected = shape_product(shape);
  if (values.empty()) values.assign(expected, 0.0);
  require(values.size() == expected,
          "value count " + std::to_string(values.size()) +
              " does not match shape " + shape_string(shape));
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values(Shape{1}, {value}, requires_grad);
}

double Tensor::scalar_value() const {
  require(size() == 1, "scalar_value() on tensor of shape " + shape_string(shape()));
  return node_->values[0];
}

Tensor Tensor::detach() const {
  return from_values(node_->shape, node_->values, false);
}

void Tensor::backward() const {
  require(defined() && size() == 1,
          "backward() requires a scalar loss, got shape " +
              (defined() ? shape_string(shape()) : std::string("<empty>")));
  if (!node_->requires_grad) return;

  // Iterative DFS post-order: children before parents in `order`.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> visited;
  std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::TensorNode* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are transient per pass; leaf grads persist so repeated
  // backward calls accumulate.
  for (detail::TensorNode* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->values.size(), 0.0);
    else node->ensure_grad();
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode* node = *it;
    if (node->backprop) node->backprop(*node);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul expects rank-2 tensors, got " + shape_string(a.shape()) +
              " and " + shape_string(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  require(k == k2, "matmul inner dimensions disagree: " + shape_string(a.shape()) +
                       " vs " + shape_string(b.shape()));

  std::vector<double> out(m * n);
  {
    ConstMatMap A(a.values().data(), m, k);
    ConstMatMap B(b.values().data(), k, n);
    MatMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto an = a.node(), bn = b.node();
  return make_op_result(
      {m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](detail::TensorNode& self) {
        ConstMatMap G(self.grad.data(), m, n);
        if (an->requires_grad) {
          an->ensure_grad();
          MatMap dA(an->grad.data(), m, k);
          ConstMatMap B(bn->values.data(), k, n);
          dA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          MatMap dB(bn->grad.data(), k, n);
          ConstMatMap A(an->values.data(), m, k);
          dB.noalias() += A.transpose() * G;
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require(x.rank() == 2 && w.rank() == 2,
          "linear expects rank-2 tensors, got " + shape_string(x.shape()) +
              " and " + shape_string(w.shape()));
  const std::size_t b = x.shape()[0], d = x.shape()[1];
  const std::size_t k = w.shape()[0], d2 = w.shape()[1];
  require(d == d2, "linear feature dimensions disagree: " + shape_string(x.shape()) +
                       " vs " + shape_string(w.shape()));

  std::vector<double> out(b * k);
  {
    ConstMatMap X(x.values().data(), b, d);
    ConstMatMap W(w.values().data(), k, d);
    MatMap Y(out.data(), b, k);
    Y.noalias() = X * W.transpose();
  }
  auto xn = x.node(), wn = w.node();
  return make_op_result(
      {b, k}, std::move(out), {x, w},
      [xn, wn, b, d, k](detail::TensorNode& self) {
        ConstMatMap G(self.grad.data(), b, k);
        if (xn->requires_grad) {
          xn->ensure_grad();
          MatMap dX(xn->grad.data(), b, d);
          ConstMatMap W(wn->values.data(), k, d);
          dX.noalias() += G * W;
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          MatMap dW(wn->grad.data(), k, d);
          ConstMatMap X(xn->values.data(), b, d);
          dW.noalias() += G.transpose() * X;
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add shapes disagree: " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [an, bn](detail::TensorNode& self) {
                          if (an->requires_grad) {
                            an->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              an->grad[i] += self.grad[i];
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              bn->grad[i] += self.grad[i];
                          }
                        });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  auto [rows, cols] = rows_cols(m);
  require(v.rank() == 1 && v.shape()[0] == cols,
          "add_rowvec shapes disagree: " + shape_string(m.shape()) + " vs " +
              shape_string(v.shape()));
  std::vector<double> out(m.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = m.values()[r * cols + c] + v.values()[c];
  auto mn = m.node(), vn = v.node();
  return make_op_result(m.shape(), std::move(out), {m, v},
                        [mn, vn, rows, cols](detail::TensorNode& self) {
                          if (mn->requires_grad) {
                            mn->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              mn->grad[i] += self.grad[i];
                          }
                          if (vn->requires_grad) {
                            vn->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cols; ++c)
                                vn->grad[c] += self.grad[r * cols + c];
                          }
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul shapes disagree: " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [an, bn](detail::TensorNode& self) {
                          if (an->requires_grad) {
                            an->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              an->grad[i] += self.grad[i] * bn->values[i];
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              bn->grad[i] += self.grad[i] * an->values[i];
                          }
                        });
}

Tensor scale(const Tensor& t, double factor) {
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.values()[i] * factor;
  auto tn = t.node();
  return make_op_result(t.shape(), std::move(out), {t},
                        [tn, factor](detail::TensorNode& self) {
                          tn->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            tn->grad[i] += self.grad[i] * factor;
                        });
}

Tensor relu(const Tensor& t) {
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = t.values()[i] > 0.0 ? t.values()[i] : 0.0;
  auto tn = t.node();
  return make_op_result(t.shape(), std::move(out), {t},
                        [tn](detail::TensorNode& self) {
                          tn->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            if (tn->values[i] > 0.0) tn->grad[i] += self.grad[i];
                        });
}

Tensor sum(const Tensor& t) {
  double total = 0.0;
  for (double v : t.values()) total += v;
  auto tn = t.node();
  return make_op_result(Shape{1}, {total}, {t},
                        [tn](detail::TensorNode& self) {
                          tn->ensure_grad();
                          for (double& g : tn->grad) g += self.grad[0];
                        });
}

Tensor log_softmax(const Tensor& logits) {
  auto [rows, cols] = rows_cols(logits);
  require(cols >= 1, "log_softmax needs at least one class");
  for (double v : logits.values()) {
    if (!std::isfinite(v))
      throw std::domain_error("log_softmax input is not finite");
  }
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = logits.values().data() + r * cols;
    double mx = in[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double se = 0.0;
    for (std::size_t c = 0; c < cols; ++c) se += std::exp(in[c] - mx);
    const double lse = mx + std::log(se);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lse;
  }
  auto ln = logits.node();
  return make_op_result(
      {logits.shape()}, std::move(out), {logits},
      [ln, rows, cols](detail::TensorNode& self) {
        ln->ensure_grad();
        // d logits = g - softmax * sum_row(g)
        for (std::size_t r = 0; r < rows; ++r) {
          double gsum = 0.0;
          for (std::size_t c = 0; c < cols; ++c) gsum += self.grad[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            ln->grad[i] += self.grad[i] - std::exp(self.values[i]) * gsum;
          }
        }
      });
}

Tensor softmax(const Tensor& logits) {
  Tensor ls = log_softmax(logits);
  std::vector<double> out(ls.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(ls.values()[i]);
  auto lsn = ls.node();
  return make_op_result(ls.shape(), std::move(out), {ls},
                        [lsn](detail::TensorNode& self) {
                          lsn->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            lsn->grad[i] += self.grad[i] * self.values[i];
                        });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  auto [rows, cols] = rows_cols(logits);
  require(labels.size() == rows,
          "cross_entropy got " + std::to_string(labels.size()) + " labels for " +
              std::to_string(rows) + " rows");
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols)
      throw std::out_of_range("cross_entropy label " + std::to_string(labels[r]) +
                              " out of range [0," + std::to_string(cols) +
                              ") at row " + std::to_string(r));
  }
  Tensor ls = log_softmax(logits);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    total -= ls.values()[r * cols + static_cast<std::size_t>(labels[r])];
  const double inv = 1.0 / static_cast<double>(rows);
  std::vector<std::size_t> picks(rows);
  for (std::size_t r = 0; r < rows; ++r)
    picks[r] = r * cols + static_cast<std::size_t>(labels[r]);
  auto lsn = ls.node();
  return make_op_result(Shape{1}, {total * inv}, {ls},
                        [lsn, picks = std::move(picks), inv](detail::TensorNode& self) {
                          lsn->ensure_grad();
                          for (std::size_t p : picks) lsn->grad[p] -= self.grad[0] * inv;
                        });
}

Tensor kl_divergence(const Tensor& target_probs, const Tensor& logits) {
  require(!target_probs.requires_grad(),
          "kl_divergence target must be a constant (no gradient tracking)");
  require(target_probs.shape() == logits.shape(),
          "kl_divergence shapes disagree: " + shape_string(target_probs.shape()) +
              " vs " + shape_string(logits.shape()));
  auto [rows, cols] = rows_cols(logits);
  for (std::size_t r = 0; r < rows; ++r) {
    double rowsum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double p = target_probs.values()[r * cols + c];
      if (p < 0.0)
        throw std::invalid_argument("kl_divergence target has a negative entry in row " +
                                    std::to_string(r));
      rowsum += p;
    }
    if (std::abs(rowsum - 1.0) > 1e-9)
      throw std::invalid_argument("kl_divergence target row " + std::to_string(r) +
                                  " sums to " + std::to_string(rowsum) + ", not 1");
  }
  Tensor ls = log_softmax(logits);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double p = target_probs.values()[r * cols + c];
      if (p > 0.0) total += p * (std::log(p) - ls.values()[r * cols + c]);
    }
  }
  const double inv = 1.0 / static_cast<double>(rows);
  auto lsn = ls.node();
  std::vector<double> target(target_probs.values().begin(), target_probs.values().end());
  return make_op_result(Shape{1}, {total * inv}, {ls},
                        [lsn, target = std::move(target), inv](detail::TensorNode& self) {
                          lsn->ensure_grad();
                          for (std::size_t i = 0; i < target.size(); ++i)
                            lsn->grad[i] -= self.grad[0] * inv * target[i];
                        });
}

Tensor reshape(const Tensor& t, Shape shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  require(n == t.size(), "reshape to " + shape_string(shape) +
                             " from incompatible shape " + shape_string(t.shape()));
  std::vector<double> out(t.values().begin(), t.values().end());
  auto tn = t.node();
  return make_op_result(std::move(shape), std::move(out), {t},
                        [tn](detail::TensorNode& self) {
                          tn->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            tn->grad[i] += self.grad[i];
                        });
}

Tensor gather_rows(const Tensor& m, std::vector<std::size_t> rows) {
  require(m.rank() == 2, "gather_rows expects a rank-2 tensor, got " +
                             shape_string(m.shape()));
  const std::size_t nrows = m.shape()[0], cols = m.shape()[1];
  for (std::size_t r : rows) {
    if (r >= nrows)
      throw std::out_of_range("gather_rows index " + std::to_string(r) +
                              " out of range [0," + std::to_string(nrows) + ")");
  }
  std::vector<double> out(rows.size() * cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(m.values().data() + rows[i] * cols, cols, out.data() + i * cols);
  auto mn = m.node();
  const std::size_t count = rows.size();
  return make_op_result({count, cols}, std::move(out), {m},
                        [mn, rows = std::move(rows), cols](detail::TensorNode& self) {
                          mn->ensure_grad();
                          for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t c = 0; c < cols; ++c)
                              mn->grad[rows[i] * cols + c] += self.grad[i * cols + c];
                        });
}

Tensor select_columns(const Tensor& m, std::size_t stride, std::size_t offset) {
  require(m.rank() == 2, "select_columns expects a rank-2 tensor, got " +
                             shape_string(m.shape()));
  const std::size_t rows = m.shape()[0], cols = m.shape()[1];
  require(stride >= 1 && offset < stride && cols % stride == 0,
          "select_columns(stride=" + std::to_string(stride) +
              ", offset=" + std::to_string(offset) + ") invalid for shape " +
              shape_string(m.shape()));
  const std::size_t picked = cols / stride;
  std::vector<double> out(rows * picked);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < picked; ++i)
      out[r * picked + i] = m.values()[r * cols + i * stride + offset];
  auto mn = m.node();
  return make_op_result({rows, picked}, std::move(out), {m},
                        [mn, rows, cols, stride, offset, picked](detail::TensorNode& self) {
                          mn->ensure_grad();
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t i = 0; i < picked; ++i)
                              mn->grad[r * cols + i * stride + offset] +=
                                  self.grad[r * picked + i];
                        });
}

}  // namespace sla
