#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sla/tensor.hpp"

namespace sla {

/// A trainable tensor plus its heavy-ball velocity buffer.
struct Parameter {
  Tensor value;
  std::vector<double> momentum;

  explicit Parameter(Tensor tensor);
};

struct OptimizerConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<double> decay_milestones = {0.5, 0.75};  // fractions of total iterations
  double decay_factor = 0.1;

  void validate() const;
};

/// Learning rate after milestone decay: base * factor^(milestones passed),
/// where a milestone m is passed once iteration >= m * total_iterations.
double learning_rate_at(const OptimizerConfig& cfg, std::size_t iteration,
                        std::size_t total_iterations);

/// SGD with momentum and coupled weight decay:
///   v <- mu * v + (g + lambda * p);  p <- p - lr * v
/// Gradients are cleared afterwards. A parameter without a populated
/// gradient is a contract violation.
void sgd_step(std::span<Parameter* const> params, const OptimizerConfig& cfg,
              std::size_t iteration, std::size_t total_iterations);

}  // namespace sla
