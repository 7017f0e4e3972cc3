#include "sla/optimizer.hpp"

#include <stdexcept>
#include <string>

namespace sla {

Parameter::Parameter(Tensor tensor) : value(std::move(tensor)) {
  if (!value.defined() || !value.requires_grad())
    throw std::invalid_argument("Parameter requires a grad-tracking tensor");
  momentum.assign(value.size(), 0.0);
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0))
    throw std::invalid_argument("learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("momentum must be in [0,1)");
  if (weight_decay < 0.0)
    throw std::invalid_argument("weight_decay must be non-negative");
  if (!(decay_factor > 0.0))
    throw std::invalid_argument("decay_factor must be positive");
  double prev = 0.0;
  for (double m : decay_milestones) {
    if (m <= prev || m >= 1.0)
      throw std::invalid_argument(
          "decay_milestones must be strictly increasing fractions in (0,1)");
    prev = m;
  }
}

double learning_rate_at(const OptimizerConfig& cfg, std::size_t iteration,
                        std::size_t total_iterations) {
  double lr = cfg.learning_rate;
  for (double m : cfg.decay_milestones) {
    if (static_cast<double>(iteration) >= m * static_cast<double>(total_iterations))
      lr *= cfg.decay_factor;
  }
  return lr;
}

void sgd_step(std::span<Parameter* const> params, const OptimizerConfig& cfg,
              std::size_t iteration, std::size_t total_iterations) {
  const double lr = learning_rate_at(cfg, iteration, total_iterations);
  for (Parameter* param : params) {
    Tensor& p = param->value;
    if (p.grad().size() != p.size())
      throw std::invalid_argument("sgd_step: parameter of shape " +
                                  shape_string(p.shape()) + " has no gradient");
    std::span<double> values = p.values_mut();
    std::span<const double> grad = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i] + cfg.weight_decay * values[i];
      param->momentum[i] = cfg.momentum * param->momentum[i] + g;
      values[i] -= lr * param->momentum[i];
    }
    p.zero_grad();
  }
}

}  // namespace sla
