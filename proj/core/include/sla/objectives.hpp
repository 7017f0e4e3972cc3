#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sla/model.hpp"
#include "sla/tensor.hpp"
#include "sla/transforms.hpp"

namespace sla {

enum class Objective { baseline, da, mt, sla, sla_sd };

Objective objective_from_string(const std::string& name);
std::string objective_name(Objective objective);

/// A training loss with its unweighted component values. `total` is the
/// graph-connected scalar to call backward() on; the components are plain
/// numbers for logging. total == classification + self_supervision +
/// distillation_kl + beta * distillation_ce, treating absent terms as zero.
struct LossBreakdown {
  Tensor total;
  std::optional<double> classification;
  std::optional<double> self_supervision;
  std::optional<double> distillation_kl;
  std::optional<double> distillation_ce;
  double beta = 0.0;

  double total_value() const { return total.scalar_value(); }
};

/// Label-preserving augmentation: (1/M) sum_j mean_B CE(sigma(z~_j; u), y).
LossBreakdown loss_da(SlaModel& model, const std::vector<LabeledImage>& batch,
                      const TransformationSet& set);

/// Multi-task: (1/M) sum_j [ mean_B CE(sigma(z~_j;u), y)
///                         + mean_B CE(sigma(z~_j;v), j) ].
LossBreakdown loss_mt(SlaModel& model, const std::vector<LabeledImage>& batch,
                      const TransformationSet& set);

/// Joint-label augmentation: (1/M) sum_j mean_B CE over the N*M-way joint
/// logits with label y*M + j.
LossBreakdown loss_sla(SlaModel& model, const std::vector<LabeledImage>& batch,
                       const TransformationSet& set);

/// loss_sla plus self-distillation of the aggregated prediction into the u
/// head: KL(P_aggregated || sigma(z;u)) + beta * CE(sigma(z;u), y), where z
/// is the identity-transform embedding already computed for loss_sla and
/// P_aggregated is a constant (no gradient flows through the teacher).
LossBreakdown loss_sla_sd(SlaModel& model, const std::vector<LabeledImage>& batch,
                          const TransformationSet& set, int beta);

/// Aggregated pre-softmax activations s_i = (1/M) sum_j w_ij . f(t_j(x)).
/// Returns s as a rank-1 tensor; callers apply softmax as needed. The set
/// may be a prefix truncation of the training set (identity-only gives the
/// single-inference logits bit for bit).
Tensor aggregate_logits(const SlaModel& model, const Image& x,
                        const TransformationSet& set);

/// Elementwise mean of each model's single-inference logits (conditional
/// j=0 for joint-head models, the u head otherwise). Ties at the argmax are
/// broken by the lowest class index everywhere in this project.
Tensor ensemble_logits(std::span<const SlaModel* const> models, const Image& x);

/// Deviations of the joint objective from its algebraic reductions, over
/// randomly drawn tiny models (D <= 8, N <= 3, M <= 4, batch <= 4):
///   w_ij := u_i + v_j   =>   loss_sla == loss_mt            (exact)
///   w_ij := u_i         =>   loss_sla == loss_da + ln M     (exact)
/// The joint softmax factorizes in both cases; copying rows leaves a
/// uniform factor over the M transformations, whose cross entropy is the
/// constant ln M (zero for M = 1).
struct ReductionCheckResult {
  double max_mt_deviation = 0.0;
  double max_da_deviation = 0.0;
  std::size_t models_checked = 0;

  double max_deviation() const {
    return max_mt_deviation > max_da_deviation ? max_mt_deviation : max_da_deviation;
  }
};

ReductionCheckResult run_reduction_check(std::size_t model_count, std::uint64_t seed);

}  // namespace sla
