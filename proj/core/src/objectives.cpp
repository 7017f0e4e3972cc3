#include "sla/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace sla {

Objective objective_from_string(const std::string& name) {
  if (name == "baseline") return Objective::baseline;
  if (name == "da") return Objective::da;
  if (name == "mt") return Objective::mt;
  if (name == "sla") return Objective::sla;
  if (name == "sla_sd") return Objective::sla_sd;
  throw std::invalid_argument("unknown objective: " + name);
}

std::string objective_name(Objective objective) {
  switch (objective) {
    case Objective::baseline: return "baseline";
    case Objective::da: return "da";
    case Objective::mt: return "mt";
    case Objective::sla: return "sla";
    case Objective::sla_sd: return "sla_sd";
  }
  return "?";
}

namespace {

struct ExpandedBatch {
  Tensor inputs;                     // [B*M x d], input-major (row b*M + j)
  std::vector<int> class_labels;     // y_b per row
  std::vector<int> transform_labels; // j per row
  std::vector<int> joint_labels;     // y_b*M + j per row
  std::size_t batch_size = 0;
  std::size_t num_transforms = 0;
};

ExpandedBatch expand_to_matrix(const SlaModel& model,
                               const std::vector<LabeledImage>& batch,
                               const TransformationSet& set) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const std::size_t m = set.size();
  const std::size_t d = batch[0].image->size();
  std::vector<JointExample> expanded =
      expand_batch(batch, set, static_cast<int>(model.num_classes));

  ExpandedBatch out;
  out.batch_size = batch.size();
  out.num_transforms = m;
  std::vector<double> values;
  values.reserve(expanded.size() * d);
  out.class_labels.reserve(expanded.size());
  out.transform_labels.reserve(expanded.size());
  out.joint_labels.reserve(expanded.size());
  for (const JointExample& example : expanded) {
    if (example.image.size() != d)
      throw std::invalid_argument("batch images disagree in size");
    values.insert(values.end(), example.image.pixels.begin(), example.image.pixels.end());
    auto [y, j] = split_joint_label(example.joint_label, static_cast<int>(m));
    out.class_labels.push_back(y);
    out.transform_labels.push_back(j);
    out.joint_labels.push_back(example.joint_label);
  }
  out.inputs = Tensor::from_values({expanded.size(), d}, std::move(values));
  return out;
}

const Parameter& require_head_u(const SlaModel& model) {
  if (!model.u) throw std::invalid_argument("objective requires the u head");
  return *model.u;
}

const JointHead& require_joint(const SlaModel& model) {
  if (!model.joint) throw std::invalid_argument("objective requires the joint head");
  return *model.joint;
}

// Teacher distribution for self-distillation: softmax of the aggregated
// logits, computed from the already-available embedding values so that no
// gradient can flow through it.
Tensor aggregated_teacher_probs(const SlaModel& model, const Tensor& z,
                                std::size_t batch_size, std::size_t m) {
  const JointHead& head = *model.joint;
  const std::size_t n = head.num_classes;
  const std::size_t dim = model.embedding_dim();
  std::span<const double> zv = z.values();
  std::span<const double> wv = head.w.value.values();
  std::vector<double> s(batch_size * n, 0.0);
  for (std::size_t b = 0; b < batch_size; ++b) {
    for (std::size_t j = 0; j < m; ++j) {
      const double* zrow = zv.data() + (b * m + j) * dim;
      for (std::size_t i = 0; i < n; ++i) {
        const double* wrow = wv.data() + JointHead::row_index(i, j, m) * dim;
        double dot = 0.0;
        for (std::size_t k = 0; k < dim; ++k) dot += wrow[k] * zrow[k];
        s[b * n + i] += dot;
      }
    }
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  for (double& v : s) v *= inv_m;
  return softmax(Tensor::from_values({batch_size, n}, std::move(s)));
}

}  // namespace

LossBreakdown loss_da(SlaModel& model, const std::vector<LabeledImage>& batch,
                      const TransformationSet& set) {
  const Parameter& u = require_head_u(model);
  ExpandedBatch expanded = expand_to_matrix(model, batch, set);
  Tensor z = model.backbone.embed_matrix(expanded.inputs);
  Tensor ce = cross_entropy(linear(z, u.value), expanded.class_labels);
  LossBreakdown out;
  out.classification = ce.scalar_value();
  out.total = std::move(ce);
  return out;
}

LossBreakdown loss_mt(SlaModel& model, const std::vector<LabeledImage>& batch,
                      const TransformationSet& set) {
  const Parameter& u = require_head_u(model);
  if (!model.v) throw std::invalid_argument("multi-task objective requires the v head");
  ExpandedBatch expanded = expand_to_matrix(model, batch, set);
  Tensor z = model.backbone.embed_matrix(expanded.inputs);
  Tensor ce_class = cross_entropy(linear(z, u.value), expanded.class_labels);
  Tensor ce_transform = cross_entropy(linear(z, model.v->value), expanded.transform_labels);
  LossBreakdown out;
  out.classification = ce_class.scalar_value();
  out.self_supervision = ce_transform.scalar_value();
  out.total = add(ce_class, ce_transform);
  return out;
}

LossBreakdown loss_sla(SlaModel& model, const std::vector<LabeledImage>& batch,
                       const TransformationSet& set) {
  const JointHead& head = require_joint(model);
  if (head.num_transforms != set.size())
    throw std::invalid_argument("joint head has M=" + std::to_string(head.num_transforms) +
                                " but the set has M=" + std::to_string(set.size()));
  ExpandedBatch expanded = expand_to_matrix(model, batch, set);
  Tensor z = model.backbone.embed_matrix(expanded.inputs);
  Tensor ce = cross_entropy(joint_logits(head, z), expanded.joint_labels);
  LossBreakdown out;
  out.classification = ce.scalar_value();
  out.total = std::move(ce);
  return out;
}

LossBreakdown loss_sla_sd(SlaModel& model, const std::vector<LabeledImage>& batch,
                          const TransformationSet& set, int beta) {
  if (beta != 0 && beta != 1)
    throw std::invalid_argument("beta must be 0 or 1, got " + std::to_string(beta));
  const JointHead& head = require_joint(model);
  const Parameter& u = require_head_u(model);
  if (head.num_transforms != set.size())
    throw std::invalid_argument("joint head has M=" + std::to_string(head.num_transforms) +
                                " but the set has M=" + std::to_string(set.size()));
  if (set.size() < 2)
    throw std::invalid_argument("self-distillation needs at least 2 transformations");

  ExpandedBatch expanded = expand_to_matrix(model, batch, set);
  const std::size_t b = expanded.batch_size;
  const std::size_t m = expanded.num_transforms;

  Tensor z = model.backbone.embed_matrix(expanded.inputs);
  Tensor ce_joint = cross_entropy(joint_logits(head, z), expanded.joint_labels);

  // The identity forward (rows b*M) supplies z for the student; the teacher
  // reuses the same embeddings, detached.
  Tensor teacher = aggregated_teacher_probs(model, z, b, m).detach();
  std::vector<std::size_t> identity_rows(b);
  for (std::size_t i = 0; i < b; ++i) identity_rows[i] = i * m;
  Tensor z_identity = gather_rows(z, std::move(identity_rows));
  Tensor student_logits = linear(z_identity, u.value);
  Tensor kl = kl_divergence(teacher, student_logits);

  LossBreakdown out;
  out.classification = ce_joint.scalar_value();
  out.distillation_kl = kl.scalar_value();
  out.beta = beta;
  Tensor total = add(ce_joint, kl);
  if (beta == 1) {
    std::vector<int> labels(b);
    for (std::size_t i = 0; i < b; ++i) labels[i] = batch[i].label;
    Tensor ce_student = cross_entropy(student_logits, labels);
    out.distillation_ce = ce_student.scalar_value();
    total = add(total, ce_student);
  }
  out.total = std::move(total);
  return out;
}

Tensor aggregate_logits(const SlaModel& model, const Image& x,
                        const TransformationSet& set) {
  const JointHead& head = require_joint(model);
  // A prefix truncation of the training set is allowed (position j keeps
  // pairing with classifier column j); a larger set has no columns to use.
  if (set.size() > head.num_transforms)
    throw std::invalid_argument("joint head has M=" + std::to_string(head.num_transforms) +
                                " but the set has M=" + std::to_string(set.size()));
  const std::size_t m = set.size();
  Tensor s;
  for (std::size_t j = 0; j < m; ++j) {
    Image transformed = apply(set[j], x);
    Tensor zj = model.backbone.embed(transformed);
    Tensor cond = conditional_logits(head, zj, j);  // [1 x N]
    s = s.defined() ? add(s, cond) : cond;
  }
  return reshape(scale(s, 1.0 / static_cast<double>(m)), {head.num_classes});
}

ReductionCheckResult run_reduction_check(std::size_t model_count, std::uint64_t seed) {
  Rng rng(seed);
  ReductionCheckResult result;
  for (std::size_t trial = 0; trial < model_count; ++trial) {
    const std::size_t side = 2 + rng.next_below(2);          // square images
    const std::size_t n = 1 + rng.next_below(3);             // classes
    const std::size_t m = 1 + rng.next_below(4);             // transformations
    const std::size_t batch_size = 1 + rng.next_below(4);

    std::vector<int> turns;
    for (std::size_t j = 0; j < m; ++j) turns.push_back(static_cast<int>(j));
    TransformationSet set = rotation_subset(turns);

    SlaModel model;
    model.num_classes = n;
    model.num_transforms = m;
    BackboneConfig bb;
    bb.kind = BackboneKind::linear_passthrough;
    bb.input_dim = side * side;
    model.backbone = Backbone(bb, rng);
    const std::size_t dim = model.embedding_dim();
    model.joint.emplace(n, m, dim, rng);
    model.u.emplace(make_head(n, dim, rng));
    model.v.emplace(make_head(m, dim, rng));

    std::vector<Image> images(batch_size, Image(side, side, 1));
    std::vector<LabeledImage> batch;
    for (std::size_t b = 0; b < batch_size; ++b) {
      for (double& p : images[b].pixels) p = rng.next_double();
      batch.push_back({&images[b], static_cast<int>(rng.next_below(n))});
    }

    std::span<const double> u = model.u->value.values();
    std::span<const double> v = model.v->value.values();
    std::span<double> w = model.joint->w.value.values_mut();

    // w_ij = u_i + v_j reduces the joint objective to multi-task learning.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = 0; k < dim; ++k)
          w[JointHead::row_index(i, j, m) * dim + k] = u[i * dim + k] + v[j * dim + k];
    const double mt_dev = std::abs(loss_sla(model, batch, set).total_value() -
                                   loss_mt(model, batch, set).total_value());

    // w_ij = u_i reduces it to label-preserving augmentation plus ln M.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = 0; k < dim; ++k)
          w[JointHead::row_index(i, j, m) * dim + k] = u[i * dim + k];
    const double da_dev =
        std::abs(loss_sla(model, batch, set).total_value() -
                 loss_da(model, batch, set).total_value() -
                 std::log(static_cast<double>(m)));

    result.max_mt_deviation = std::max(result.max_mt_deviation, mt_dev);
    result.max_da_deviation = std::max(result.max_da_deviation, da_dev);
    ++result.models_checked;
  }
  return result;
}

Tensor ensemble_logits(std::span<const SlaModel* const> models, const Image& x) {
  if (models.empty()) throw std::invalid_argument("ensemble needs at least one model");
  const std::size_t n = models[0]->num_classes;
  Tensor sum_logits;
  for (const SlaModel* model : models) {
    if (model->num_classes != n)
      throw std::invalid_argument("ensemble members disagree on the class count");
    Tensor z = model->backbone.embed(x);
    Tensor logits = model->joint ? conditional_logits(*model->joint, z, 0)
                                 : linear(z, require_head_u(*model).value);
    sum_logits = sum_logits.defined() ? add(sum_logits, logits) : logits;
  }
  return reshape(scale(sum_logits, 1.0 / static_cast<double>(models.size())), {n});
}

}  // namespace sla
