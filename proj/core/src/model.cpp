#include "sla/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sla {

namespace {

Tensor uniform_tensor(Shape shape, double fan_in, Rng& rng) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  const double bound = 1.0 / std::sqrt(fan_in);
  std::vector<double> values(n);
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from_values(std::move(shape), std::move(values), true);
}

}  // namespace

Parameter make_head(std::size_t rows, std::size_t dim, Rng& rng) {
  return Parameter(uniform_tensor({rows, dim}, static_cast<double>(dim), rng));
}

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  if (config_.input_dim == 0)
    throw std::invalid_argument("backbone input dimension must be positive");
  switch (config_.kind) {
    case BackboneKind::linear_passthrough:
      break;
    case BackboneKind::linear_projection: {
      if (config_.output_dim == 0)
        throw std::invalid_argument("projection backbone needs a positive output_dim");
      weights_.push_back(Parameter(uniform_tensor(
          {config_.output_dim, config_.input_dim},
          static_cast<double>(config_.input_dim), rng)));
      break;
    }
    case BackboneKind::mlp: {
      if (config_.hidden_sizes.empty())
        throw std::invalid_argument("mlp backbone needs at least one hidden layer");
      std::size_t in = config_.input_dim;
      for (std::size_t h : config_.hidden_sizes) {
        if (h == 0) throw std::invalid_argument("hidden sizes must be positive");
        weights_.push_back(Parameter(
            uniform_tensor({h, in}, static_cast<double>(in), rng)));
        biases_.push_back(Parameter(
            uniform_tensor({h}, static_cast<double>(in), rng)));
        in = h;
      }
      break;
    }
  }
}

std::size_t Backbone::embedding_dim() const {
  switch (config_.kind) {
    case BackboneKind::linear_passthrough:
      return config_.input_dim;
    case BackboneKind::linear_projection:
      return config_.output_dim;
    case BackboneKind::mlp:
      return config_.hidden_sizes.back();
  }
  return 0;
}

Tensor Backbone::embed_matrix(const Tensor& inputs) const {
  if (inputs.rank() != 2 || inputs.shape()[1] != config_.input_dim)
    throw std::invalid_argument("backbone expects inputs [B x " +
                                std::to_string(config_.input_dim) + "], got " +
                                shape_string(inputs.shape()));
  forward_count_->fetch_add(inputs.shape()[0]);
  switch (config_.kind) {
    case BackboneKind::linear_passthrough:
      return inputs;
    case BackboneKind::linear_projection:
      return linear(inputs, weights_[0].value);
    case BackboneKind::mlp: {
      Tensor z = inputs;
      for (std::size_t layer = 0; layer < weights_.size(); ++layer) {
        z = relu(add_rowvec(linear(z, weights_[layer].value), biases_[layer].value));
      }
      return z;
    }
  }
  throw std::logic_error("unreachable backbone kind");
}

Tensor Backbone::embed(const Image& image) const {
  if (image.size() != config_.input_dim)
    throw std::invalid_argument("image with " + std::to_string(image.size()) +
                                " values fed to backbone expecting " +
                                std::to_string(config_.input_dim));
  return embed_matrix(Tensor::from_values({1, config_.input_dim}, image.pixels));
}

std::vector<Parameter*> Backbone::parameters() {
  std::vector<Parameter*> out;
  for (Parameter& p : weights_) out.push_back(&p);
  for (Parameter& p : biases_) out.push_back(&p);
  return out;
}

JointHead::JointHead(std::size_t n, std::size_t m, std::size_t dim, Rng& rng)
    : w(uniform_tensor({n * m, dim}, static_cast<double>(dim), rng)),
      num_classes(n),
      num_transforms(m) {
  if (n == 0 || m == 0) throw std::invalid_argument("joint head needs N, M >= 1");
}

Tensor joint_logits(const JointHead& head, const Tensor& z) {
  return linear(z, head.w.value);
}

Tensor conditional_logits(const JointHead& head, const Tensor& z, std::size_t j) {
  if (j >= head.num_transforms)
    throw std::out_of_range("transformation index " + std::to_string(j) +
                            " out of range [0," +
                            std::to_string(head.num_transforms) + ")");
  return select_columns(joint_logits(head, z), head.num_transforms, j);
}

std::vector<Parameter*> SlaModel::parameters() {
  std::vector<Parameter*> out = backbone.parameters();
  if (joint) out.push_back(&joint->w);
  if (u) out.push_back(&*u);
  if (v) out.push_back(&*v);
  return out;
}

namespace {

constexpr char kMagic[8] = {'S', 'L', 'A', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_u64(std::ofstream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::ifstream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error("checkpoint truncated");
  return v;
}
std::uint64_t read_u64(std::ifstream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error("checkpoint truncated");
  return v;
}

void write_tensor(std::ofstream& out, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_u64(out, d);
  out.write(reinterpret_cast<const char*>(t.values().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_tensor(std::ifstream& in, bool requires_grad) {
  const std::uint32_t rank = read_u32(in);
  if (rank > 8) throw std::runtime_error("checkpoint tensor rank is implausible");
  Shape shape(rank);
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(read_u64(in));
    n *= shape[i];
  }
  std::vector<double> values(n);
  if (!in.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(n * sizeof(double))))
    throw std::runtime_error("checkpoint truncated");
  return Tensor::from_values(std::move(shape), std::move(values), requires_grad);
}

}  // namespace

void save_checkpoint(const SlaModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof kMagic);
  write_u32(out, kVersion);
  const BackboneConfig& cfg = model.backbone.config();
  write_u32(out, static_cast<std::uint32_t>(cfg.kind));
  write_u64(out, cfg.input_dim);
  write_u64(out, cfg.output_dim);
  write_u32(out, static_cast<std::uint32_t>(cfg.hidden_sizes.size()));
  for (std::size_t h : cfg.hidden_sizes) write_u64(out, h);
  write_u64(out, model.num_classes);
  write_u64(out, model.num_transforms);
  write_u64(out, model.embedding_dim());
  const std::uint32_t flags = (model.joint ? 1u : 0u) | (model.u ? 2u : 0u) |
                              (model.v ? 4u : 0u);
  write_u32(out, flags);
  for (const Parameter& p : model.backbone.weights()) write_tensor(out, p.value);
  for (const Parameter& p : model.backbone.biases()) write_tensor(out, p.value);
  if (model.joint) write_tensor(out, model.joint->w.value);
  if (model.u) write_tensor(out, model.u->value);
  if (model.v) write_tensor(out, model.v->value);
  if (!out) throw std::runtime_error("failed while writing checkpoint: " + path.string());
}

SlaModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8] = {};
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("not a checkpoint file: " + path.string());
  const std::uint32_t version = read_u32(in);
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));

  BackboneConfig cfg;
  cfg.kind = static_cast<BackboneKind>(read_u32(in));
  cfg.input_dim = static_cast<std::size_t>(read_u64(in));
  cfg.output_dim = static_cast<std::size_t>(read_u64(in));
  const std::uint32_t n_hidden = read_u32(in);
  cfg.hidden_sizes.resize(n_hidden);
  for (std::uint32_t i = 0; i < n_hidden; ++i)
    cfg.hidden_sizes[i] = static_cast<std::size_t>(read_u64(in));

  SlaModel model;
  model.num_classes = static_cast<std::size_t>(read_u64(in));
  model.num_transforms = static_cast<std::size_t>(read_u64(in));
  const std::size_t dim = static_cast<std::size_t>(read_u64(in));
  const std::uint32_t flags = read_u32(in);

  Rng rng(0);  // structure only; every value is overwritten below
  model.backbone = Backbone(cfg, rng);
  for (Parameter& p : model.backbone.weights_mut()) {
    Tensor t = read_tensor(in, true);
    if (t.shape() != p.value.shape())
      throw std::runtime_error("checkpoint weight shape mismatch");
    p = Parameter(std::move(t));
  }
  for (Parameter& p : model.backbone.biases_mut()) {
    Tensor t = read_tensor(in, true);
    if (t.shape() != p.value.shape())
      throw std::runtime_error("checkpoint bias shape mismatch");
    p = Parameter(std::move(t));
  }
  if (flags & 1u) {
    JointHead head(model.num_classes, model.num_transforms, dim, rng);
    head.w = Parameter(read_tensor(in, true));
    if (head.w.value.shape() != Shape{model.num_classes * model.num_transforms, dim})
      throw std::runtime_error("checkpoint joint head shape mismatch");
    model.joint = std::move(head);
  }
  if (flags & 2u) model.u = Parameter(read_tensor(in, true));
  if (flags & 4u) model.v = Parameter(read_tensor(in, true));
  if (model.embedding_dim() != dim)
    throw std::runtime_error("checkpoint embedding dimension is inconsistent");
  return model;
}

}  // namespace sla
