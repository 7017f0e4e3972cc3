#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sla/optimizer.hpp"
#include "sla/rng.hpp"
#include "sla/tensor.hpp"
#include "sla/transforms.hpp"

namespace sla {

enum class BackboneKind : std::uint32_t {
  linear_passthrough = 0,  // embedding is the flattened input, no parameters
  linear_projection = 1,   // single bias-free projection to output_dim
  mlp = 2,                 // affine + ReLU stack, embedding is the last hidden layer
};

struct BackboneConfig {
  BackboneKind kind = BackboneKind::linear_passthrough;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;                // projection only
  std::vector<std::size_t> hidden_sizes;     // mlp only
};

/// Maps flattened images to embeddings z. Counts how many images it has
/// embedded, so inference cost can be asserted in tests.
class Backbone {
 public:
  Backbone() = default;
  /// Weights drawn uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)].
  Backbone(const BackboneConfig& config, Rng& rng);

  const BackboneConfig& config() const { return config_; }
  std::size_t input_dim() const { return config_.input_dim; }
  std::size_t embedding_dim() const;

  /// Batched forward pass: inputs [B x d] -> embeddings [B x D].
  Tensor embed_matrix(const Tensor& inputs) const;
  /// Single image convenience wrapper; returns [1 x D].
  Tensor embed(const Image& image) const;

  std::uint64_t forward_count() const { return forward_count_->load(); }
  void reset_forward_count() const { forward_count_->store(0); }

  std::vector<Parameter*> parameters();
  const std::vector<Parameter>& weights() const { return weights_; }
  const std::vector<Parameter>& biases() const { return biases_; }
  std::vector<Parameter>& weights_mut() { return weights_; }
  std::vector<Parameter>& biases_mut() { return biases_; }

 private:
  BackboneConfig config_;
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;  // mlp only; projection is bias-free
  std::shared_ptr<std::atomic<std::uint64_t>> forward_count_ =
      std::make_shared<std::atomic<std::uint64_t>>(0);
};

/// Joint classifier over (class, transformation): w is (N*M) x D with
/// w_ij stored at row i*M + j.
struct JointHead {
  Parameter w;
  std::size_t num_classes = 0;     // N
  std::size_t num_transforms = 0;  // M

  JointHead(std::size_t n, std::size_t m, std::size_t dim, Rng& rng);

  static std::size_t row_index(std::size_t i, std::size_t j, std::size_t m) {
    return i * m + j;
  }
};

/// Logits over all N*M joint labels: [B x D] -> [B x N*M].
Tensor joint_logits(const JointHead& head, const Tensor& z);

/// Column j of the joint classifier: [B x D] -> [B x N]. Softmax over the
/// result is P(i | x~_j, j).
Tensor conditional_logits(const JointHead& head, const Tensor& z, std::size_t j);

/// Full model: backbone plus whichever heads the objective needs.
/// u is the primary/distillation head (N x D), v the self-supervision
/// head (M x D). All heads are bias-free.
struct SlaModel {
  Backbone backbone;
  std::optional<JointHead> joint;
  std::optional<Parameter> u;
  std::optional<Parameter> v;
  std::size_t num_classes = 0;
  std::size_t num_transforms = 1;

  std::vector<Parameter*> parameters();
  std::size_t embedding_dim() const { return backbone.embedding_dim(); }
};

/// Bias-free head of shape [rows x dim], init U[-1/sqrt(dim), +1/sqrt(dim)].
Parameter make_head(std::size_t rows, std::size_t dim, Rng& rng);

/// Binary checkpoint: magic "SLACKPT1", version, backbone structure, N/M/D,
/// head flags, then each tensor as (rank, dims..., raw f64 values),
/// little-endian. Layout documented in the README.
void save_checkpoint(const SlaModel& model, const std::filesystem::path& path);
SlaModel load_checkpoint(const std::filesystem::path& path);

}  // namespace sla
