#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace sla {

/// H x W x C image with pixel values in [0,1], row-major (channel fastest).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c)
      : height(h), width(w), channels(c), pixels(h * w * c, 0.0) {}

  double& at(std::size_t r, std::size_t c, std::size_t ch) {
    return pixels[(r * width + c) * channels + ch];
  }
  double at(std::size_t r, std::size_t c, std::size_t ch) const {
    return pixels[(r * width + c) * channels + ch];
  }
  std::size_t size() const { return pixels.size(); }
};

/// Counter-clockwise quarter turns, k in [0,4).
struct Rotation {
  int quarter_turns = 0;
};

/// Output channel c takes input channel mapping[c].
struct ChannelPermutation {
  std::vector<std::size_t> mapping;
};

/// Rotation first, then channel permutation.
struct Composed {
  Rotation rotation;
  ChannelPermutation channels;
};

class Transformation {
 public:
  using Op = std::variant<Rotation, ChannelPermutation, Composed>;

  Transformation(Op op, std::size_t index);

  const Op& op() const { return op_; }
  std::size_t index() const { return index_; }
  bool is_identity() const;
  std::string description() const;

  /// Canonical (quarter_turns, channel mapping) form, used to compare
  /// transformations as maps.
  std::pair<int, std::vector<std::size_t>> canonical() const;

 private:
  Op op_;
  std::size_t index_;
};

Image apply(const Transformation& t, const Image& x);

/// Ordered list of M pairwise-distinct transformations, identity first.
class TransformationSet {
 public:
  explicit TransformationSet(std::vector<Transformation> transforms);

  std::size_t size() const { return transforms_.size(); }
  const Transformation& operator[](std::size_t j) const { return transforms_[j]; }
  const std::vector<Transformation>& transforms() const { return transforms_; }

 private:
  std::vector<Transformation> transforms_;
};

/// {0, 90, 180, 270} degrees counter-clockwise. M = 4.
TransformationSet rotation_set();
/// Any subset of quarter turns; must start with 0.
TransformationSet rotation_subset(const std::vector<int>& quarter_turns);

/// All 6 permutations of three channels, identity (RGB) first, then
/// lexicographic: RGB, RBG, GRB, GBR, BRG, BGR. M = 6.
TransformationSet color_permutation_set();
/// Subset by name from the canonical six; must start with "RGB".
TransformationSet color_permutation_subset(const std::vector<std::string>& names);

/// The singleton identity set. M = 1.
TransformationSet identity_set();

/// {t_c o t_r}: every rotation in rot_subset composed with every channel
/// permutation in perm_subset, rotation-major order. M = |T_r| * |T_c|.
TransformationSet product_set(const TransformationSet& rot_subset,
                              const TransformationSet& perm_subset);

/// One (image, label) pair of a training batch.
struct LabeledImage {
  const Image* image;
  int label;
};

/// Expanded sample carrying the joint label y*M + j.
struct JointExample {
  Image image;
  int joint_label;
};

/// Applies every transformation of the set to every batch element.
/// Output is input-major: entry b*M + j is t_j applied to batch[b], with
/// joint label y_b*M + j. Labels must lie in [0, num_classes).
std::vector<JointExample> expand_batch(const std::vector<LabeledImage>& batch,
                                       const TransformationSet& set,
                                       int num_classes);

/// Recovers (y, j) from a joint label.
inline std::pair<int, int> split_joint_label(int joint, int num_transforms) {
  return {joint / num_transforms, joint % num_transforms};
}

}  // namespace sla
