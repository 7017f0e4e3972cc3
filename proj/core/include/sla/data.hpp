#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sla/rng.hpp"
#include "sla/transforms.hpp"

namespace sla {

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;

  std::size_t size() const { return images.size(); }
  void validate() const;
};

struct SubsampleSpec {
  std::size_t per_class = 0;
  std::uint64_t seed = 0;
};

/// MNIST IDX pair: images magic 0x00000803, labels magic 0x00000801,
/// big-endian 32-bit header words. Pixels are scaled from [0,255] to [0,1].
Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path);

/// Inverse of load_mnist_idx, bit-exact: values are scaled back by 255 and
/// rounded to the nearest byte.
void write_mnist_idx(const Dataset& ds, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path);

/// Keeps only the listed classes, relabelled densely to [0, classes.size())
/// in the given order. Example order is preserved.
Dataset select_classes(const Dataset& ds, const std::vector<int>& classes);

/// Exactly spec.per_class examples of every class, chosen by a seeded
/// shuffle of each class's indices. Deterministic for a fixed seed.
Dataset subsample_per_class(const Dataset& ds, const SubsampleSpec& spec);

/// Two Gaussian clusters symmetric about a random hyperplane with the given
/// margin; linearly separable by construction. Images are s x s x 1 when
/// dimension is a perfect square, else 1 x dimension x 1.
Dataset synthetic_two_class(std::size_t dimension, double margin,
                            std::size_t count, std::uint64_t seed);

/// Debug export: header "index,label", one row per example.
void write_label_csv(const Dataset& ds, const std::filesystem::path& path);

}  // namespace sla
