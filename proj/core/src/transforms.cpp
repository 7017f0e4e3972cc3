#include "sla/transforms.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>

namespace sla {

namespace {

void check_rotation(const Rotation& rot) {
  if (rot.quarter_turns < 0 || rot.quarter_turns >= 4)
    throw std::invalid_argument("rotation quarter turns must be in [0,4), got " +
                                std::to_string(rot.quarter_turns));
}

void check_permutation(const ChannelPermutation& perm) {
  std::vector<bool> seen(perm.mapping.size(), false);
  for (std::size_t c : perm.mapping) {
    if (c >= perm.mapping.size() || seen[c])
      throw std::invalid_argument("channel mapping is not a permutation");
    seen[c] = true;
  }
  if (perm.mapping.empty())
    throw std::invalid_argument("channel permutation must not be empty");
}

bool perm_is_identity(const std::vector<std::size_t>& mapping) {
  for (std::size_t c = 0; c < mapping.size(); ++c)
    if (mapping[c] != c) return false;
  return true;
}

Image rotate_ccw(const Image& x, int quarter_turns) {
  if (x.height != x.width)
    throw std::invalid_argument("rotation requires a square image, got " +
                                std::to_string(x.height) + "x" + std::to_string(x.width));
  if (quarter_turns % 4 == 0) return x;
  const std::size_t s = x.height;
  Image out(s, s, x.channels);
  // One quarter turn CCW maps out(r,c) <- in(c, s-1-r); iterate it.
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t c = 0; c < s; ++c) {
      std::size_t sr = r, sc = c;
      for (int k = 0; k < quarter_turns % 4; ++k) {
        const std::size_t nr = sc, nc = s - 1 - sr;
        sr = nr;
        sc = nc;
      }
      for (std::size_t ch = 0; ch < x.channels; ++ch)
        out.at(r, c, ch) = x.at(sr, sc, ch);
    }
  }
  return out;
}

Image permute_channels(const Image& x, const std::vector<std::size_t>& mapping) {
  if (perm_is_identity(mapping)) return x;  // the identity applies to anything
  if (x.channels != mapping.size())
    throw std::invalid_argument("channel permutation over " +
                                std::to_string(mapping.size()) +
                                " channels applied to an image with " +
                                std::to_string(x.channels));
  Image out(x.height, x.width, x.channels);
  for (std::size_t r = 0; r < x.height; ++r)
    for (std::size_t c = 0; c < x.width; ++c)
      for (std::size_t ch = 0; ch < x.channels; ++ch)
        out.at(r, c, ch) = x.at(r, c, mapping[ch]);
  return out;
}

const std::vector<std::pair<std::string, std::vector<std::size_t>>>& canonical_perms() {
  static const std::vector<std::pair<std::string, std::vector<std::size_t>>> perms = {
      {"RGB", {0, 1, 2}}, {"RBG", {0, 2, 1}}, {"GRB", {1, 0, 2}},
      {"GBR", {1, 2, 0}}, {"BRG", {2, 0, 1}}, {"BGR", {2, 1, 0}},
  };
  return perms;
}

}  // namespace

Transformation::Transformation(Op op, std::size_t index)
    : op_(std::move(op)), index_(index) {
  std::visit(
      [](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Rotation>) {
          check_rotation(v);
        } else if constexpr (std::is_same_v<T, ChannelPermutation>) {
          check_permutation(v);
        } else {
          check_rotation(v.rotation);
          check_permutation(v.channels);
        }
      },
      op_);
}

bool Transformation::is_identity() const {
  auto [turns, mapping] = canonical();
  return turns == 0 && (mapping.empty() || perm_is_identity(mapping));
}

std::pair<int, std::vector<std::size_t>> Transformation::canonical() const {
  auto normalized = [](int turns, std::vector<std::size_t> mapping)
      -> std::pair<int, std::vector<std::size_t>> {
    // An identity mapping is the same map as no mapping at all.
    if (perm_is_identity(mapping)) mapping.clear();
    return {turns, std::move(mapping)};
  };
  return std::visit(
      [&](const auto& v) -> std::pair<int, std::vector<std::size_t>> {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Rotation>) {
          return normalized(v.quarter_turns, {});
        } else if constexpr (std::is_same_v<T, ChannelPermutation>) {
          return normalized(0, v.mapping);
        } else {
          return normalized(v.rotation.quarter_turns, v.channels.mapping);
        }
      },
      op_);
}

std::string Transformation::description() const {
  auto [turns, mapping] = canonical();
  std::string out = "rot" + std::to_string(turns * 90);
  if (!mapping.empty()) {
    out += "+perm(";
    for (std::size_t i = 0; i < mapping.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(mapping[i]);
    }
    out += ")";
  }
  return out;
}

Image apply(const Transformation& t, const Image& x) {
  return std::visit(
      [&x](const auto& v) -> Image {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Rotation>) {
          return rotate_ccw(x, v.quarter_turns);
        } else if constexpr (std::is_same_v<T, ChannelPermutation>) {
          return permute_channels(x, v.mapping);
        } else {
          return permute_channels(rotate_ccw(x, v.rotation.quarter_turns),
                                  v.channels.mapping);
        }
      },
      t.op());
}

TransformationSet::TransformationSet(std::vector<Transformation> transforms)
    : transforms_(std::move(transforms)) {
  if (transforms_.empty())
    throw std::invalid_argument("transformation set must not be empty");
  if (!transforms_[0].is_identity())
    throw std::invalid_argument("the first transformation must be the identity");
  for (std::size_t i = 0; i < transforms_.size(); ++i) {
    for (std::size_t j = i + 1; j < transforms_.size(); ++j) {
      if (transforms_[i].canonical() == transforms_[j].canonical())
        throw std::invalid_argument("duplicate transformation in set: " +
                                    transforms_[i].description());
    }
  }
}

TransformationSet rotation_set() { return rotation_subset({0, 1, 2, 3}); }

TransformationSet rotation_subset(const std::vector<int>& quarter_turns) {
  std::vector<Transformation> transforms;
  transforms.reserve(quarter_turns.size());
  for (std::size_t j = 0; j < quarter_turns.size(); ++j)
    transforms.emplace_back(Rotation{quarter_turns[j]}, j);
  return TransformationSet(std::move(transforms));
}

TransformationSet color_permutation_set() {
  return color_permutation_subset({"RGB", "RBG", "GRB", "GBR", "BRG", "BGR"});
}

TransformationSet color_permutation_subset(const std::vector<std::string>& names) {
  std::vector<Transformation> transforms;
  transforms.reserve(names.size());
  for (std::size_t j = 0; j < names.size(); ++j) {
    const auto& table = canonical_perms();
    auto it = std::find_if(table.begin(), table.end(),
                           [&](const auto& entry) { return entry.first == names[j]; });
    if (it == table.end())
      throw std::invalid_argument("unknown channel permutation name: " + names[j]);
    transforms.emplace_back(ChannelPermutation{it->second}, j);
  }
  return TransformationSet(std::move(transforms));
}

TransformationSet identity_set() { return rotation_subset({0}); }

TransformationSet product_set(const TransformationSet& rot_subset,
                              const TransformationSet& perm_subset) {
  std::vector<Transformation> transforms;
  transforms.reserve(rot_subset.size() * perm_subset.size());
  std::size_t j = 0;
  for (std::size_t r = 0; r < rot_subset.size(); ++r) {
    auto [turns, rot_mapping] = rot_subset[r].canonical();
    if (!rot_mapping.empty() && !perm_is_identity(rot_mapping))
      throw std::invalid_argument("product_set: first operand must be rotations only");
    for (std::size_t c = 0; c < perm_subset.size(); ++c) {
      auto [perm_turns, mapping] = perm_subset[c].canonical();
      if (perm_turns != 0)
        throw std::invalid_argument(
            "product_set: second operand must be channel permutations only");
      if (mapping.empty()) mapping = {0, 1, 2};
      transforms.emplace_back(Composed{Rotation{turns}, ChannelPermutation{mapping}}, j++);
    }
  }
  return TransformationSet(std::move(transforms));
}

std::vector<JointExample> expand_batch(const std::vector<LabeledImage>& batch,
                                       const TransformationSet& set,
                                       int num_classes) {
  const int m = static_cast<int>(set.size());
  std::vector<JointExample> out;
  out.reserve(batch.size() * set.size());
  for (const LabeledImage& example : batch) {
    if (example.label < 0 || example.label >= num_classes)
      throw std::out_of_range("label " + std::to_string(example.label) +
                              " out of range [0," + std::to_string(num_classes) + ")");
    for (std::size_t j = 0; j < set.size(); ++j) {
      out.push_back(JointExample{apply(set[j], *example.image),
                                 example.label * m + static_cast<int>(j)});
    }
  }
  return out;
}

}  // namespace sla
