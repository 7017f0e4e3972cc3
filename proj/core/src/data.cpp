#include "sla/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace sla {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be_u32(std::ifstream& in, const std::filesystem::path& path,
                          const char* what) {
  std::array<unsigned char, 4> buf{};
  if (!in.read(reinterpret_cast<char*>(buf.data()), 4))
    throw std::runtime_error("failed to read " + std::string(what) + " from " +
                             path.string());
  return (static_cast<std::uint32_t>(buf[0]) << 24) |
         (static_cast<std::uint32_t>(buf[1]) << 16) |
         (static_cast<std::uint32_t>(buf[2]) << 8) |
         static_cast<std::uint32_t>(buf[3]);
}

void write_be_u32(std::ofstream& out, std::uint32_t v) {
  const std::array<unsigned char, 4> buf = {
      static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
      static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(buf.data()), 4);
}

std::string hex_u32(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out = "0x";
  for (int shift = 28; shift >= 0; shift -= 4)
    out += digits[(v >> shift) & 0xf];
  return out;
}

}  // namespace

void Dataset::validate() const {
  if (images.size() != labels.size())
    throw std::invalid_argument("dataset has " + std::to_string(images.size()) +
                                " images but " + std::to_string(labels.size()) +
                                " labels");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw std::invalid_argument("label " + std::to_string(labels[i]) +
                                  " at index " + std::to_string(i) +
                                  " out of range [0," + std::to_string(num_classes) + ")");
  }
}

Dataset load_mnist_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
  std::ifstream images_file(images_path, std::ios::binary);
  if (!images_file)
    throw std::runtime_error("cannot open image file: " + images_path.string());
  const std::uint32_t images_magic = read_be_u32(images_file, images_path, "magic");
  if (images_magic != kImagesMagic)
    throw std::runtime_error("bad image file magic " + hex_u32(images_magic) +
                             " (expected " + hex_u32(kImagesMagic) + ") in " +
                             images_path.string());
  const std::uint32_t count = read_be_u32(images_file, images_path, "count");
  const std::uint32_t rows = read_be_u32(images_file, images_path, "rows");
  const std::uint32_t cols = read_be_u32(images_file, images_path, "cols");

  std::ifstream labels_file(labels_path, std::ios::binary);
  if (!labels_file)
    throw std::runtime_error("cannot open label file: " + labels_path.string());
  const std::uint32_t labels_magic = read_be_u32(labels_file, labels_path, "magic");
  if (labels_magic != kLabelsMagic)
    throw std::runtime_error("bad label file magic " + hex_u32(labels_magic) +
                             " (expected " + hex_u32(kLabelsMagic) + ") in " +
                             labels_path.string());
  const std::uint32_t label_count = read_be_u32(labels_file, labels_path, "count");
  if (label_count != count)
    throw std::runtime_error("image file has " + std::to_string(count) +
                             " entries but label file has " + std::to_string(label_count));

  std::vector<unsigned char> pixel_bytes(static_cast<std::size_t>(count) * rows * cols);
  if (!images_file.read(reinterpret_cast<char*>(pixel_bytes.data()),
                        static_cast<std::streamsize>(pixel_bytes.size())))
    throw std::runtime_error("image file truncated: " + images_path.string());
  std::vector<unsigned char> label_bytes(count);
  if (!labels_file.read(reinterpret_cast<char*>(label_bytes.data()),
                        static_cast<std::streamsize>(label_bytes.size())))
    throw std::runtime_error("label file truncated: " + labels_path.string());

  Dataset ds;
  ds.name = images_path.filename().string();
  ds.images.reserve(count);
  ds.labels.reserve(count);
  int max_label = 0;
  const unsigned char* src = pixel_bytes.data();
  for (std::uint32_t i = 0; i < count; ++i) {
    Image img(rows, cols, 1);
    for (std::size_t p = 0; p < img.size(); ++p)
      img.pixels[p] = static_cast<double>(src[p]) / 255.0;
    src += img.size();
    ds.images.push_back(std::move(img));
    ds.labels.push_back(static_cast<int>(label_bytes[i]));
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.num_classes = max_label + 1;
  ds.validate();
  return ds;
}

void write_mnist_idx(const Dataset& ds, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  if (ds.images.empty()) throw std::invalid_argument("refusing to write an empty dataset");
  const std::size_t rows = ds.images[0].height;
  const std::size_t cols = ds.images[0].width;
  std::ofstream images_file(images_path, std::ios::binary);
  if (!images_file)
    throw std::runtime_error("cannot open image file for writing: " + images_path.string());
  write_be_u32(images_file, kImagesMagic);
  write_be_u32(images_file, static_cast<std::uint32_t>(ds.size()));
  write_be_u32(images_file, static_cast<std::uint32_t>(rows));
  write_be_u32(images_file, static_cast<std::uint32_t>(cols));
  for (const Image& img : ds.images) {
    if (img.height != rows || img.width != cols || img.channels != 1)
      throw std::invalid_argument("IDX export needs uniform single-channel images");
    for (double v : img.pixels) {
      const auto byte = static_cast<unsigned char>(std::lround(v * 255.0));
      images_file.write(reinterpret_cast<const char*>(&byte), 1);
    }
  }
  std::ofstream labels_file(labels_path, std::ios::binary);
  if (!labels_file)
    throw std::runtime_error("cannot open label file for writing: " + labels_path.string());
  write_be_u32(labels_file, kLabelsMagic);
  write_be_u32(labels_file, static_cast<std::uint32_t>(ds.size()));
  for (int label : ds.labels) {
    const auto byte = static_cast<unsigned char>(label);
    labels_file.write(reinterpret_cast<const char*>(&byte), 1);
  }
}

Dataset select_classes(const Dataset& ds, const std::vector<int>& classes) {
  if (classes.empty()) throw std::invalid_argument("class list must not be empty");
  std::map<int, int> relabel;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (relabel.count(classes[i]))
      throw std::invalid_argument("class " + std::to_string(classes[i]) +
                                  " listed twice");
    relabel[classes[i]] = static_cast<int>(i);
  }
  std::vector<std::size_t> counts(classes.size(), 0);
  Dataset out;
  out.name = ds.name;
  out.num_classes = static_cast<int>(classes.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto it = relabel.find(ds.labels[i]);
    if (it == relabel.end()) continue;
    out.images.push_back(ds.images[i]);
    out.labels.push_back(it->second);
    ++counts[static_cast<std::size_t>(it->second)];
  }
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (counts[i] == 0)
      throw std::invalid_argument("class " + std::to_string(classes[i]) +
                                  " is not present in dataset " + ds.name);
  }
  return out;
}

Dataset subsample_per_class(const Dataset& ds, const SubsampleSpec& spec) {
  if (spec.per_class == 0) throw std::invalid_argument("per_class must be positive");
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  Rng rng(spec.seed);
  std::vector<std::size_t> chosen;
  for (int c = 0; c < ds.num_classes; ++c) {
    auto& indices = by_class[static_cast<std::size_t>(c)];
    if (indices.size() < spec.per_class)
      throw std::invalid_argument("class " + std::to_string(c) + " has only " +
                                  std::to_string(indices.size()) +
                                  " examples, need " + std::to_string(spec.per_class));
    rng.shuffle(indices);
    chosen.insert(chosen.end(), indices.begin(),
                  indices.begin() + static_cast<std::ptrdiff_t>(spec.per_class));
  }
  Dataset out;
  out.name = ds.name + "@" + std::to_string(spec.per_class) + "per";
  out.num_classes = ds.num_classes;
  out.images.reserve(chosen.size());
  out.labels.reserve(chosen.size());
  for (std::size_t i : chosen) {
    out.images.push_back(ds.images[i]);
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

Dataset synthetic_two_class(std::size_t dimension, double margin,
                            std::size_t count, std::uint64_t seed) {
  if (!(margin > 0.0)) throw std::invalid_argument("margin must be positive");
  if (dimension == 0) throw std::invalid_argument("dimension must be positive");
  Rng rng(seed);

  // Random unit normal; clusters sit at 0.5 +- (margin/2) * normal with
  // fixed per-coordinate noise of 1/12, clamped into the pixel range.
  std::vector<double> normal(dimension);
  double norm = 0.0;
  for (double& v : normal) {
    v = rng.next_gaussian();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : normal) v /= norm;
  constexpr double kNoise = 1.0 / 12.0;

  // Square layout when possible so rotation sets apply to synthetic data.
  std::size_t height = 1, width = dimension;
  const auto root = static_cast<std::size_t>(std::lround(std::sqrt(dimension)));
  if (root * root == dimension) height = width = root;

  Dataset out;
  out.name = "synthetic2";
  out.num_classes = 2;
  out.images.reserve(count);
  out.labels.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % 2);
    const double side = label == 0 ? -1.0 : 1.0;
    Image img(height, width, 1);
    for (std::size_t k = 0; k < dimension; ++k) {
      const double v = 0.5 + side * (margin / 2.0) * normal[k] +
                       kNoise * rng.next_gaussian();
      img.pixels[k] = std::clamp(v, 0.0, 1.0);
    }
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
  return out;
}

void write_label_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open csv for writing: " + path.string());
  out << "index,label\n";
  for (std::size_t i = 0; i < ds.size(); ++i)
    out << i << "," << ds.labels[i] << "\n";
}

}  // namespace sla
