#include "sla/harness.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace sla {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double elapsed_seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

void check_keys(const json& object, std::initializer_list<const char*> allowed,
                const char* context) {
  for (const auto& item : object.items()) {
    bool known = false;
    for (const char* key : allowed) known = known || item.key() == key;
    if (!known)
      throw std::invalid_argument("unknown key \"" + item.key() + "\" in " + context);
  }
}

std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

}  // namespace

std::filesystem::path default_data_dir() {
  if (const char* dir = std::getenv(kDataDirEnvVar); dir && *dir)
    return std::filesystem::path(dir);
  return std::filesystem::path("data");
}

std::filesystem::path resolve_data_path(const std::string& path) {
  std::filesystem::path p(path);
  if (p.is_absolute()) return p;
  return default_data_dir() / p;
}

void TrainConfig::validate() const {
  if (version != 1)
    throw std::invalid_argument("unsupported config version " + std::to_string(version));
  if (dataset.name != "mnist" && dataset.name != "synthetic")
    throw std::invalid_argument("dataset.name must be \"mnist\" or \"synthetic\"");
  if (dataset.name == "mnist") {
    if (dataset.train_images.empty() || dataset.train_labels.empty() ||
        dataset.test_images.empty() || dataset.test_labels.empty())
      throw std::invalid_argument("mnist dataset needs all four IDX paths");
  } else {
    if (dataset.dimension == 0 || dataset.count == 0)
      throw std::invalid_argument("synthetic dataset needs positive dimension and count");
    if (!(dataset.margin > 0.0))
      throw std::invalid_argument("synthetic margin must be positive");
  }
  if (backbone.kind != "passthrough" && backbone.kind != "projection" &&
      backbone.kind != "mlp")
    throw std::invalid_argument("backbone.kind must be passthrough, projection or mlp");
  if (backbone.kind == "projection" && backbone.output_dim == 0)
    throw std::invalid_argument("projection backbone needs output_dim");
  if (backbone.kind == "mlp" && backbone.hidden_sizes.empty())
    throw std::invalid_argument("mlp backbone needs hidden_sizes");

  if (transforms.kind != "identity" && transforms.kind != "rotation" &&
      transforms.kind != "colorperm" && transforms.kind != "product")
    throw std::invalid_argument(
        "transforms.kind must be identity, rotation, colorperm or product");
  const std::size_t m = planned_set_size(transforms);
  if (objective == Objective::baseline && m != 1)
    throw std::invalid_argument("the baseline objective trains on the identity set only");
  if (objective == Objective::sla_sd && m < 2)
    throw std::invalid_argument(
        "self-distillation needs M >= 2; distilling a single view is vacuous");
  if (beta != 0 && beta != 1) throw std::invalid_argument("beta must be 0 or 1");

  optimizer.validate();
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (total_iterations == 0) throw std::invalid_argument("total_iterations must be >= 1");
  if (eval_every == 0) throw std::invalid_argument("eval_every must be >= 1");
}

std::size_t planned_set_size(const TransformSpec& spec) {
  if (spec.kind == "identity") return 1;
  if (spec.kind == "rotation") return spec.rotations.empty() ? 4 : spec.rotations.size();
  if (spec.kind == "colorperm") return spec.perms.empty() ? 6 : spec.perms.size();
  const std::size_t r = spec.rotations.empty() ? 4 : spec.rotations.size();
  const std::size_t c = spec.perms.empty() ? 6 : spec.perms.size();
  return r * c;
}

namespace {

std::vector<int> quarter_turns_from_degrees(const std::vector<int>& degrees) {
  std::vector<int> turns;
  for (int deg : degrees) {
    if (deg % 90 != 0 || deg < 0 || deg >= 360)
      throw std::invalid_argument("rotation degrees must be one of 0/90/180/270, got " +
                                  std::to_string(deg));
    turns.push_back(deg / 90);
  }
  return turns;
}

}  // namespace

TransformationSet make_transform_set(const TransformSpec& spec) {
  if (spec.kind == "identity") return identity_set();
  if (spec.kind == "rotation") {
    if (spec.rotations.empty()) return rotation_set();
    return rotation_subset(quarter_turns_from_degrees(spec.rotations));
  }
  if (spec.kind == "colorperm") {
    if (spec.perms.empty()) return color_permutation_set();
    return color_permutation_subset(spec.perms);
  }
  if (spec.kind == "product") {
    TransformationSet rot = spec.rotations.empty()
                                ? rotation_set()
                                : rotation_subset(quarter_turns_from_degrees(spec.rotations));
    TransformationSet perm = spec.perms.empty()
                                 ? color_permutation_set()
                                 : color_permutation_subset(spec.perms);
    return product_set(rot, perm);
  }
  throw std::invalid_argument("unknown transform kind: " + spec.kind);
}

TrainConfig parse_train_config(const std::string& json_text) {
  json doc = json::parse(json_text);
  check_keys(doc, {"version", "dataset", "backbone", "transforms", "objective",
                   "optimizer", "total_iterations", "batch_size", "eval_every", "seed"},
             "config");
  TrainConfig cfg;
  cfg.version = doc.value("version", 0);

  const json& ds = doc.at("dataset");
  check_keys(ds, {"name", "train_images", "train_labels", "test_images", "test_labels",
                  "classes", "per_class", "subsample_seed", "dimension", "margin",
                  "count", "data_seed"},
             "dataset");
  cfg.dataset.name = ds.value("name", "");
  cfg.dataset.train_images = ds.value("train_images", "");
  cfg.dataset.train_labels = ds.value("train_labels", "");
  cfg.dataset.test_images = ds.value("test_images", "");
  cfg.dataset.test_labels = ds.value("test_labels", "");
  if (ds.contains("classes")) cfg.dataset.classes = ds.at("classes").get<std::vector<int>>();
  cfg.dataset.per_class = ds.value("per_class", std::size_t{0});
  cfg.dataset.subsample_seed = ds.value("subsample_seed", std::uint64_t{0});
  cfg.dataset.dimension = ds.value("dimension", std::size_t{16});
  cfg.dataset.margin = ds.value("margin", 1.0);
  cfg.dataset.count = ds.value("count", std::size_t{256});
  cfg.dataset.data_seed = ds.value("data_seed", std::uint64_t{0});

  if (doc.contains("backbone")) {
    const json& bb = doc.at("backbone");
    check_keys(bb, {"kind", "output_dim", "hidden_sizes"}, "backbone");
    cfg.backbone.kind = bb.value("kind", "mlp");
    cfg.backbone.output_dim = bb.value("output_dim", std::size_t{0});
    if (bb.contains("hidden_sizes"))
      cfg.backbone.hidden_sizes = bb.at("hidden_sizes").get<std::vector<std::size_t>>();
  }

  if (doc.contains("transforms")) {
    const json& tr = doc.at("transforms");
    check_keys(tr, {"kind", "rotations", "perms"}, "transforms");
    cfg.transforms.kind = tr.value("kind", "identity");
    if (tr.contains("rotations"))
      cfg.transforms.rotations = tr.at("rotations").get<std::vector<int>>();
    if (tr.contains("perms"))
      cfg.transforms.perms = tr.at("perms").get<std::vector<std::string>>();
  }

  const json& obj = doc.at("objective");
  check_keys(obj, {"kind", "beta"}, "objective");
  cfg.objective = objective_from_string(obj.value("kind", ""));
  cfg.beta = obj.value("beta", 1);

  if (doc.contains("optimizer")) {
    const json& opt = doc.at("optimizer");
    check_keys(opt, {"learning_rate", "momentum", "weight_decay", "decay_milestones",
                     "decay_factor"},
               "optimizer");
    cfg.optimizer.learning_rate = opt.value("learning_rate", 0.1);
    cfg.optimizer.momentum = opt.value("momentum", 0.9);
    cfg.optimizer.weight_decay = opt.value("weight_decay", 1e-4);
    if (opt.contains("decay_milestones"))
      cfg.optimizer.decay_milestones = opt.at("decay_milestones").get<std::vector<double>>();
    cfg.optimizer.decay_factor = opt.value("decay_factor", 0.1);
  }

  cfg.total_iterations = doc.value("total_iterations", std::size_t{10000});
  cfg.batch_size = doc.value("batch_size", std::size_t{128});
  cfg.eval_every = doc.value("eval_every", std::size_t{1000});
  cfg.seed = doc.value("seed", std::uint64_t{0});

  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_train_config(buffer.str());
}

InferenceMode inference_mode_from_string(const std::string& name) {
  if (name == "si") return InferenceMode::si;
  if (name == "ag") return InferenceMode::ag;
  if (name == "sd") return InferenceMode::sd;
  throw std::invalid_argument("unknown inference mode: " + name);
}

std::string inference_mode_name(InferenceMode mode) {
  switch (mode) {
    case InferenceMode::si: return "si";
    case InferenceMode::ag: return "ag";
    case InferenceMode::sd: return "sd";
  }
  return "?";
}

std::vector<InferenceMode> modes_for_objective(Objective objective) {
  switch (objective) {
    case Objective::baseline:
    case Objective::da:
    case Objective::mt:
      return {InferenceMode::si};
    case Objective::sla:
      return {InferenceMode::si, InferenceMode::ag};
    case Objective::sla_sd:
      return {InferenceMode::si, InferenceMode::ag, InferenceMode::sd};
  }
  return {};
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string format_cell(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

Dataset load_dataset_split(const DatasetSpec& spec, bool train_split) {
  if (spec.name == "synthetic") {
    const std::uint64_t seed = train_split ? spec.data_seed : spec.data_seed + 1;
    return synthetic_two_class(spec.dimension, spec.margin, spec.count, seed);
  }
  Dataset ds = train_split
                   ? load_mnist_idx(resolve_data_path(spec.train_images),
                                    resolve_data_path(spec.train_labels))
                   : load_mnist_idx(resolve_data_path(spec.test_images),
                                    resolve_data_path(spec.test_labels));
  if (!spec.classes.empty()) ds = select_classes(ds, spec.classes);
  if (train_split && spec.per_class > 0)
    ds = subsample_per_class(ds, SubsampleSpec{spec.per_class, spec.subsample_seed});
  return ds;
}

void check_set_against_images(const TransformationSet& set, const Image& sample) {
  for (const Transformation& t : set.transforms()) {
    auto [turns, mapping] = t.canonical();
    if (turns != 0 && sample.height != sample.width)
      throw std::invalid_argument("rotations need square images, got " +
                                  std::to_string(sample.height) + "x" +
                                  std::to_string(sample.width));
    if (!mapping.empty() && mapping.size() != sample.channels)
      throw std::invalid_argument("channel permutation over " +
                                  std::to_string(mapping.size()) +
                                  " channels applied to " +
                                  std::to_string(sample.channels) + "-channel images");
  }
}

SlaModel build_model(const TrainConfig& cfg, std::size_t input_dim, int num_classes,
                     std::size_t num_transforms, Rng& rng) {
  BackboneConfig bb;
  bb.input_dim = input_dim;
  if (cfg.backbone.kind == "passthrough") {
    bb.kind = BackboneKind::linear_passthrough;
  } else if (cfg.backbone.kind == "projection") {
    bb.kind = BackboneKind::linear_projection;
    bb.output_dim = cfg.backbone.output_dim;
  } else {
    bb.kind = BackboneKind::mlp;
    bb.hidden_sizes = cfg.backbone.hidden_sizes;
  }
  SlaModel model;
  model.num_classes = static_cast<std::size_t>(num_classes);
  model.num_transforms = num_transforms;
  model.backbone = Backbone(bb, rng);
  const std::size_t dim = model.backbone.embedding_dim();
  // Head init order is fixed: joint w, then u, then v.
  const bool needs_joint =
      cfg.objective == Objective::sla || cfg.objective == Objective::sla_sd;
  const bool needs_u = cfg.objective != Objective::sla;
  const bool needs_v = cfg.objective == Objective::mt;
  if (needs_joint)
    model.joint.emplace(model.num_classes, num_transforms, dim, rng);
  if (needs_u) model.u.emplace(make_head(model.num_classes, dim, rng));
  if (needs_v) model.v.emplace(make_head(num_transforms, dim, rng));
  return model;
}

LossBreakdown compute_loss(SlaModel& model, Objective objective,
                           const std::vector<LabeledImage>& batch,
                           const TransformationSet& set, int beta) {
  switch (objective) {
    case Objective::baseline:
    case Objective::da:
      return loss_da(model, batch, set);
    case Objective::mt:
      return loss_mt(model, batch, set);
    case Objective::sla:
      return loss_sla(model, batch, set);
    case Objective::sla_sd:
      return loss_sla_sd(model, batch, set, beta);
  }
  throw std::logic_error("unreachable objective");
}

Tensor chunk_matrix(const Dataset& ds, std::size_t begin, std::size_t end,
                    const Transformation* transform) {
  const std::size_t d = ds.images[begin].size();
  std::vector<double> values;
  values.reserve((end - begin) * d);
  for (std::size_t i = begin; i < end; ++i) {
    if (transform) {
      Image t = apply(*transform, ds.images[i]);
      values.insert(values.end(), t.pixels.begin(), t.pixels.end());
    } else {
      values.insert(values.end(), ds.images[i].pixels.begin(), ds.images[i].pixels.end());
    }
  }
  return Tensor::from_values({end - begin, d}, std::move(values));
}

Tensor si_logits(const SlaModel& model, const Tensor& z) {
  if (model.joint) return conditional_logits(*model.joint, z, 0);
  if (model.u) return linear(z, model.u->value);
  throw std::invalid_argument("model has neither a joint head nor a u head");
}

constexpr std::size_t kEvalChunk = 512;

}  // namespace

std::map<InferenceMode, double> evaluate(const SlaModel& model, const Dataset& dataset,
                                         const TransformationSet& set,
                                         const std::vector<InferenceMode>& modes) {
  if (dataset.size() == 0) throw std::invalid_argument("cannot evaluate an empty dataset");
  for (InferenceMode mode : modes) {
    if (mode == InferenceMode::ag && !model.joint)
      throw std::invalid_argument("aggregated inference needs the joint head");
    if (mode == InferenceMode::sd && !model.u)
      throw std::invalid_argument("distilled inference needs the u head");
    if (mode == InferenceMode::si && !model.joint && !model.u)
      throw std::invalid_argument("single inference needs a joint or u head");
  }

  const std::size_t n = dataset.size();
  const std::size_t num_classes = static_cast<std::size_t>(dataset.num_classes);
  std::map<InferenceMode, std::size_t> correct;
  for (InferenceMode mode : modes) correct[mode] = 0;

  const bool wants_si = correct.count(InferenceMode::si) > 0;
  const bool wants_ag = correct.count(InferenceMode::ag) > 0;
  const bool wants_sd = correct.count(InferenceMode::sd) > 0;

  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) {
    const std::size_t end = std::min(begin + kEvalChunk, n);
    const std::size_t rows = end - begin;

    if (wants_si || wants_sd) {
      Tensor z = model.backbone.embed_matrix(chunk_matrix(dataset, begin, end, nullptr));
      if (wants_si) {
        Tensor logits = si_logits(model, z);
        for (std::size_t r = 0; r < rows; ++r) {
          auto row = logits.values().subspan(r * num_classes, num_classes);
          if (argmax_lowest(row) == static_cast<std::size_t>(dataset.labels[begin + r]))
            ++correct[InferenceMode::si];
        }
      }
      if (wants_sd) {
        Tensor logits = linear(z, model.u->value);
        for (std::size_t r = 0; r < rows; ++r) {
          auto row = logits.values().subspan(r * num_classes, num_classes);
          if (argmax_lowest(row) == static_cast<std::size_t>(dataset.labels[begin + r]))
            ++correct[InferenceMode::sd];
        }
      }
    }

    if (wants_ag) {
      const std::size_t m = set.size();
      std::vector<double> sums(rows * num_classes, 0.0);
      for (std::size_t j = 0; j < m; ++j) {
        Tensor z = model.backbone.embed_matrix(chunk_matrix(dataset, begin, end, &set[j]));
        Tensor cond = conditional_logits(*model.joint, z, j);
        for (std::size_t i = 0; i < sums.size(); ++i) sums[i] += cond.values()[i];
      }
      const double inv_m = 1.0 / static_cast<double>(m);
      for (double& v : sums) v *= inv_m;
      for (std::size_t r = 0; r < rows; ++r) {
        std::span<const double> row(sums.data() + r * num_classes, num_classes);
        if (argmax_lowest(row) == static_cast<std::size_t>(dataset.labels[begin + r]))
          ++correct[InferenceMode::ag];
      }
    }
  }

  std::map<InferenceMode, double> accuracy;
  for (auto& [mode, hits] : correct)
    accuracy[mode] = static_cast<double>(hits) / static_cast<double>(n);
  return accuracy;
}

std::string metrics_csv_header() {
  return "iteration,lr,loss_total,loss_cls,loss_ss,loss_kl,loss_ce_u,"
         "acc_train,acc_si,acc_ag,acc_sd,seconds";
}

void write_metrics_csv(const std::vector<MetricsRow>& rows,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open metrics csv for writing: " + path.string());
  out << metrics_csv_header() << "\n";
  char seconds_buf[32];
  for (const MetricsRow& row : rows) {
    std::snprintf(seconds_buf, sizeof seconds_buf, "%.3f", row.seconds);
    out << row.iteration << "," << format_double(row.learning_rate) << ","
        << format_double(row.loss_total) << "," << format_cell(row.loss_cls) << ","
        << format_cell(row.loss_ss) << "," << format_cell(row.loss_kl) << ","
        << format_cell(row.loss_ce_u) << "," << format_double(row.train_accuracy) << ","
        << format_cell(row.acc_si) << "," << format_cell(row.acc_ag) << ","
        << format_cell(row.acc_sd) << "," << seconds_buf << "\n";
  }
}

TrainResult run_training(const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  const auto start = Clock::now();

  TrainResult result;
  result.train = load_dataset_split(cfg.dataset, true);
  result.test = load_dataset_split(cfg.dataset, false);
  result.train.validate();
  if (result.train.size() < cfg.batch_size)
    throw std::invalid_argument("batch_size " + std::to_string(cfg.batch_size) +
                                " exceeds the training set size " +
                                std::to_string(result.train.size()));

  TransformationSet set = make_transform_set(cfg.transforms);
  check_set_against_images(set, result.train.images[0]);

  Rng init_rng(cfg.seed);
  SlaModel model = build_model(cfg, result.train.images[0].size(),
                               result.train.num_classes, set.size(), init_rng);
  std::vector<Parameter*> params = model.parameters();

  // Separate stream for data order so adding parameters never shifts batches.
  Rng order_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<std::size_t> order(result.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // forces a shuffle before the first batch

  const std::vector<InferenceMode> eval_modes = modes_for_objective(cfg.objective);
  std::vector<LabeledImage> batch(cfg.batch_size);

  for (std::size_t it = 0; it < cfg.total_iterations; ++it) {
    if (cursor + cfg.batch_size > order.size()) {
      order_rng.shuffle(order);
      cursor = 0;
    }
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx = order[cursor + b];
      batch[b] = LabeledImage{&result.train.images[idx], result.train.labels[idx]};
    }
    cursor += cfg.batch_size;

    LossBreakdown loss = compute_loss(model, cfg.objective, batch, set, cfg.beta);
    loss.total.backward();
    sgd_step(params, cfg.optimizer, it, cfg.total_iterations);

    const bool last = it + 1 == cfg.total_iterations;
    if ((it + 1) % cfg.eval_every == 0 || last) {
      MetricsRow row;
      row.iteration = it + 1;
      row.learning_rate = learning_rate_at(cfg.optimizer, it, cfg.total_iterations);
      row.loss_total = loss.total_value();
      row.loss_cls = loss.classification;
      row.loss_ss = loss.self_supervision;
      row.loss_kl = loss.distillation_kl;
      row.loss_ce_u = loss.distillation_ce;
      row.train_accuracy =
          evaluate(model, result.train, set, {InferenceMode::si}).at(InferenceMode::si);
      auto test_acc = evaluate(model, result.test, set, eval_modes);
      for (auto [mode, acc] : test_acc) {
        if (mode == InferenceMode::si) row.acc_si = acc;
        if (mode == InferenceMode::ag) row.acc_ag = acc;
        if (mode == InferenceMode::sd) row.acc_sd = acc;
      }
      row.seconds = elapsed_seconds(start);
      result.metrics.push_back(row);
    }
  }

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    write_metrics_csv(result.metrics, *out_dir / "metrics.csv");
    save_checkpoint(model, *out_dir / "checkpoint.bin");
  }
  result.model = std::move(model);
  result.set = std::move(set);
  return result;
}

ToyMode toy_mode_from_string(const std::string& name) {
  if (name == "upright") return ToyMode::upright;
  if (name == "rotated_shared_label") return ToyMode::rotated_shared_label;
  if (name == "rotated_sla") return ToyMode::rotated_sla;
  throw std::invalid_argument("unknown toy mode: " + name);
}

ToyResult toy_experiment(int digit_a, int digit_b, ToyMode mode,
                         const std::filesystem::path& data_dir) {
  if (digit_a == digit_b || digit_a < 0 || digit_a > 9 || digit_b < 0 || digit_b > 9)
    throw std::invalid_argument("digit pair must be two distinct digits in [0,10)");

  const std::filesystem::path root = std::filesystem::absolute(data_dir);
  TrainConfig cfg;
  cfg.dataset.name = "mnist";
  cfg.dataset.train_images = (root / "mnist/train-images-idx3-ubyte").string();
  cfg.dataset.train_labels = (root / "mnist/train-labels-idx1-ubyte").string();
  cfg.dataset.test_images = (root / "mnist/t10k-images-idx3-ubyte").string();
  cfg.dataset.test_labels = (root / "mnist/t10k-labels-idx1-ubyte").string();
  cfg.dataset.classes = {digit_a, digit_b};
  cfg.backbone.kind = "passthrough";
  cfg.backbone.hidden_sizes.clear();
  cfg.transforms.kind = mode == ToyMode::upright ? "identity" : "rotation";
  cfg.objective = mode == ToyMode::rotated_sla ? Objective::sla
                  : mode == ToyMode::upright   ? Objective::baseline
                                               : Objective::da;
  cfg.total_iterations = 5000;
  cfg.batch_size = 128;
  cfg.eval_every = cfg.total_iterations;
  cfg.seed = 1;

  const auto start = Clock::now();
  TrainResult trained = run_training(cfg);

  double accuracy = 0.0;
  MetricsRow row = trained.metrics.back();
  if (mode == ToyMode::rotated_shared_label) {
    // Scored on the rotation-expanded test set: every rotated digit keeps
    // its original label and gets its own prediction.
    Dataset expanded;
    expanded.name = trained.test.name + "+rot4";
    expanded.num_classes = trained.test.num_classes;
    const TransformationSet rotations = rotation_set();
    for (std::size_t i = 0; i < trained.test.size(); ++i) {
      for (std::size_t j = 0; j < rotations.size(); ++j) {
        expanded.images.push_back(apply(rotations[j], trained.test.images[i]));
        expanded.labels.push_back(trained.test.labels[i]);
      }
    }
    accuracy = evaluate(trained.model, expanded, *trained.set, {InferenceMode::si})
                   .at(InferenceMode::si);
    row.acc_si = accuracy;
  } else if (mode == ToyMode::rotated_sla) {
    accuracy = evaluate(trained.model, trained.test, *trained.set, {InferenceMode::ag})
                   .at(InferenceMode::ag);
    row.acc_ag = accuracy;
  } else {
    accuracy = row.acc_si.value();
  }

  ToyResult out;
  out.test_error = 1.0 - accuracy;
  out.seconds = elapsed_seconds(start);
  row.seconds = out.seconds;
  out.final_row = row;
  return out;
}

EnsembleResult run_ensemble(const TrainConfig& base, std::size_t member_count) {
  if (member_count == 0) throw std::invalid_argument("ensemble needs at least one member");
  base.validate();

  std::vector<TrainResult> results(member_count);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&]() {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= member_count) return;
      try {
        TrainConfig cfg = base;
        cfg.seed = base.seed + k;
        results[k] = run_training(cfg);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  const std::size_t workers =
      std::min<std::size_t>(member_count,
                            std::max(1u, std::thread::hardware_concurrency()));
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < workers; ++i) threads.emplace_back(worker);
  for (std::thread& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);

  const Dataset& test = results[0].test;
  const std::size_t num_classes = static_cast<std::size_t>(test.num_classes);
  for (const TrainResult& r : results) {
    if (r.model.num_classes != results[0].model.num_classes)
      throw std::invalid_argument("ensemble members disagree on the class count");
  }

  EnsembleResult out;
  for (TrainResult& r : results) {
    out.member_accuracies.push_back(
        evaluate(r.model, test, *r.set, {InferenceMode::si}).at(InferenceMode::si));
  }

  std::size_t hits = 0;
  for (std::size_t begin = 0; begin < test.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(begin + kEvalChunk, test.size());
    const std::size_t rows = end - begin;
    std::vector<double> sums(rows * num_classes, 0.0);
    for (TrainResult& r : results) {
      Tensor z = r.model.backbone.embed_matrix(chunk_matrix(test, begin, end, nullptr));
      Tensor logits = si_logits(r.model, z);
      for (std::size_t i = 0; i < sums.size(); ++i) sums[i] += logits.values()[i];
    }
    const double inv = 1.0 / static_cast<double>(member_count);
    for (double& v : sums) v *= inv;
    for (std::size_t r = 0; r < rows; ++r) {
      std::span<const double> row(sums.data() + r * num_classes, num_classes);
      if (argmax_lowest(row) == static_cast<std::size_t>(test.labels[begin + r])) ++hits;
    }
  }
  out.ensemble_accuracy = static_cast<double>(hits) / static_cast<double>(test.size());
  return out;
}

}  // namespace sla
