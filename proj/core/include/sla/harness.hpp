#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sla/data.hpp"
#include "sla/model.hpp"
#include "sla/objectives.hpp"
#include "sla/optimizer.hpp"
#include "sla/transforms.hpp"

namespace sla {

/// Name of the environment variable holding the default data directory.
/// Relative dataset paths in configs resolve against it; unset means "data".
inline constexpr const char* kDataDirEnvVar = "SLA_DATA_DIR";

std::filesystem::path default_data_dir();
std::filesystem::path resolve_data_path(const std::string& path);

struct DatasetSpec {
  std::string name;  // "mnist" or "synthetic"
  // mnist
  std::string train_images, train_labels, test_images, test_labels;
  std::vector<int> classes;       // optional filter, order defines new labels
  std::size_t per_class = 0;      // 0 = keep everything
  std::uint64_t subsample_seed = 0;
  // synthetic
  std::size_t dimension = 16;
  double margin = 1.0;
  std::size_t count = 256;
  std::uint64_t data_seed = 0;
};

struct TransformSpec {
  std::string kind = "identity";     // identity | rotation | colorperm | product
  std::vector<int> rotations;        // degrees, subset; empty = all four
  std::vector<std::string> perms;    // names, subset; empty = all six
};

struct BackboneSpec {
  std::string kind = "mlp";          // passthrough | projection | mlp
  std::size_t output_dim = 0;        // projection only
  std::vector<std::size_t> hidden_sizes = {256};
};

struct TrainConfig {
  int version = 1;
  DatasetSpec dataset;
  BackboneSpec backbone;
  TransformSpec transforms;
  Objective objective = Objective::baseline;
  int beta = 1;
  OptimizerConfig optimizer;
  std::size_t total_iterations = 10000;
  std::size_t batch_size = 128;   // original images; each step forwards B*M
  std::size_t eval_every = 1000;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Parses a JSON config document. Unknown keys anywhere are a hard error.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Number of transformations the description will produce, without data.
std::size_t planned_set_size(const TransformSpec& spec);
TransformationSet make_transform_set(const TransformSpec& spec);

enum class InferenceMode { si, ag, sd };

InferenceMode inference_mode_from_string(const std::string& name);
std::string inference_mode_name(InferenceMode mode);

/// Inference modes an objective's model supports, in CSV column order.
std::vector<InferenceMode> modes_for_objective(Objective objective);

struct MetricsRow {
  std::size_t iteration = 0;
  double learning_rate = 0.0;
  double loss_total = 0.0;
  std::optional<double> loss_cls, loss_ss, loss_kl, loss_ce_u;
  double train_accuracy = 0.0;
  std::optional<double> acc_si, acc_ag, acc_sd;
  double seconds = 0.0;
};

std::string metrics_csv_header();
void write_metrics_csv(const std::vector<MetricsRow>& rows,
                       const std::filesystem::path& path);

struct TrainResult {
  SlaModel model;
  std::optional<TransformationSet> set;
  std::vector<MetricsRow> metrics;
  Dataset train;
  Dataset test;
};

/// Loads data, trains per the config, evaluates every eval_every iterations
/// and at the end. When out_dir is given, writes metrics.csv and
/// checkpoint.bin there. Deterministic given the seed.
TrainResult run_training(const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& out_dir = {});

/// Top-1 accuracy per requested mode; argmax ties break to the lowest
/// class index. Requesting a mode the model's heads cannot serve is an
/// error.
std::map<InferenceMode, double> evaluate(const SlaModel& model, const Dataset& dataset,
                                         const TransformationSet& set,
                                         const std::vector<InferenceMode>& modes);

enum class ToyMode { upright, rotated_shared_label, rotated_sla };

ToyMode toy_mode_from_string(const std::string& name);

struct ToyResult {
  double test_error = 0.0;
  double seconds = 0.0;
  MetricsRow final_row;
};

/// The linear-classifier digit experiment: bias-free softmax regression on
/// raw pixels for a digit pair. upright trains on the original images;
/// rotated_shared_label trains on the 4-rotation expansion with labels
/// preserved and is scored on the expanded test set; rotated_sla trains the
/// 8-way joint classifier and is scored with aggregated inference.
ToyResult toy_experiment(int digit_a, int digit_b, ToyMode mode,
                         const std::filesystem::path& data_dir);

struct EnsembleResult {
  std::vector<double> member_accuracies;
  double ensemble_accuracy = 0.0;
};

/// Trains member_count copies of the config differing only in seed
/// (seed, seed+1, ...) and evaluates the logit-averaged ensemble on the
/// test set. Members may train on parallel threads.
EnsembleResult run_ensemble(const TrainConfig& base, std::size_t member_count);

}  // namespace sla
