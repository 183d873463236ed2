#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "oodprobe/data/datasets.hpp"
#include "oodprobe/features/checkpoint.hpp"

namespace oodprobe::algorithms {

/// The implemented algorithm names, in canonical order.
const std::vector<std::string>& algorithm_names();
bool is_algorithm(const std::string& name);

struct AlgorithmConfig {
  std::string name = "erm";
  double lr = 1e-3;
  std::int64_t steps = 2000;
  std::size_t batch_size = 64;     // per environment
  double lambda = 1.0;             // irm, vrex, coral, mmd
  std::int64_t anneal_step = 500;  // penalty weight is 0 before this step, lambda from it on
  double eta = 0.01;               // groupdro
  double tau = 1.0;                // andmask
  double alpha = 0.2;              // mixup
  double gamma = 0.0;              // mmd kernel width; 0 means 1/D

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct TrainSettings {
  features::FeaturizerSpec featurizer;
  std::int64_t eval_interval = 100;
  std::int64_t checkpoint_every = 500;
  std::size_t eval_in_limit = 256;  // in-split samples per env used for "in" metrics
  std::size_t eval_chunk = 256;
};

struct MetricRecord {
  std::string algorithm;
  std::string dataset;
  int test_env = 0;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::string split;   // in | out | test
  std::string metric;  // acc | loss
  double value = 0.0;
};

nlohmann::json to_json(const MetricRecord& r);

struct TrainResult {
  features::Checkpoint final_checkpoint;
  double test_accuracy = 0.0;  // Perf(f_g): accuracy on the held-out env's out-split
  std::vector<MetricRecord> metrics;
};

struct TrainCallbacks {
  std::function<void(const features::Checkpoint&)> on_checkpoint;
  std::function<void(const MetricRecord&)> on_metric;
  std::function<void(std::int64_t step, double objective)> on_step;
};

/// Per-env in/out splits of a dataset, computed once with the dataset's split fraction.
struct SplitDataset {
  const data::EnvironmentDataset* source = nullptr;
  std::vector<data::SplitPair> splits;
};

SplitDataset split_dataset(const data::EnvironmentDataset& dataset);

/// Trains on the in-splits of every env except `test_env`. Throws TrainingFailure
/// carrying the step when the objective becomes non-finite.
TrainResult train_algorithm(const AlgorithmConfig& config, const SplitDataset& data, int test_env,
                            std::uint64_t seed, const TrainSettings& settings, const TrainCallbacks& callbacks = {});

/// Accuracy of `model` on `images` evaluated in chunks (eval mode).
double evaluate_accuracy(features::Model<float>& model, const data::LabeledImages& images, std::size_t chunk = 256);

}  // namespace oodprobe::algorithms
