#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "oodprobe/algorithms/trainer.hpp"

namespace oodprobe::probing {

/// Linear environment classifier on one flattened tap.
struct Probe {
  std::size_t tap_index = 0;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  nn::TensorF weight;  // input_dim × num_classes
  nn::TensorF bias;    // num_classes
};

struct ProbeSettings {
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::int64_t budget = 2000;  // max minibatches
  std::int64_t eval_interval = 100;
  double min_improvement = 0.002;
  int patience = 3;
  std::size_t chunk = 256;
  bool shuffle_labels = false;  // control task

  void validate() const;
};

struct CurvePoint {
  std::int64_t step = 0;
  double accuracy = 0.0;
  bool operator==(const CurvePoint&) const = default;
};

struct ProbeResult {
  std::string algorithm;
  std::string dataset;
  int test_env = 0;
  std::uint64_t seed = 0;
  std::size_t tap_index = 0;
  bool control = false;
  double accuracy = 0.0;  // best validation accuracy, Perf(f_p)
  std::vector<CurvePoint> curve;
  std::size_t samples_used = 0;
};

/// Probe-record rows for the metrics stream: one "probe_acc" row and one
/// "probe_val_curve" row per evaluation.
std::vector<nlohmann::json> to_json_rows(const ProbeResult& r);

/// One zero-initialized probe per tap, sized for `num_envs` classes.
std::vector<Probe> attach_probes(const features::Checkpoint& checkpoint, std::size_t num_envs);

/// Env-index labelled tap features of the held-in environments.
struct ProbeData {
  nn::TensorF train_x;
  std::vector<int> train_y;
  nn::TensorF val_x;
  std::vector<int> val_y;
  std::size_t num_classes = 0;
};

/// Flattened tap activations of the in-splits (train) and out-splits (validation)
/// of every env except `test_env`; labels are positions among those envs.
ProbeData extract_probe_data(features::Model<float>& model, const algorithms::SplitDataset& data, int test_env,
                             std::size_t tap_index, std::size_t chunk = 256);

/// Trains `probe` on precomputed features. Fills accuracy, curve and samples_used.
ProbeResult fit_probe(Probe& probe, const ProbeData& data, const ProbeSettings& settings, std::uint64_t seed);

/// Extracts the tap from a frozen copy of `checkpoint` and fits the probe.
ProbeResult train_probe(Probe& probe, const features::Checkpoint& checkpoint, const algorithms::SplitDataset& data,
                        int test_env, const ProbeSettings& settings, std::uint64_t seed);

double dummy_accuracy(std::size_t num_classes);

/// n = ceil(L / (2 eps^2)) with L = log_class_size + ln(2 / delta).
std::uint64_t recommend_probe_samples(double epsilon, double delta, double log_class_size);

/// ln|F| for a probe with `parameters` weights at `bits` effective bits each.
double probe_log_class_size(std::size_t parameters, double bits = 4.0);

struct CellKey {
  std::string algorithm;
  int test_env = 0;
  std::uint64_t seed = 0;
  auto operator<=>(const CellKey&) const = default;
};

std::string to_string(const CellKey& k);

struct SuiteRequest {
  std::vector<std::string> algorithms;
  std::vector<int> test_envs;
  std::vector<std::uint64_t> seeds;
  ProbeSettings settings;
  std::size_t workers = 1;
};

struct SuiteResult {
  std::vector<ProbeResult> raw;                      // cell order, then tap order
  std::map<std::string, std::vector<double>> grid;   // algorithm → mean accuracy per tap
  std::size_t num_classes = 0;
};

/// Probes every tap of every requested cell. Throws CoverageError listing the
/// cells without a checkpoint.
SuiteResult run_probing_suite(const std::map<CellKey, features::Checkpoint>& checkpoints,
                              const algorithms::SplitDataset& data, const SuiteRequest& request);

/// Seed of the probe for one (cell, tap).
std::uint64_t probe_seed(const CellKey& cell, std::size_t tap_index, bool control);

}  // namespace oodprobe::probing
