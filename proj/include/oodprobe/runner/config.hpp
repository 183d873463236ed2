#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "oodprobe/algorithms/trainer.hpp"
#include "oodprobe/probing/probing.hpp"

namespace oodprobe::runner {

struct DatasetConfig {
  std::string name = "rotated_digits";  // rotated_digits | colored_digits
  std::string source = "synthetic";     // synthetic | idx
  std::filesystem::path idx_images;
  std::filesystem::path idx_labels;
  std::size_t pool_per_class = 600;  // synthetic glyphs per class
  std::vector<double> envs;          // angles or color correlations; empty means the defaults
  double label_noise = data::kDefaultLabelNoise;
  std::size_t per_env_n = 1000;
  double split_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  std::vector<std::string> algorithms{"erm"};
  std::vector<int> test_envs;  // empty means every env
  std::vector<std::uint64_t> seeds{0};
  algorithms::AlgorithmConfig algorithm;  // name is ignored
  std::string featurizer = "mini_cnn";
  std::vector<std::size_t> channels;  // empty means the family default
  std::int64_t eval_interval = 100;
  std::int64_t checkpoint_every = 500;
};

struct ProbeConfig {
  probing::ProbeSettings settings;
  bool control = true;  // also train shuffled-label probes
  double epsilon = 0.02;
  double delta = 0.05;
  double bits = 4.0;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  TrainConfig train;
  ProbeConfig probe;
  std::filesystem::path out_dir = "runs";
  std::filesystem::path reference;  // optional algorithm,mean,std CSV
  std::size_t workers = 0;          // 0 means one per logical core

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Parses TOML text. Relative paths resolve against `base_dir`. Unknown keys are errors.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = ".");
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace oodprobe::runner
