#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "oodprobe/features/featurizer.hpp"

namespace oodprobe::features {

inline constexpr const char* kCheckpointFormat = "oodprobe-ckpt-v1";

struct TrainingMetadata {
  std::string algorithm;
  std::string dataset;
  int test_env = -1;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  bool operator==(const TrainingMetadata&) const = default;
};

struct NamedArray {
  std::string name;
  nn::Shape shape;
  std::vector<float> values;
  bool operator==(const NamedArray&) const = default;
};

/// Frozen parameters and buffers of a Model<float>, in model order.
struct Checkpoint {
  FeaturizerSpec spec;
  TrainingMetadata meta;
  std::vector<NamedArray> parameters;  // featurizer first, then classifier
  std::vector<NamedArray> buffers;     // batch-norm running statistics
};

Checkpoint capture(Model<float>& model, const TrainingMetadata& meta);

/// Copies checkpoint values into `model`. Throws CheckpointError when names or
/// shapes disagree with the model's architecture.
void restore(Model<float>& model, const Checkpoint& ckpt);

/// Fresh model loaded with the checkpoint's values.
Model<float> instantiate(const Checkpoint& ckpt);

/// FNV-1a over the featurizer parameter and buffer names and bytes, as 16 hex digits.
std::string featurizer_checksum(const Checkpoint& ckpt);
std::string featurizer_checksum(Model<float>& model);

/// File layout: u64 little-endian manifest length, JSON manifest, little-endian
/// float32 blob. Writes go through a temporary file and a rename.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json spec_to_json(const FeaturizerSpec& spec);
FeaturizerSpec spec_from_json(const nlohmann::json& j);

}  // namespace oodprobe::features
