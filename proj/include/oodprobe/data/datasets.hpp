#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "oodprobe/nn/tensor.hpp"

namespace oodprobe::data {

/// N×C×H×W images in [0,1] with integer labels in [0, num_classes).
struct LabeledImages {
  nn::TensorF images;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  /// Throws DimensionError / LabelError / DomainError when the invariants do not hold.
  void validate() const;
};

/// Rows `indices` of `src`, in that order.
LabeledImages select(const LabeledImages& src, std::span<const std::size_t> indices);

/// Concatenation of several collections with matching C, H, W.
LabeledImages concat(std::span<const LabeledImages> parts);

enum class EnvFamily { rotated, colored };

struct EnvironmentDataset {
  std::string name;
  EnvFamily family = EnvFamily::rotated;
  std::vector<LabeledImages> environments;
  std::vector<double> env_params;  // rotation in degrees, or color correlation
  double split_fraction = 0.2;
  std::uint64_t seed = 0;

  std::size_t num_envs() const noexcept { return environments.size(); }
  void validate() const;
};

struct SplitPair {
  LabeledImages in_split;
  LabeledImages out_split;
  std::vector<std::size_t> in_indices;
  std::vector<std::size_t> out_indices;
};

/// Parses an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels are scaled by 1/255 and stored as N×1×H×W.
LabeledImages load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Ten procedural 28×28 stroke classes with per-sample jitter. Labels are balanced.
LabeledImages synth_glyphs(std::uint64_t seed, std::size_t n_per_class);

/// Bilinear rotation of every image about its center, zero fill. Positive angles
/// turn counter-clockwise on screen. Angle 0 returns an exact copy.
nn::TensorF rotate_images(const nn::TensorF& images, double degrees);

/// One environment per angle, each holding `per_env_n` base images drawn without
/// replacement. Environments draw disjoint base images when the pool is large enough.
EnvironmentDataset build_rotated(const LabeledImages& base, std::span<const double> angles,
                                 std::size_t per_env_n, std::uint64_t seed);

/// Binary task (digit >= 5) with label noise; grayscale goes to channel `color`
/// where color equals the task label with probability correlations[e].
EnvironmentDataset build_colored(const LabeledImages& base, std::span<const double> correlations,
                                 double label_noise, std::size_t per_env_n, std::uint64_t seed);

/// Seeded permutation; the last ceil(fraction·N) indices form the out-split.
SplitPair split_in_out(const LabeledImages& env, double fraction, std::uint64_t seed);

inline const std::vector<double> kDefaultAngles{0, 15, 30, 45, 60, 75};
inline const std::vector<double> kDefaultCorrelations{0.9, 0.8, 0.1};
inline constexpr double kDefaultLabelNoise = 0.25;

}  // namespace oodprobe::data
