#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "oodprobe/nn/layers.hpp"

namespace oodprobe::features {

enum class Family { mini_cnn, mini_resnet };

std::string to_string(Family family);
Family family_from_string(const std::string& name);

/// Architecture of a featurizer plus its linear classifier head.
///
/// mini_cnn: 4 × (conv3×3 → relu) with strides {1,2,1,1}, then global average pool;
/// channels has 4 entries. mini_resnet: conv stem (conv-bn-relu) and `blocks`
/// residual blocks, stride 2 at every even block, then global average pool;
/// channels has blocks + 1 entries. In both cases the feature dim D is the last
/// channel count.
struct FeaturizerSpec {
  Family family = Family::mini_cnn;
  nn::Shape input_shape{1, 28, 28};  // C, H, W
  std::vector<std::size_t> channels{64, 128, 128, 128};
  std::size_t blocks = 4;
  std::size_t num_classes = 10;

  std::size_t feature_dim() const { return channels.empty() ? 0 : channels.back(); }
  /// Throws SpecError on an invalid plan.
  void validate() const;
  bool operator==(const FeaturizerSpec&) const = default;

  static FeaturizerSpec mini_cnn(nn::Shape input, std::size_t num_classes,
                                 std::vector<std::size_t> channels = {64, 128, 128, 128});
  static FeaturizerSpec mini_resnet(nn::Shape input, std::size_t num_classes,
                                    std::vector<std::size_t> channels = {32, 32, 64, 64, 128});
};

/// A probe location. `layer` is the body layer whose output is tapped.
struct TapPoint {
  std::size_t index = 0;
  std::string stage;
  nn::Shape shape;  // per-sample shape: (C,H,W) or (D)
  std::size_t layer = 0;

  std::size_t width() const { return nn::shape_numel(shape); }
};

template <typename T>
struct TapOutput {
  nn::Tensor<T> logits;
  std::vector<nn::Tensor<T>> taps;  // ordered by TapPoint::index
};

/// Featurizer body (ending in the D-dim feature vector) and linear classifier.
template <typename T>
class Model {
 public:
  Model(const FeaturizerSpec& spec, std::uint64_t seed);

  const FeaturizerSpec& spec() const noexcept { return spec_; }
  const std::vector<TapPoint>& taps() const noexcept { return taps_; }

  /// N×D features.
  nn::Tensor<T> features(nn::Tensor<T> batch, nn::Mode mode);
  nn::Tensor<T> classify(const nn::Tensor<T>& features, nn::Mode mode);
  nn::Tensor<T> forward(nn::Tensor<T> batch, nn::Mode mode) { return classify(features(std::move(batch), mode), mode); }

  /// Accumulates classifier gradients and returns dL/dfeatures.
  nn::Tensor<T> backward_classifier(const nn::Tensor<T>& grad_logits);
  /// Accumulates featurizer gradients.
  void backward_features(const nn::Tensor<T>& grad_features);

  /// Logits plus a copy of every tap activation.
  TapOutput<T> forward_with_taps(const nn::Tensor<T>& batch, nn::Mode mode = nn::Mode::eval);
  /// Activation of one tap only, flattened to N×width.
  nn::Tensor<T> tap(const nn::Tensor<T>& batch, std::size_t tap_index, nn::Mode mode = nn::Mode::eval);

  std::vector<nn::Parameter<T>*> parameters();
  std::vector<nn::Parameter<T>*> featurizer_parameters() { return body_.parameters(); }
  std::vector<nn::Parameter<T>*> classifier_parameters() { return classifier_.parameters(); }
  std::vector<nn::Buffer<T>> buffers() { return body_.buffers(); }

 private:
  void check_input(const nn::Tensor<T>& batch) const;

  FeaturizerSpec spec_;
  std::mt19937_64 init_rng_;
  nn::Sequential<T> body_;
  nn::Linear<T> classifier_;
  std::vector<TapPoint> taps_;
};

/// N×C×H×W → N×(C·H·W) in c, h, w order; N×D passes through.
template <typename T>
nn::Tensor<T> flatten_tap(nn::Tensor<T> rep);

}  // namespace oodprobe::features
