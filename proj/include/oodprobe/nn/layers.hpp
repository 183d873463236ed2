#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "oodprobe/nn/ops.hpp"

namespace oodprobe::nn {

enum class LayerKind { conv, linear, relu, avg_pool, global_avg_pool, batch_norm, residual_block };

std::string to_string(LayerKind kind);

/// Hyperparameters for one layer of the fixed catalog. Unused fields are ignored
/// for kinds that do not need them.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::size_t pool = 2;
  bool bias = true;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                        std::size_t padding, bool bias = true);
  static LayerSpec dense(std::size_t in, std::size_t out, bool bias = true);
  static LayerSpec relu_layer();
  static LayerSpec avg_pool_layer(std::size_t k);
  static LayerSpec global_pool();
  static LayerSpec batch_norm_layer(std::size_t channels);
  static LayerSpec residual(std::size_t in, std::size_t out, std::size_t stride);

  /// Throws SpecError when the hyperparameters are invalid for the kind.
  void validate() const;
};

/// Named non-trainable state (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T>* values;
};

/// A layer caches what it needs from forward() so backward() can run with only the
/// upstream gradient. Parameter gradients accumulate until zero_grad().
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(Tensor<T> input, Mode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::vector<Parameter<T>*> parameters() { return {}; }
  virtual std::vector<Buffer<T>> buffers() { return {}; }
  virtual const LayerSpec& spec() const = 0;
  /// Output shape for a given input shape, without running the layer.
  virtual Shape output_shape(const Shape& input) const = 0;
};

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(const LayerSpec& spec, const std::string& name, std::mt19937_64& rng);
  Tensor<T> forward(Tensor<T> input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::vector<Parameter<T>*> parameters() override;
  const LayerSpec& spec() const override { return spec_; }
  Shape output_shape(const Shape& input) const override;

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  /// When false, backward() skips dL/dinput and returns an empty tensor (input layers).
  void set_input_grad(bool enabled) { input_grad_ = enabled; }

 private:
  LayerSpec spec_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> input_;
  bool input_grad_ = true;
};

template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(const LayerSpec& spec, const std::string& name, std::mt19937_64& rng);
  Tensor<T> forward(Tensor<T> input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::vector<Parameter<T>*> parameters() override;
  const LayerSpec& spec() const override { return spec_; }
  Shape output_shape(const Shape& input) const override;

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  LayerSpec spec_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> input_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  ReLU() : spec_(LayerSpec::relu_layer()) {}
  Tensor<T> forward(Tensor<T> input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  const LayerSpec& spec() const override { return spec_; }
  Shape output_shape(const Shape& input) const override { return input; }

 private:
  LayerSpec spec_;
  Tensor<T> input_;
};

template <typename T>
class AvgPool final : public Layer<T> {
 public:
  explicit AvgPool(const LayerSpec& spec) : spec_(spec) {}
  Tensor<T> forward(Tensor<T> input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  const LayerSpec& spec() const override { return spec_; }
  Shape output_shape(const Shape& input) const override;

 private:
  LayerSpec spec_;
  Shape input_shape_;
};

template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  GlobalAvgPool() : spec_(LayerSpec::global_pool()) {}
  Tensor<T> forward(Tensor<T> input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  const LayerSpec& spec() const override { return spec_; }
  Shape output_shape(const Shape& input) const override;

 private:
  LayerSpec spec_;
  Shape input_shape_;
};

template <typename T>
class BatchNorm2d final : public Layer<T> {
 public:
  BatchNorm2d(const LayerSpec& spec, const std::string& name);
  Tensor<T> forward(Tensor<T> input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::vector<Parameter<T>*> parameters() override;
  std::vector<Buffer<T>> buffers() override;
  const LayerSpec& spec() const override { return spec_; }
  Shape output_shape(const Shape& input) const override { return input; }

 private:
  LayerSpec spec_;
  std::string name_;
  Parameter<T> gamma_;
  Parameter<T> beta_;
  BatchNormState<T> state_;
  BatchNormCache<T> cache_;
};

/// conv3×3-bn-relu-conv3×3-bn plus a skip path (identity, or 1×1 conv + bn when
/// the shape changes), followed by relu.
template <typename T>
class ResidualBlock final : public Layer<T> {
 public:
  ResidualBlock(const LayerSpec& spec, const std::string& name, std::mt19937_64& rng);
  Tensor<T> forward(Tensor<T> input, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::vector<Parameter<T>*> parameters() override;
  std::vector<Buffer<T>> buffers() override;
  const LayerSpec& spec() const override { return spec_; }
  Shape output_shape(const Shape& input) const override;

 private:
  LayerSpec spec_;
  std::unique_ptr<Conv2d<T>> conv1_;
  std::unique_ptr<BatchNorm2d<T>> bn1_;
  ReLU<T> relu1_;
  std::unique_ptr<Conv2d<T>> conv2_;
  std::unique_ptr<BatchNorm2d<T>> bn2_;
  std::unique_ptr<Conv2d<T>> skip_conv_;
  std::unique_ptr<BatchNorm2d<T>> skip_bn_;
  ReLU<T> relu_out_;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec, const std::string& name,
                                     std::mt19937_64& rng);

/// Ordered stack of layers run front to back.
template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const std::vector<LayerSpec>& specs, const std::string& prefix, std::mt19937_64& rng);

  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }
  Tensor<T> forward(Tensor<T> input, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);
  std::vector<Parameter<T>*> parameters();
  std::vector<Buffer<T>> buffers();
  Shape output_shape(Shape input) const;
  std::size_t size() const noexcept { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

template <typename T>
void zero_grad(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace oodprobe::nn
