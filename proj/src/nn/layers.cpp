#include "oodprobe/nn/layers.hpp"

#include <cmath>

namespace oodprobe::nn {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::linear: return "linear";
    case LayerKind::relu: return "relu";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::residual_block: return "residual_block";
  }
  return "unknown";
}

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          std::size_t padding, bool bias) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = k;
  s.stride = stride;
  s.padding = padding;
  s.bias = bias;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out, bool bias) {
  LayerSpec s;
  s.kind = LayerKind::linear;
  s.in_features = in;
  s.out_features = out;
  s.bias = bias;
  return s;
}

LayerSpec LayerSpec::relu_layer() { return LayerSpec{}; }

LayerSpec LayerSpec::avg_pool_layer(std::size_t k) {
  LayerSpec s;
  s.kind = LayerKind::avg_pool;
  s.pool = k;
  return s;
}

LayerSpec LayerSpec::global_pool() {
  LayerSpec s;
  s.kind = LayerKind::global_avg_pool;
  return s;
}

LayerSpec LayerSpec::batch_norm_layer(std::size_t channels) {
  LayerSpec s;
  s.kind = LayerKind::batch_norm;
  s.in_channels = channels;
  s.out_channels = channels;
  return s;
}

LayerSpec LayerSpec::residual(std::size_t in, std::size_t out, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::residual_block;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = 3;
  s.stride = stride;
  s.padding = 1;
  s.bias = false;
  return s;
}

void LayerSpec::validate() const {
  const auto fail = [&](const std::string& why) {
    throw SpecError(to_string(kind) + " layer: " + why);
  };
  switch (kind) {
    case LayerKind::conv:
    case LayerKind::residual_block:
      if (in_channels == 0 || out_channels == 0) fail("channel counts must be positive");
      if (kernel == 0) fail("kernel must be positive");
      if (stride == 0) fail("stride must be >= 1");
      break;
    case LayerKind::linear:
      if (in_features == 0 || out_features == 0) fail("feature dims must be positive");
      break;
    case LayerKind::avg_pool:
      if (pool == 0) fail("pool window must be positive");
      break;
    case LayerKind::batch_norm:
      if (in_channels == 0) fail("channel count must be positive");
      break;
    case LayerKind::relu:
    case LayerKind::global_avg_pool:
      break;
  }
}

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

// ---- Conv2d -------------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(const LayerSpec& spec, const std::string& name, std::mt19937_64& rng) : spec_(spec) {
  spec_.validate();
  const double fan_in = static_cast<double>(spec.in_channels * spec.kernel * spec.kernel);
  weight_ = Parameter<T>(name + ".weight",
                         uniform_tensor<T>({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel},
                                           std::sqrt(6.0 / fan_in), rng));
  if (spec.bias) bias_ = Parameter<T>(name + ".bias", Tensor<T>({spec.out_channels}));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(Tensor<T> input, Mode) {
  input_ = std::move(input);
  return conv2d(input_, weight_.value, spec_.bias ? &bias_.value : nullptr, spec_.stride, spec_.padding);
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out) {
  return conv2d_backward(input_, weight_.value, spec_.stride, spec_.padding, grad_out,
                         weight_.grad_buffer(), spec_.bias ? &bias_.grad_buffer() : nullptr, input_grad_);
}

template <typename T>
std::vector<Parameter<T>*> Conv2d<T>::parameters() {
  if (spec_.bias) return {&weight_, &bias_};
  return {&weight_};
}

template <typename T>
Shape Conv2d<T>::output_shape(const Shape& input) const {
  const auto g = conv2d_geometry(input, weight_.value.shape, spec_.stride, spec_.padding);
  return {g.batch, g.out_channels, g.out_h, g.out_w};
}

// ---- Linear -------------------------------------------------------------------

template <typename T>
Linear<T>::Linear(const LayerSpec& spec, const std::string& name, std::mt19937_64& rng) : spec_(spec) {
  spec_.validate();
  weight_ = Parameter<T>(name + ".weight",
                         uniform_tensor<T>({spec.in_features, spec.out_features},
                                           1.0 / std::sqrt(static_cast<double>(spec.in_features)), rng));
  if (spec.bias) bias_ = Parameter<T>(name + ".bias", Tensor<T>({spec.out_features}));
}

template <typename T>
Tensor<T> Linear<T>::forward(Tensor<T> input, Mode) {
  input_ = std::move(input);
  return linear(input_, weight_.value, spec_.bias ? &bias_.value : nullptr);
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& grad_out) {
  return linear_backward(input_, weight_.value, grad_out, weight_.grad_buffer(),
                         spec_.bias ? &bias_.grad_buffer() : nullptr);
}

template <typename T>
std::vector<Parameter<T>*> Linear<T>::parameters() {
  if (spec_.bias) return {&weight_, &bias_};
  return {&weight_};
}

template <typename T>
Shape Linear<T>::output_shape(const Shape& input) const {
  if (input.size() != 2 || input[1] != spec_.in_features) {
    throw DimensionError("linear: inner dimension mismatch for input " + shape_to_string(input));
  }
  return {input[0], spec_.out_features};
}

// ---- ReLU / pooling ---------------------------------------------------------------

template <typename T>
Tensor<T> ReLU<T>::forward(Tensor<T> input, Mode) {
  input_ = std::move(input);
  return relu(input_);
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& grad_out) {
  return relu_backward(input_, grad_out);
}

template <typename T>
Tensor<T> AvgPool<T>::forward(Tensor<T> input, Mode) {
  input_shape_ = input.shape;
  return avg_pool(input, spec_.pool);
}

template <typename T>
Tensor<T> AvgPool<T>::backward(const Tensor<T>& grad_out) {
  return avg_pool_backward(input_shape_, spec_.pool, grad_out);
}

template <typename T>
Shape AvgPool<T>::output_shape(const Shape& input) const {
  if (input.size() != 4 || spec_.pool > input[2] || spec_.pool > input[3]) {
    throw DimensionError("avg_pool: window larger than spatial extent " + shape_to_string(input));
  }
  return {input[0], input[1], input[2] / spec_.pool, input[3] / spec_.pool};
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::forward(Tensor<T> input, Mode) {
  input_shape_ = input.shape;
  return global_avg_pool(input);
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& grad_out) {
  return global_avg_pool_backward(input_shape_, grad_out);
}

template <typename T>
Shape GlobalAvgPool<T>::output_shape(const Shape& input) const {
  if (input.size() != 4) throw DimensionError("global_avg_pool: expected rank 4");
  return {input[0], input[1]};
}

// ---- BatchNorm2d ------------------------------------------------------------------

template <typename T>
BatchNorm2d<T>::BatchNorm2d(const LayerSpec& spec, const std::string& name)
    : spec_(spec), name_(name) {
  spec_.validate();
  gamma_ = Parameter<T>(name + ".gamma", Tensor<T>({spec.in_channels}, T{1}));
  beta_ = Parameter<T>(name + ".beta", Tensor<T>({spec.in_channels}));
  state_.running_mean.assign(spec.in_channels, T{0});
  state_.running_var.assign(spec.in_channels, T{1});
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(Tensor<T> input, Mode mode) {
  return batch_norm(input, gamma_.value, beta_.value, state_, mode, &cache_);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& grad_out) {
  return batch_norm_backward(gamma_.value, cache_, grad_out, gamma_.grad_buffer(), beta_.grad_buffer());
}

template <typename T>
std::vector<Parameter<T>*> BatchNorm2d<T>::parameters() {
  return {&gamma_, &beta_};
}

template <typename T>
std::vector<Buffer<T>> BatchNorm2d<T>::buffers() {
  return {{name_ + ".running_mean", &state_.running_mean}, {name_ + ".running_var", &state_.running_var}};
}

// ---- ResidualBlock ------------------------------------------------------------------

template <typename T>
ResidualBlock<T>::ResidualBlock(const LayerSpec& spec, const std::string& name, std::mt19937_64& rng)
    : spec_(spec) {
  spec_.validate();
  conv1_ = std::make_unique<Conv2d<T>>(
      LayerSpec::conv(spec.in_channels, spec.out_channels, 3, spec.stride, 1, false), name + ".conv1", rng);
  bn1_ = std::make_unique<BatchNorm2d<T>>(LayerSpec::batch_norm_layer(spec.out_channels), name + ".bn1");
  conv2_ = std::make_unique<Conv2d<T>>(
      LayerSpec::conv(spec.out_channels, spec.out_channels, 3, 1, 1, false), name + ".conv2", rng);
  bn2_ = std::make_unique<BatchNorm2d<T>>(LayerSpec::batch_norm_layer(spec.out_channels), name + ".bn2");
  if (spec.stride != 1 || spec.in_channels != spec.out_channels) {
    skip_conv_ = std::make_unique<Conv2d<T>>(
        LayerSpec::conv(spec.in_channels, spec.out_channels, 1, spec.stride, 0, false), name + ".skip", rng);
    skip_bn_ = std::make_unique<BatchNorm2d<T>>(LayerSpec::batch_norm_layer(spec.out_channels),
                                                name + ".skip_bn");
  }
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(Tensor<T> input, Mode mode) {
  const Tensor<T> skip = skip_conv_ ? skip_bn_->forward(skip_conv_->forward(input, mode), mode) : input;
  Tensor<T> main = conv1_->forward(std::move(input), mode);
  main = bn1_->forward(std::move(main), mode);
  main = relu1_.forward(std::move(main), mode);
  main = conv2_->forward(std::move(main), mode);
  main = bn2_->forward(std::move(main), mode);
  if (skip.shape != main.shape) {
    throw DimensionError("residual block: skip " + shape_to_string(skip.shape) + " vs main " +
                         shape_to_string(main.shape));
  }
  for (std::size_t i = 0; i < main.numel(); ++i) main.data[i] += skip.data[i];
  return relu_out_.forward(std::move(main), mode);
}

template <typename T>
Tensor<T> ResidualBlock<T>::backward(const Tensor<T>& grad_out) {
  const Tensor<T> g_sum = relu_out_.backward(grad_out);
  Tensor<T> g_in = conv1_->backward(bn1_->backward(relu1_.backward(conv2_->backward(bn2_->backward(g_sum)))));
  if (skip_conv_) {
    const Tensor<T> g_skip = skip_conv_->backward(skip_bn_->backward(g_sum));
    for (std::size_t i = 0; i < g_in.numel(); ++i) g_in.data[i] += g_skip.data[i];
  } else {
    for (std::size_t i = 0; i < g_in.numel(); ++i) g_in.data[i] += g_sum.data[i];
  }
  return g_in;
}

template <typename T>
std::vector<Parameter<T>*> ResidualBlock<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (Layer<T>* l : std::initializer_list<Layer<T>*>{conv1_.get(), bn1_.get(), conv2_.get(), bn2_.get(),
                                                       skip_conv_.get(), skip_bn_.get()}) {
    if (!l) continue;
    for (auto* p : l->parameters()) out.push_back(p);
  }
  return out;
}

template <typename T>
std::vector<Buffer<T>> ResidualBlock<T>::buffers() {
  std::vector<Buffer<T>> out;
  for (Layer<T>* l : std::initializer_list<Layer<T>*>{bn1_.get(), bn2_.get(), skip_bn_.get()}) {
    if (!l) continue;
    for (auto b : l->buffers()) out.push_back(b);
  }
  return out;
}

template <typename T>
Shape ResidualBlock<T>::output_shape(const Shape& input) const {
  Shape s = conv1_->output_shape(input);
  return conv2_->output_shape(s);
}

// ---- factory / Sequential ------------------------------------------------------------------

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec, const std::string& name,
                                     std::mt19937_64& rng) {
  spec.validate();
  switch (spec.kind) {
    case LayerKind::conv: return std::make_unique<Conv2d<T>>(spec, name, rng);
    case LayerKind::linear: return std::make_unique<Linear<T>>(spec, name, rng);
    case LayerKind::relu: return std::make_unique<ReLU<T>>();
    case LayerKind::avg_pool: return std::make_unique<AvgPool<T>>(spec);
    case LayerKind::global_avg_pool: return std::make_unique<GlobalAvgPool<T>>();
    case LayerKind::batch_norm: return std::make_unique<BatchNorm2d<T>>(spec, name);
    case LayerKind::residual_block: return std::make_unique<ResidualBlock<T>>(spec, name, rng);
  }
  throw SpecError("unknown layer kind");
}

template <typename T>
Sequential<T>::Sequential(const std::vector<LayerSpec>& specs, const std::string& prefix,
                          std::mt19937_64& rng) {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    add(make_layer<T>(specs[i], prefix + std::to_string(i), rng));
  }
}

template <typename T>
Tensor<T> Sequential<T>::forward(Tensor<T> input, Mode mode) {
  for (auto& l : layers_) input = l->forward(std::move(input), mode);
  return input;
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

template <typename T>
std::vector<Parameter<T>*> Sequential<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& l : layers_) {
    for (auto* p : l->parameters()) out.push_back(p);
  }
  return out;
}

template <typename T>
std::vector<Buffer<T>> Sequential<T>::buffers() {
  std::vector<Buffer<T>> out;
  for (auto& l : layers_) {
    for (auto b : l->buffers()) out.push_back(b);
  }
  return out;
}

template <typename T>
Shape Sequential<T>::output_shape(Shape input) const {
  for (const auto& l : layers_) input = l->output_shape(input);
  return input;
}

#define OODPROBE_INSTANTIATE(T)                                                                  \
  template class Conv2d<T>;                                                                      \
  template class Linear<T>;                                                                      \
  template class ReLU<T>;                                                                        \
  template class AvgPool<T>;                                                                     \
  template class GlobalAvgPool<T>;                                                               \
  template class BatchNorm2d<T>;                                                                 \
  template class ResidualBlock<T>;                                                               \
  template class Sequential<T>;                                                                  \
  template std::unique_ptr<Layer<T>> make_layer<T>(const LayerSpec&, const std::string&,         \
                                                   std::mt19937_64&);

OODPROBE_INSTANTIATE(float)
OODPROBE_INSTANTIATE(double)

#undef OODPROBE_INSTANTIATE

}  // namespace oodprobe::nn
