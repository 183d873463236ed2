#include "oodprobe/features/featurizer.hpp"

#include "oodprobe/util/rng.hpp"

namespace oodprobe::features {

using nn::LayerSpec;
using nn::Shape;
using nn::Tensor;

std::string to_string(Family family) { return family == Family::mini_cnn ? "mini_cnn" : "mini_resnet"; }

Family family_from_string(const std::string& name) {
  if (name == "mini_cnn") return Family::mini_cnn;
  if (name == "mini_resnet") return Family::mini_resnet;
  throw SpecError("unknown featurizer family '" + name + "' (valid: mini_cnn, mini_resnet)");
}

void FeaturizerSpec::validate() const {
  if (input_shape.size() != 3) throw SpecError("input shape must be (C,H,W), got " + nn::shape_to_string(input_shape));
  for (auto d : input_shape) {
    if (d == 0) throw SpecError("input shape has a zero dimension: " + nn::shape_to_string(input_shape));
  }
  for (auto c : channels) {
    if (c == 0) throw SpecError("channel plan has a zero entry");
  }
  if (family == Family::mini_cnn && channels.size() != 4) {
    throw SpecError("mini_cnn channel plan needs 4 conv stages, got " + std::to_string(channels.size()));
  }
  if (family == Family::mini_resnet) {
    if (blocks == 0) throw SpecError("mini_resnet needs at least one block");
    if (channels.size() != blocks + 1) {
      throw SpecError("mini_resnet channel plan needs blocks + 1 = " + std::to_string(blocks + 1) + " entries, got " +
                      std::to_string(channels.size()));
    }
  }
  if (num_classes < 2) throw SpecError("classifier needs at least 2 classes");
}

FeaturizerSpec FeaturizerSpec::mini_cnn(Shape input, std::size_t num_classes, std::vector<std::size_t> channels) {
  FeaturizerSpec s;
  s.family = Family::mini_cnn;
  s.input_shape = std::move(input);
  s.channels = std::move(channels);
  s.blocks = 0;
  s.num_classes = num_classes;
  return s;
}

FeaturizerSpec FeaturizerSpec::mini_resnet(Shape input, std::size_t num_classes, std::vector<std::size_t> channels) {
  FeaturizerSpec s;
  s.family = Family::mini_resnet;
  s.input_shape = std::move(input);
  s.blocks = channels.empty() ? 0 : channels.size() - 1;
  s.channels = std::move(channels);
  s.num_classes = num_classes;
  return s;
}

namespace {

struct Plan {
  std::vector<LayerSpec> layers;
  std::vector<std::pair<std::size_t, std::string>> taps;  // (layer index, stage)
};

Plan make_plan(const FeaturizerSpec& spec) {
  spec.validate();
  Plan p;
  const auto& ch = spec.channels;
  if (spec.family == Family::mini_cnn) {
    const std::size_t strides[4] = {1, 2, 1, 1};
    std::size_t in = spec.input_shape[0];
    for (std::size_t i = 0; i < 4; ++i) {
      p.layers.push_back(LayerSpec::conv(in, ch[i], 3, strides[i], 1));
      p.layers.push_back(LayerSpec::relu_layer());
      p.taps.emplace_back(p.layers.size() - 1, "conv" + std::to_string(i + 1));
      in = ch[i];
    }
  } else {
    p.layers.push_back(LayerSpec::conv(spec.input_shape[0], ch[0], 3, 1, 1, false));
    p.layers.push_back(LayerSpec::batch_norm_layer(ch[0]));
    p.layers.push_back(LayerSpec::relu_layer());
    p.taps.emplace_back(p.layers.size() - 1, "stem");
    for (std::size_t b = 1; b <= spec.blocks; ++b) {
      p.layers.push_back(LayerSpec::residual(ch[b - 1], ch[b], b % 2 == 0 ? 2 : 1));
      p.taps.emplace_back(p.layers.size() - 1, "block" + std::to_string(b));
    }
  }
  p.layers.push_back(LayerSpec::global_pool());
  p.taps.emplace_back(p.layers.size() - 1, "features");
  return p;
}

}  // namespace

template <typename T>
Model<T>::Model(const FeaturizerSpec& spec, std::uint64_t seed)
    : spec_(spec),
      init_rng_(derive_seed(seed, {0xfea7})),
      body_(make_plan(spec).layers, "features.", init_rng_),
      classifier_(LayerSpec::dense(spec.feature_dim(), spec.num_classes), "classifier", init_rng_) {
  const Plan plan = make_plan(spec);
  Shape shape{1};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  std::size_t next = 0;
  for (std::size_t t = 0; t < plan.taps.size(); ++t) {
    for (; next <= plan.taps[t].first; ++next) shape = body_.layer(next).output_shape(shape);
    TapPoint tp;
    tp.index = t;
    tp.stage = plan.taps[t].second;
    tp.shape.assign(shape.begin() + 1, shape.end());
    tp.layer = plan.taps[t].first;
    taps_.push_back(std::move(tp));
  }
  if (auto* conv = dynamic_cast<nn::Conv2d<T>*>(&body_.layer(0))) conv->set_input_grad(false);
}

template <typename T>
void Model<T>::check_input(const Tensor<T>& batch) const {
  if (batch.rank() != 4 || !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), batch.shape.begin() + 1)) {
    throw DimensionError("model expects N×" + nn::shape_to_string(spec_.input_shape) + " input, got " +
                         nn::shape_to_string(batch.shape));
  }
}

template <typename T>
Tensor<T> Model<T>::features(Tensor<T> batch, nn::Mode mode) {
  check_input(batch);
  return body_.forward(std::move(batch), mode);
}

template <typename T>
Tensor<T> Model<T>::classify(const Tensor<T>& feats, nn::Mode mode) {
  return classifier_.forward(feats, mode);
}

template <typename T>
Tensor<T> Model<T>::backward_classifier(const Tensor<T>& grad_logits) {
  return classifier_.backward(grad_logits);
}

template <typename T>
void Model<T>::backward_features(const Tensor<T>& grad_features) {
  body_.backward(grad_features);
}

template <typename T>
TapOutput<T> Model<T>::forward_with_taps(const Tensor<T>& batch, nn::Mode mode) {
  check_input(batch);
  TapOutput<T> out;
  Tensor<T> x = batch;
  std::size_t t = 0;
  for (std::size_t i = 0; i < body_.size(); ++i) {
    x = body_.layer(i).forward(std::move(x), mode);
    if (t < taps_.size() && taps_[t].layer == i) {
      out.taps.push_back(x);
      ++t;
    }
  }
  out.logits = classifier_.forward(x, mode);
  return out;
}

template <typename T>
Tensor<T> Model<T>::tap(const Tensor<T>& batch, std::size_t tap_index, nn::Mode mode) {
  check_input(batch);
  if (tap_index >= taps_.size()) {
    throw DimensionError("tap index " + std::to_string(tap_index) + " out of range (" + std::to_string(taps_.size()) +
                         " taps)");
  }
  Tensor<T> x = batch;
  for (std::size_t i = 0; i <= taps_[tap_index].layer; ++i) x = body_.layer(i).forward(std::move(x), mode);
  return flatten_tap(std::move(x));
}

template <typename T>
std::vector<nn::Parameter<T>*> Model<T>::parameters() {
  auto out = body_.parameters();
  for (auto* p : classifier_.parameters()) out.push_back(p);
  return out;
}

template <typename T>
Tensor<T> flatten_tap(Tensor<T> rep) {
  if (rep.rank() == 2) return rep;
  if (rep.rank() != 4) {
    throw DimensionError("flatten_tap expects a 2-D or 4-D tensor, got rank " + std::to_string(rep.rank()));
  }
  // NCHW row-major already stores each sample as c, h, w.
  rep.shape = {rep.shape[0], rep.shape[1] * rep.shape[2] * rep.shape[3]};
  return rep;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> flatten_tap(Tensor<float>);
template Tensor<double> flatten_tap(Tensor<double>);

}  // namespace oodprobe::features
