#include "oodprobe/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace oodprobe::nn {

LossFn weighted_sum_loss(std::uint64_t seed) {
  return [seed](const TensorD& output) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    LossResult<double> r;
    r.grad = TensorD(output.shape);
    for (std::size_t i = 0; i < output.numel(); ++i) {
      r.grad.data[i] = dist(rng);
      r.value += r.grad.data[i] * output.data[i];
    }
    return r;
  };
}

LossFn cross_entropy_loss(std::vector<int> labels) {
  return [labels = std::move(labels)](const TensorD& output) { return cross_entropy(output, labels); };
}

namespace {

double relative_error(double analytic, double numeric) {
  if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
    throw NumericError("grad_check: non-finite gradient (analytic " + std::to_string(analytic) +
                       ", numeric " + std::to_string(numeric) + ")");
  }
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-7);
}

// (8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h
template <typename F>
double five_point(double& slot, double h, F&& f) {
  const double saved = slot;
  double v[4];
  const double offsets[4] = {2.0, 1.0, -1.0, -2.0};
  for (int k = 0; k < 4; ++k) {
    slot = saved + offsets[k] * h;
    v[k] = f();
  }
  slot = saved;
  return (8.0 * (v[1] - v[2]) - (v[0] - v[3])) / (12.0 * h);
}

// Stencils at h and h/2 that disagree mean a kink lies inside the stencil.
constexpr double kConsistency = 1e-6;

template <typename F>
void check_coordinate(GradCheckReport& report, double analytic, double& slot, double h, F&& f) {
  const double coarse = five_point(slot, h, f);
  const double fine = five_point(slot, 0.5 * h, f);
  ++report.coordinates;
  if (relative_error(coarse, fine) > kConsistency) {
    ++report.skipped;
    return;
  }
  report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic, coarse));
}

}  // namespace

GradCheckReport grad_check(Sequential<double>& network, const TensorD& input, const LossFn& loss,
                           double h) {
  auto params = network.parameters();
  zero_grad(params);
  const TensorD output = network.forward(input, Mode::train);
  const auto base = loss(output);
  const TensorD grad_input = network.backward(base.grad);

  const auto eval = [&](const TensorD& x) { return loss(network.forward(x, Mode::train)).value; };

  GradCheckReport report;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      check_coordinate(report, p->grad.data[i], p->value.data[i], h, [&] { return eval(input); });
    }
  }
  TensorD x = input;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    check_coordinate(report, grad_input.data[i], x.data[i], h, [&] { return eval(x); });
  }
  return report;
}

GradCheckReport grad_check(const std::vector<LayerSpec>& specs, const TensorD& input,
                           const LossFn& loss, std::uint64_t seed, double h) {
  std::mt19937_64 rng(seed);
  Sequential<double> network(specs, "gc", rng);
  // Non-zero biases and affine terms so their gradients are exercised.
  std::uniform_real_distribution<double> dist(-0.5, 0.5);
  for (auto* p : network.parameters()) {
    if (p->value.rank() == 1) {
      for (auto& v : p->value.data) v += dist(rng);
    }
  }
  return grad_check(network, input, loss, h);
}

GradCheckSuite grad_check_suite(std::size_t networks, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> ch(1, 3), sp(4, 6), st(1, 2);
  std::uniform_real_distribution<double> val(-1.0, 1.0);
  GradCheckSuite out;
  for (std::size_t trial = 0; trial < networks; ++trial) {
    const std::size_t cin = ch(rng), cmid = ch(rng), hw = sp(rng), stride = st(rng);
    std::vector<LayerSpec> specs;
    switch (trial % 5) {
      case 0:
        specs = {LayerSpec::conv(cin, cmid, 3, stride, 1), LayerSpec::relu_layer(), LayerSpec::global_pool(),
                 LayerSpec::dense(cmid, 2)};
        break;
      case 1:
        specs = {LayerSpec::conv(cin, cmid, 3, 1, 1, false), LayerSpec::batch_norm_layer(cmid),
                 LayerSpec::relu_layer(), LayerSpec::avg_pool_layer(2)};
        break;
      case 2:
        specs = {LayerSpec::residual(cin, cmid, stride), LayerSpec::global_pool()};
        break;
      case 3:
        specs = {LayerSpec::conv(cin, cmid, 1, 1, 0), LayerSpec::relu_layer(), LayerSpec::conv(cmid, 2, 3, stride, 0)};
        break;
      default:
        specs = {LayerSpec::conv(cin, cmid, 3, stride, 1), LayerSpec::relu_layer(),
                 LayerSpec::conv(cmid, cmid, 3, 1, 1, false), LayerSpec::batch_norm_layer(cmid),
                 LayerSpec::relu_layer(), LayerSpec::global_pool(), LayerSpec::dense(cmid, 3)};
        break;
    }
    TensorD x({2, cin, hw, hw});
    for (auto& v : x.data) v = val(rng);
    const auto r = grad_check(specs, x, weighted_sum_loss(seed + trial), seed + 100 + trial);
    out.per_network.push_back(r.max_rel_error);
    out.coordinates += r.coordinates;
    out.skipped += r.skipped;
    out.max_rel_error = std::max(out.max_rel_error, r.max_rel_error);
  }
  return out;
}

}  // namespace oodprobe::nn
