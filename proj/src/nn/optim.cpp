#include "oodprobe/nn/optim.hpp"

#include <cmath>

namespace oodprobe::nn {

template <typename T>
void optimizer_step(std::span<Parameter<T>* const> params, const OptimizerRule& rule) {
  for (auto* p : params) {
    if (!p->has_grad()) throw StateError("optimizer step: uninitialized gradient for '" + p->name + "'");
  }
  for (auto* p : params) {
    ++p->step;
    if (const auto* sgd = std::get_if<Sgd>(&rule)) {
      for (std::size_t i = 0; i < p->value.numel(); ++i) {
        p->value.data[i] = static_cast<T>(p->value.data[i] - sgd->lr * p->grad.data[i]);
      }
      continue;
    }
    const auto& adam = std::get<Adam>(rule);
    if (p->moment1.numel() != p->value.numel()) {
      p->moment1 = Tensor<T>(p->value.shape);
      p->moment2 = Tensor<T>(p->value.shape);
    }
    const double t = static_cast<double>(p->step);
    const double c1 = 1.0 - std::pow(adam.beta1, t);
    const double c2 = 1.0 - std::pow(adam.beta2, t);
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double g = p->grad.data[i];
      const double m = adam.beta1 * p->moment1.data[i] + (1.0 - adam.beta1) * g;
      const double v = adam.beta2 * p->moment2.data[i] + (1.0 - adam.beta2) * g * g;
      p->moment1.data[i] = static_cast<T>(m);
      p->moment2.data[i] = static_cast<T>(v);
      p->value.data[i] =
          static_cast<T>(p->value.data[i] - adam.lr * (m / c1) / (std::sqrt(v / c2) + adam.eps));
    }
  }
}

template void optimizer_step<float>(std::span<Parameter<float>* const>, const OptimizerRule&);
template void optimizer_step<double>(std::span<Parameter<double>* const>, const OptimizerRule&);

}  // namespace oodprobe::nn
