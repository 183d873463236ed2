#pragma once

#include <span>
#include <variant>

#include "oodprobe/nn/ops.hpp"

namespace oodprobe::nn {

struct Sgd {
  double lr = 0.01;
};

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using OptimizerRule = std::variant<Sgd, Adam>;

/// Applies one update to every parameter and increments its step counter.
/// Gradients are left in place; call zero_grad() before the next backward pass.
/// Throws StateError when a parameter has no gradient buffer.
template <typename T>
void optimizer_step(std::span<Parameter<T>* const> params, const OptimizerRule& rule);

}  // namespace oodprobe::nn
