#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "oodprobe/nn/layers.hpp"

namespace oodprobe::nn {

/// Scalar loss of a network output together with dL/doutput.
using LossFn = std::function<LossResult<double>(const TensorD& output)>;

/// L = sum_i w_i * y_i with fixed pseudo-random weights; exercises every output coordinate.
LossFn weighted_sum_loss(std::uint64_t seed);

/// Mean cross-entropy against fixed labels (output must be N×K).
LossFn cross_entropy_loss(std::vector<int> labels);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t skipped = 0;  // stencils at h and h/2 disagreed (kink or roundoff), not scored
};

/// Compares the analytic gradient of every parameter coordinate (and every input
/// coordinate) with a five-point finite-difference stencil. Relative error per coordinate
/// is |a - n| / max(|a| + |n|, 1e-7). A coordinate whose stencils at h and h/2 differ by
/// more than 1e-6 relative is counted in `skipped` instead. Layers run in train mode.
/// Throws NumericError on a non-finite gradient.
GradCheckReport grad_check(Sequential<double>& network, const TensorD& input, const LossFn& loss,
                           double h = 1e-5);

/// Builds the network from `specs` with the given seed and checks it.
GradCheckReport grad_check(const std::vector<LayerSpec>& specs, const TensorD& input,
                           const LossFn& loss, std::uint64_t seed, double h = 1e-5);

struct GradCheckSuite {
  double max_rel_error = 0.0;
  std::vector<double> per_network;
  std::size_t coordinates = 0;
  std::size_t skipped = 0;
};

/// Checks `networks` randomized small conv/linear/batch-norm/relu stacks.
GradCheckSuite grad_check_suite(std::size_t networks, std::uint64_t seed);

}  // namespace oodprobe::nn
