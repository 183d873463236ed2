#pragma once

#include <cstdint>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "oodprobe/nn/tensor.hpp"

namespace oodprobe::nn {

/// Trainable weight with its gradient and optimizer moment buffers.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;     // empty until zero_grad() or the first backward pass
  Tensor<T> moment1;  // adam slots, allocated lazily
  Tensor<T> moment2;
  std::int64_t step = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

  bool has_grad() const noexcept { return grad.numel() == value.numel() && !grad.empty(); }
  void zero_grad() {
    grad.shape = value.shape;
    grad.data.assign(value.numel(), T{0});
  }
  /// Gradient buffer, allocated as zeros on first access.
  std::vector<T>& grad_buffer() {
    if (!has_grad()) zero_grad();
    return grad.data;
  }
};

using ParameterF = Parameter<float>;
using ParameterD = Parameter<double>;

enum class Mode { train, eval };

// ---- convolution ----------------------------------------------------------

struct Conv2dGeometry {
  std::size_t batch, in_channels, in_h, in_w;
  std::size_t out_channels, kernel, stride, padding;
  std::size_t out_h, out_w;
};

/// Validates shapes and computes H' = floor((H + 2p - k)/s) + 1.
Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& weight, std::size_t stride,
                               std::size_t padding);

/// Convolution via im2col + GEMM. `bias` may be null.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                 std::size_t stride, std::size_t padding);

/// Accumulates dL/dW (and dL/db when non-null) and returns dL/dinput, or an empty
/// tensor when `compute_input_grad` is false.
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                          std::size_t padding, const Tensor<T>& grad_out,
                          std::vector<T>& grad_weight, std::type_identity_t<std::vector<T>>* grad_bias,
                          bool compute_input_grad = true);

// ---- dense ----------------------------------------------------------------

/// output = input · weight + bias, weight is D×K. `bias` may be null.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias);

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& grad_out,
                          std::vector<T>& grad_weight, std::type_identity_t<std::vector<T>>* grad_bias);

// ---- elementwise and pooling ------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Subgradient at 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out);

/// Non-overlapping k×k mean; trailing rows/cols that do not fill a window are dropped.
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& input, std::size_t k);

template <typename T>
Tensor<T> avg_pool_backward(const Shape& input_shape, std::size_t k, const Tensor<T>& grad_out);

/// Mean over H×W, producing N×C.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out);

// ---- batch norm ------------------------------------------------------------

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
};

template <typename T>
struct BatchNormCache {
  std::vector<T> mean;
  std::vector<T> inv_std;
  Tensor<T> normalized;
  Mode mode = Mode::eval;
};

/// Per-channel normalization of an NCHW tensor. Train mode uses batch statistics
/// and updates `state` (momentum 0.1, unbiased running variance); eval mode reads
/// `state`.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Mode mode, std::type_identity_t<BatchNormCache<T>>* cache);

template <typename T>
Tensor<T> batch_norm_backward(const Tensor<T>& gamma, const BatchNormCache<T>& cache,
                              const Tensor<T>& grad_out, std::vector<T>& grad_gamma,
                              std::vector<T>& grad_beta);

// ---- losses ------------------------------------------------------------------

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;  // dL/dlogits
};

/// Mean softmax cross-entropy with max-shifted log-sum-exp.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Row-wise softmax probabilities.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
template <typename T>
double accuracy(const Tensor<T>& logits, std::span<const int> labels);

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

}  // namespace oodprobe::nn
