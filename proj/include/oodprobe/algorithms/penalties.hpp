#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "oodprobe/nn/ops.hpp"

namespace oodprobe::algorithms {

/// Scalar objective with gradients w.r.t. each environment's input tensor.
template <typename T>
struct EnvGradResult {
  double value = 0.0;
  std::vector<nn::Tensor<T>> grads;
};

/// Cross-entropy of the concatenated batches.
template <typename T>
EnvGradResult<T> erm_loss(std::span<const nn::Tensor<T>> logits, std::span<const std::vector<int>> labels);

/// IRMv1: sum over envs of (d/dw CE(w·logits_e, y_e) at w = 1)^2.
template <typename T>
EnvGradResult<T> irm_penalty(std::span<const nn::Tensor<T>> logits, std::span<const std::vector<int>> labels);

/// The per-env scale derivative d/dw CE(w·logits, y) at w = 1.
template <typename T>
double irm_scale_gradient(const nn::Tensor<T>& logits, std::span<const int> labels);

struct VRexResult {
  double value = 0.0;
  std::vector<double> grad;  // d penalty / d risk_e
};

/// Population variance of the per-env risks.
VRexResult vrex_penalty(std::span<const double> risks);

struct GroupDroResult {
  std::vector<double> q;
  double loss = 0.0;
};

/// q_e <- q_e·exp(eta·L_e), renormalized; loss = sum q_e·L_e with the updated q.
GroupDroResult groupdro_reweight(std::span<const double> q, std::span<const double> losses, double eta);

/// Mean over env pairs of |mu_a - mu_b|^2 + |Sigma_a - Sigma_b|_F^2 (biased covariance).
template <typename T>
EnvGradResult<T> coral_penalty(std::span<const nn::Tensor<T>> features);

/// Mean over env pairs of biased MMD^2 with k(x,y) = exp(-gamma |x-y|^2).
template <typename T>
EnvGradResult<T> mmd_penalty(std::span<const nn::Tensor<T>> features, double gamma);

template <typename T>
struct MixedBatch {
  nn::Tensor<T> images;
  std::vector<int> labels_a;
  std::vector<int> labels_b;
  double lambda = 1.0;
};

/// x = lambda·a + (1 - lambda)·b with the given lambda.
template <typename T>
MixedBatch<T> mixup_minibatches(const nn::Tensor<T>& a, std::span<const int> labels_a, const nn::Tensor<T>& b,
                                std::span<const int> labels_b, double lambda);

/// Same, with lambda ~ Beta(alpha, alpha) drawn from `rng`.
template <typename T>
MixedBatch<T> mixup_minibatches(const nn::Tensor<T>& a, std::span<const int> labels_a, const nn::Tensor<T>& b,
                                std::span<const int> labels_b, double alpha, std::mt19937_64& rng);

double sample_beta(double alpha, double beta, std::mt19937_64& rng);

/// lambda·CE(logits, y_a) + (1 - lambda)·CE(logits, y_b).
template <typename T>
nn::LossResult<T> mixup_loss(const nn::Tensor<T>& logits, std::span<const int> labels_a,
                             std::span<const int> labels_b, double lambda);

/// Per coordinate: mean of the env gradients when |mean sign| >= tau, else 0.
std::vector<float> andmask_aggregate(std::span<const std::vector<float>> grads, double tau);

}  // namespace oodprobe::algorithms
