#include "oodprobe/algorithms/penalties.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

namespace oodprobe::algorithms {

using nn::Tensor;

namespace {

template <typename T>
void check_env_inputs(std::span<const Tensor<T>> xs, std::span<const std::vector<int>> labels) {
  if (xs.empty()) throw DimensionError("no environment batches");
  if (xs.size() != labels.size()) throw DimensionError("logit and label lists differ in length");
}

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
MatD to_matrix(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("expected an N×D feature matrix, got " + nn::shape_to_string(x.shape));
  MatD m(x.dim(0), x.dim(1));
  for (std::size_t i = 0; i < x.numel(); ++i) m.data()[i] = static_cast<double>(x.data[i]);
  return m;
}

template <typename T>
void add_matrix(Tensor<T>& dst, const MatD& m, double scale) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += static_cast<T>(scale * m.data()[i]);
}

template <typename T>
std::vector<Tensor<T>> zeros_like(std::span<const Tensor<T>> xs) {
  std::vector<Tensor<T>> out;
  for (const auto& x : xs) out.emplace_back(x.shape);
  return out;
}

template <typename T>
void check_features(std::span<const Tensor<T>> features) {
  if (features.empty()) throw DimensionError("no environment feature batches");
  for (const auto& f : features) {
    if (f.rank() != 2 || f.dim(1) != features[0].dim(1)) throw DimensionError("feature batches must be N×D with equal D");
  }
}

}  // namespace

template <typename T>
EnvGradResult<T> erm_loss(std::span<const Tensor<T>> logits, std::span<const std::vector<int>> labels) {
  check_env_inputs(logits, labels);
  std::size_t total = 0;
  for (const auto& l : labels) total += l.size();
  EnvGradResult<T> r;
  for (std::size_t e = 0; e < logits.size(); ++e) {
    auto ce = nn::cross_entropy(logits[e], labels[e]);
    const double w = static_cast<double>(labels[e].size()) / static_cast<double>(total);
    r.value += w * ce.value;
    for (auto& g : ce.grad.data) g = static_cast<T>(g * w);
    r.grads.push_back(std::move(ce.grad));
  }
  return r;
}

template <typename T>
double irm_scale_gradient(const Tensor<T>& logits, std::span<const int> labels) {
  const auto probs = nn::softmax(logits);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double g = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double y = labels[i] == static_cast<int>(j) ? 1.0 : 0.0;
      g += (static_cast<double>(probs.data[i * k + j]) - y) * static_cast<double>(logits.data[i * k + j]);
    }
  }
  return g / static_cast<double>(n);
}

template <typename T>
EnvGradResult<T> irm_penalty(std::span<const Tensor<T>> logits, std::span<const std::vector<int>> labels) {
  check_env_inputs(logits, labels);
  EnvGradResult<T> r;
  for (std::size_t e = 0; e < logits.size(); ++e) {
    const auto& z = logits[e];
    if (z.rank() != 2 || z.dim(0) != labels[e].size()) throw DimensionError("irm_penalty: logits/labels mismatch");
    nn::cross_entropy(z, labels[e]);  // label validation
    const std::size_t n = z.dim(0), k = z.dim(1);
    const auto probs = nn::softmax(z);
    const double g = irm_scale_gradient(z, labels[e]);
    r.value += g * g;
    // d g / d z_ij = (p_ij (1 + z_ij - zbar_i) - y_ij) / N, zbar_i = sum_k p_ik z_ik
    Tensor<T> grad(z.shape);
    for (std::size_t i = 0; i < n; ++i) {
      double zbar = 0.0;
      for (std::size_t j = 0; j < k; ++j) zbar += static_cast<double>(probs.data[i * k + j]) * z.data[i * k + j];
      for (std::size_t j = 0; j < k; ++j) {
        const double p = probs.data[i * k + j], y = labels[e][i] == static_cast<int>(j) ? 1.0 : 0.0;
        grad.data[i * k + j] = static_cast<T>(2.0 * g * (p * (1.0 + z.data[i * k + j] - zbar) - y) / n);
      }
    }
    r.grads.push_back(std::move(grad));
  }
  return r;
}

VRexResult vrex_penalty(std::span<const double> risks) {
  if (risks.size() < 2) throw DegenerateError("vrex_penalty needs at least 2 environments");
  const double m = static_cast<double>(risks.size());
  double mean = 0.0;
  for (double r : risks) mean += r;
  mean /= m;
  VRexResult out;
  for (double r : risks) {
    out.value += (r - mean) * (r - mean) / m;
    out.grad.push_back(2.0 * (r - mean) / m);
  }
  return out;
}

GroupDroResult groupdro_reweight(std::span<const double> q, std::span<const double> losses, double eta) {
  if (q.size() != losses.size() || q.empty()) throw DimensionError("groupdro: weight and loss counts differ");
  double sum = 0.0;
  for (double v : q) {
    if (!(v >= 0.0)) throw StateError("groupdro: negative or NaN weight");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw StateError("groupdro: weights sum to " + std::to_string(sum) + ", not 1");
  // log-space update keeps large eta·L finite
  std::vector<double> logq(q.size());
  double top = -INFINITY;
  for (std::size_t e = 0; e < q.size(); ++e) {
    logq[e] = (q[e] > 0 ? std::log(q[e]) : -INFINITY) + eta * losses[e];
    top = std::max(top, logq[e]);
  }
  GroupDroResult r;
  r.q.resize(q.size());
  double z = 0.0;
  for (std::size_t e = 0; e < q.size(); ++e) z += (r.q[e] = std::exp(logq[e] - top));
  for (std::size_t e = 0; e < q.size(); ++e) {
    r.q[e] /= z;
    r.loss += r.q[e] * losses[e];
  }
  return r;
}

template <typename T>
EnvGradResult<T> coral_penalty(std::span<const Tensor<T>> features) {
  check_features(features);
  const std::size_t m = features.size();
  std::vector<MatD> x;
  std::vector<Eigen::RowVectorXd> mu;
  std::vector<MatD> centered, cov;
  for (const auto& f : features) {
    if (f.dim(0) < 2) throw StatisticsError("coral_penalty needs at least 2 samples per environment");
    x.push_back(to_matrix(f));
    mu.push_back(x.back().colwise().mean());
    centered.push_back(x.back().rowwise() - mu.back());
    cov.push_back(centered.back().transpose() * centered.back() / static_cast<double>(f.dim(0)));
  }
  EnvGradResult<T> r;
  r.grads = zeros_like(features);
  const double pairs = static_cast<double>(m * (m - 1) / 2);
  if (m < 2) return r;
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      const Eigen::RowVectorXd dmu = mu[a] - mu[b];
      const MatD dcov = cov[a] - cov[b];
      r.value += (dmu.squaredNorm() + dcov.squaredNorm()) / pairs;
      const double na = static_cast<double>(x[a].rows()), nb = static_cast<double>(x[b].rows());
      // d/dx_a,i = 2 dmu / n_a + 4/n_a · dcov (x_a,i - mu_a)
      MatD ga = (centered[a] * dcov) * (4.0 / na);
      ga.rowwise() += dmu * (2.0 / na);
      MatD gb = (centered[b] * dcov) * (-4.0 / nb);
      gb.rowwise() -= dmu * (2.0 / nb);
      add_matrix(r.grads[a], ga, 1.0 / pairs);
      add_matrix(r.grads[b], gb, 1.0 / pairs);
    }
  }
  return r;
}

namespace {

// Gaussian kernel matrix between the rows of x and y.
MatD gaussian_kernel(const MatD& x, const MatD& y, double gamma) {
  const Eigen::VectorXd xn = x.rowwise().squaredNorm(), yn = y.rowwise().squaredNorm();
  MatD d = (-2.0 * x * y.transpose()).eval();
  d.colwise() += xn;
  d.rowwise() += yn.transpose();
  return (-gamma * d.cwiseMax(0.0)).array().exp().matrix();
}

// Gradient w.r.t. the rows of x of sum_ij K_ij with K = k(x, y): -2 gamma (diag(K 1) x - K y).
MatD kernel_grad(const MatD& k, const MatD& x, const MatD& y, double gamma) {
  MatD g = x.array().colwise() * k.rowwise().sum().array();
  g -= k * y;
  return -2.0 * gamma * g;
}

}  // namespace

template <typename T>
EnvGradResult<T> mmd_penalty(std::span<const Tensor<T>> features, double gamma) {
  if (!(gamma > 0.0)) throw DomainError("mmd_penalty: gamma must be positive");
  check_features(features);
  const std::size_t m = features.size();
  std::vector<MatD> x;
  for (const auto& f : features) x.push_back(to_matrix(f));
  EnvGradResult<T> r;
  r.grads = zeros_like(features);
  if (m < 2) return r;
  const double pairs = static_cast<double>(m * (m - 1) / 2);
  std::vector<MatD> kself(m);
  for (std::size_t e = 0; e < m; ++e) kself[e] = gaussian_kernel(x[e], x[e], gamma);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) {
      const double na = static_cast<double>(x[a].rows()), nb = static_cast<double>(x[b].rows());
      const MatD kab = gaussian_kernel(x[a], x[b], gamma);
      r.value += (kself[a].mean() + kself[b].mean() - 2.0 * kab.mean()) / pairs;
      // Self terms count each off-diagonal pair twice, hence the factor 2.
      MatD ga = kernel_grad(kself[a], x[a], x[a], gamma) * (2.0 / (na * na)) -
                kernel_grad(kab, x[a], x[b], gamma) * (2.0 / (na * nb));
      const MatD kba = kab.transpose();
      MatD gb = kernel_grad(kself[b], x[b], x[b], gamma) * (2.0 / (nb * nb)) -
                kernel_grad(kba, x[b], x[a], gamma) * (2.0 / (na * nb));
      add_matrix(r.grads[a], ga, 1.0 / pairs);
      add_matrix(r.grads[b], gb, 1.0 / pairs);
    }
  }
  return r;
}

double sample_beta(double alpha, double beta, std::mt19937_64& rng) {
  std::gamma_distribution<double> ga(alpha, 1.0), gb(beta, 1.0);
  const double x = ga(rng), y = gb(rng);
  return x + y > 0.0 ? x / (x + y) : 0.5;
}

template <typename T>
MixedBatch<T> mixup_minibatches(const Tensor<T>& a, std::span<const int> labels_a, const Tensor<T>& b,
                                std::span<const int> labels_b, double lambda) {
  if (a.shape != b.shape) {
    throw DimensionError("mixup: batch shapes " + nn::shape_to_string(a.shape) + " and " + nn::shape_to_string(b.shape) +
                         " differ");
  }
  if (labels_a.size() != a.dim(0) || labels_b.size() != b.dim(0)) throw DimensionError("mixup: label count mismatch");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("mixup: lambda outside [0,1]");
  MixedBatch<T> out;
  out.lambda = lambda;
  out.labels_a.assign(labels_a.begin(), labels_a.end());
  out.labels_b.assign(labels_b.begin(), labels_b.end());
  if (lambda == 1.0) {
    out.images = a;
  } else if (lambda == 0.0) {
    out.images = b;
  } else {
    out.images = Tensor<T>(a.shape);
    const T l = static_cast<T>(lambda), r = static_cast<T>(1.0 - lambda);
    for (std::size_t i = 0; i < a.numel(); ++i) out.images.data[i] = l * a.data[i] + r * b.data[i];
  }
  return out;
}

template <typename T>
MixedBatch<T> mixup_minibatches(const Tensor<T>& a, std::span<const int> labels_a, const Tensor<T>& b,
                                std::span<const int> labels_b, double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw DomainError("mixup: alpha must be positive");
  return mixup_minibatches(a, labels_a, b, labels_b, sample_beta(alpha, alpha, rng));
}

template <typename T>
nn::LossResult<T> mixup_loss(const Tensor<T>& logits, std::span<const int> labels_a, std::span<const int> labels_b,
                             double lambda) {
  auto la = nn::cross_entropy(logits, labels_a);
  const auto lb = nn::cross_entropy(logits, labels_b);
  la.value = lambda * la.value + (1.0 - lambda) * lb.value;
  for (std::size_t i = 0; i < la.grad.numel(); ++i) {
    la.grad.data[i] = static_cast<T>(lambda * la.grad.data[i] + (1.0 - lambda) * lb.grad.data[i]);
  }
  return la;
}

std::vector<float> andmask_aggregate(std::span<const std::vector<float>> grads, double tau) {
  if (grads.empty()) throw DimensionError("andmask: no gradients");
  if (!(tau >= 0.0 && tau <= 1.0)) throw DomainError("andmask: tau outside [0,1]");
  const std::size_t n = grads[0].size();
  for (const auto& g : grads) {
    if (g.size() != n) throw DimensionError("andmask: gradient lengths differ");
  }
  const double m = static_cast<double>(grads.size());
  std::vector<float> out(n, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0, signs = 0.0;
    for (const auto& g : grads) {
      sum += g[i];
      signs += (g[i] > 0.0f) - (g[i] < 0.0f);
    }
    if (std::abs(signs / m) >= tau) out[i] = static_cast<float>(sum / m);
  }
  return out;
}

#define OODPROBE_INSTANTIATE(T)                                                                                 \
  template EnvGradResult<T> erm_loss(std::span<const Tensor<T>>, std::span<const std::vector<int>>);          \
  template EnvGradResult<T> irm_penalty(std::span<const Tensor<T>>, std::span<const std::vector<int>>);       \
  template double irm_scale_gradient(const Tensor<T>&, std::span<const int>);                                 \
  template EnvGradResult<T> coral_penalty(std::span<const Tensor<T>>);                                        \
  template EnvGradResult<T> mmd_penalty(std::span<const Tensor<T>>, double);                                  \
  template MixedBatch<T> mixup_minibatches(const Tensor<T>&, std::span<const int>, const Tensor<T>&,          \
                                           std::span<const int>, double);                                     \
  template MixedBatch<T> mixup_minibatches(const Tensor<T>&, std::span<const int>, const Tensor<T>&,          \
                                           std::span<const int>, double, std::mt19937_64&);                   \
  template nn::LossResult<T> mixup_loss(const Tensor<T>&, std::span<const int>, std::span<const int>, double);

OODPROBE_INSTANTIATE(float)
OODPROBE_INSTANTIATE(double)

}  // namespace oodprobe::algorithms
