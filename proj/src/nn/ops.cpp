#include "oodprobe/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace oodprobe::nn {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(s));
  }
}

// Direct NCHW loops; cheaper than im2col when C_in·k·k is tiny (the input layer).
inline bool use_direct(const Conv2dGeometry& g) { return g.in_channels * g.kernel * g.kernel <= 18; }

// Output columns [lo, hi) whose input column ow·stride + kj − padding is inside the image.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent, std::size_t in_extent,
                                                       std::size_t stride, std::size_t padding,
                                                       std::size_t offset) {
  std::size_t lo = 0;
  while (lo < out_extent && lo * stride + offset < padding) ++lo;
  std::size_t hi = out_extent;
  while (hi > lo && (hi - 1) * stride + offset >= in_extent + padding) --hi;
  return {lo, hi};
}

template <typename T>
void direct_forward(const T* input, const T* weight, const Conv2dGeometry& g, T* out) {
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    T* plane_out = out + co * g.out_h * g.out_w;
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      const T* plane_in = input + ci * g.in_h * g.in_w;
      for (std::size_t ki = 0; ki < g.kernel; ++ki) {
        const auto [h_lo, h_hi] = valid_range(g.out_h, g.in_h, g.stride, g.padding, ki);
        for (std::size_t kj = 0; kj < g.kernel; ++kj) {
          const T wv = weight[((co * g.in_channels + ci) * g.kernel + ki) * g.kernel + kj];
          const auto [w_lo, w_hi] = valid_range(g.out_w, g.in_w, g.stride, g.padding, kj);
          for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
            const T* __restrict src = plane_in + (oh * g.stride + ki - g.padding) * g.in_w + kj - g.padding;
            T* __restrict dst = plane_out + oh * g.out_w;
            if (g.stride == 1) {
              for (std::size_t ow = w_lo; ow < w_hi; ++ow) dst[ow] += wv * src[ow];
            } else {
              for (std::size_t ow = w_lo; ow < w_hi; ++ow) dst[ow] += wv * src[ow * g.stride];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void direct_backward(const T* input, const T* weight, const T* grad_out, const Conv2dGeometry& g,
                     T* grad_weight, T* grad_input) {
  std::vector<T> partial(g.out_w);
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    const T* gy = grad_out + co * g.out_h * g.out_w;
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      const T* plane_in = input + ci * g.in_h * g.in_w;
      T* plane_gx = grad_input ? grad_input + ci * g.in_h * g.in_w : nullptr;
      for (std::size_t ki = 0; ki < g.kernel; ++ki) {
        const auto [h_lo, h_hi] = valid_range(g.out_h, g.in_h, g.stride, g.padding, ki);
        for (std::size_t kj = 0; kj < g.kernel; ++kj) {
          const std::size_t widx = ((co * g.in_channels + ci) * g.kernel + ki) * g.kernel + kj;
          const T wv = weight[widx];
          const auto [w_lo, w_hi] = valid_range(g.out_w, g.in_w, g.stride, g.padding, kj);
          // Elementwise partial sums keep the inner loop vectorizable.
          T* __restrict acc = partial.data();
          std::fill(partial.begin(), partial.end(), T{0});
          for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
            const std::size_t in_off = (oh * g.stride + ki - g.padding) * g.in_w + kj - g.padding;
            const T* __restrict src = plane_in + in_off;
            const T* __restrict row = gy + oh * g.out_w;
            if (g.stride == 1) {
              for (std::size_t ow = w_lo; ow < w_hi; ++ow) acc[ow] += row[ow] * src[ow];
            } else {
              for (std::size_t ow = w_lo; ow < w_hi; ++ow) acc[ow] += row[ow] * src[ow * g.stride];
            }
            if (plane_gx) {
              T* __restrict dst = plane_gx + in_off;
              if (g.stride == 1) {
                for (std::size_t ow = w_lo; ow < w_hi; ++ow) dst[ow] += wv * row[ow];
              } else {
                for (std::size_t ow = w_lo; ow < w_hi; ++ow) dst[ow * g.stride] += wv * row[ow];
              }
            }
          }
          T total{0};
          for (std::size_t ow = w_lo; ow < w_hi; ++ow) total += acc[ow];
          grad_weight[widx] += total;
        }
      }
    }
  }
}

template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

// The convolution runs on a zero-padded channels-last copy of each sample so an
// im2col row for output pixel (oh, ow) is k contiguous runs of k·C_in values.
// Column order of the im2col matrix is (ki, kj, ci).
template <typename T>
void pad_channels_last(const T* input, const Conv2dGeometry& g, T* padded) {
  const std::size_t wp = g.in_w + 2 * g.padding;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = input + c * g.in_h * g.in_w;
    for (std::size_t h = 0; h < g.in_h; ++h) {
      T* dst = padded + ((h + g.padding) * wp + g.padding) * g.in_channels + c;
      const T* src = plane + h * g.in_w;
      for (std::size_t w = 0; w < g.in_w; ++w) dst[w * g.in_channels] = src[w];
    }
  }
}

template <typename T>
void unpad_channels_last(const T* padded, const Conv2dGeometry& g, T* output) {
  const std::size_t wp = g.in_w + 2 * g.padding;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = output + c * g.in_h * g.in_w;
    for (std::size_t h = 0; h < g.in_h; ++h) {
      const T* src = padded + ((h + g.padding) * wp + g.padding) * g.in_channels + c;
      T* dst = plane + h * g.in_w;
      for (std::size_t w = 0; w < g.in_w; ++w) dst[w] = src[w * g.in_channels];
    }
  }
}

template <typename T>
void im2col(const T* padded, const Conv2dGeometry& g, T* col) {
  const std::size_t wp = g.in_w + 2 * g.padding;
  const std::size_t run = g.kernel * g.in_channels;
  const std::size_t row_len = g.kernel * run;
  for (std::size_t oh = 0; oh < g.out_h; ++oh) {
    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
      T* dst = col + (oh * g.out_w + ow) * row_len;
      for (std::size_t ki = 0; ki < g.kernel; ++ki) {
        const T* src = padded + ((oh * g.stride + ki) * wp + ow * g.stride) * g.in_channels;
        std::copy_n(src, run, dst + ki * run);
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const Conv2dGeometry& g, T* padded) {
  const std::size_t wp = g.in_w + 2 * g.padding;
  const std::size_t run = g.kernel * g.in_channels;
  const std::size_t row_len = g.kernel * run;
  for (std::size_t oh = 0; oh < g.out_h; ++oh) {
    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
      const T* src = col + (oh * g.out_w + ow) * row_len;
      for (std::size_t ki = 0; ki < g.kernel; ++ki) {
        T* __restrict dst = padded + ((oh * g.stride + ki) * wp + ow * g.stride) * g.in_channels;
        const T* __restrict s = src + ki * run;
        for (std::size_t i = 0; i < run; ++i) dst[i] += s[i];
      }
    }
  }
}

// (C_out, C_in, k, k) -> (k·k·C_in) × C_out, column-major, matching the im2col order.
template <typename T>
ColMat<T> reorder_weight(const Tensor<T>& weight, const Conv2dGeometry& g) {
  ColMat<T> w(g.kernel * g.kernel * g.in_channels, g.out_channels);
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      for (std::size_t ki = 0; ki < g.kernel; ++ki) {
        for (std::size_t kj = 0; kj < g.kernel; ++kj) {
          w((ki * g.kernel + kj) * g.in_channels + ci, co) =
              weight.data[((co * g.in_channels + ci) * g.kernel + ki) * g.kernel + kj];
        }
      }
    }
  }
  return w;
}

}  // namespace

Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& weight, std::size_t stride,
                               std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  if (weight[2] != weight[3]) {
    throw DimensionError("conv2d: kernel must be square, got " + shape_to_string(weight));
  }
  if (weight[1] != input[1]) {
    throw DimensionError("conv2d: channel axis mismatch, input has " + std::to_string(input[1]) +
                         " channels but weight expects " + std::to_string(weight[1]));
  }
  Conv2dGeometry g{};
  g.batch = input[0];
  g.in_channels = input[1];
  g.in_h = input[2];
  g.in_w = input[3];
  g.out_channels = weight[0];
  g.kernel = weight[2];
  g.stride = stride;
  g.padding = padding;
  if (g.kernel > g.in_h + 2 * padding) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.kernel) +
                         " exceeds padded height axis " + std::to_string(g.in_h + 2 * padding));
  }
  if (g.kernel > g.in_w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.kernel) +
                         " exceeds padded width axis " + std::to_string(g.in_w + 2 * padding));
  }
  g.out_h = (g.in_h + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.in_w + 2 * padding - g.kernel) / stride + 1;
  return g;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                 std::size_t stride, std::size_t padding) {
  const auto g = conv2d_geometry(input.shape, weight.shape, stride, padding);
  if (bias && bias->numel() != g.out_channels) {
    throw DimensionError("conv2d: bias length " + std::to_string(bias->numel()) +
                         " does not match output channels " + std::to_string(g.out_channels));
  }
  const std::size_t ckk = g.in_channels * g.kernel * g.kernel;
  const std::size_t out_hw = g.out_h * g.out_w;
  const std::size_t in_size = g.in_channels * g.in_h * g.in_w;

  Tensor<T> out({g.batch, g.out_channels, g.out_h, g.out_w});
  if (use_direct(g)) {
    for (std::size_t n = 0; n < g.batch; ++n) {
      T* dst = out.data.data() + n * g.out_channels * out_hw;
      if (bias) {
        for (std::size_t co = 0; co < g.out_channels; ++co) std::fill_n(dst + co * out_hw, out_hw, bias->data[co]);
      }
      direct_forward(input.data.data() + n * in_size, weight.data.data(), g, dst);
    }
    return out;
  }

  const std::size_t padded_size = (g.in_h + 2 * padding) * (g.in_w + 2 * padding) * g.in_channels;
  std::vector<T> padded(padded_size, T{0});
  std::vector<T> col(out_hw * ckk);
  const ColMat<T> w = reorder_weight(weight, g);
  CMapMat<T> col_mat(col.data(), out_hw, ckk);

  for (std::size_t n = 0; n < g.batch; ++n) {
    pad_channels_last(input.data.data() + n * in_size, g, padded.data());
    im2col(padded.data(), g, col.data());
    // Column-major (H'W' × C_out) is exactly the NCHW slice of sample n.
    Eigen::Map<ColMat<T>> y(out.data.data() + n * g.out_channels * out_hw, out_hw, g.out_channels);
    y.noalias() = col_mat * w;
    if (bias) {
      for (std::size_t co = 0; co < g.out_channels; ++co) y.col(co).array() += bias->data[co];
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                          std::size_t padding, const Tensor<T>& grad_out,
                          std::vector<T>& grad_weight, std::type_identity_t<std::vector<T>>* grad_bias,
                          bool compute_input_grad) {
  const auto g = conv2d_geometry(input.shape, weight.shape, stride, padding);
  const Shape expected{g.batch, g.out_channels, g.out_h, g.out_w};
  if (grad_out.shape != expected) {
    throw DimensionError("conv2d backward: upstream gradient " + shape_to_string(grad_out.shape) +
                         " does not match output " + shape_to_string(expected));
  }
  const std::size_t ckk = g.in_channels * g.kernel * g.kernel;
  const std::size_t out_hw = g.out_h * g.out_w;
  const std::size_t in_size = g.in_channels * g.in_h * g.in_w;
  Tensor<T> grad_input;
  if (compute_input_grad) grad_input = Tensor<T>(input.shape);
  if (use_direct(g)) {
    for (std::size_t n = 0; n < g.batch; ++n) {
      const T* gy = grad_out.data.data() + n * g.out_channels * out_hw;
      if (grad_bias) {
        for (std::size_t co = 0; co < g.out_channels; ++co) {
          T acc{0};
          for (std::size_t p = 0; p < out_hw; ++p) acc += gy[co * out_hw + p];
          (*grad_bias)[co] += acc;
        }
      }
      direct_backward(input.data.data() + n * in_size, weight.data.data(), gy, g, grad_weight.data(),
                      compute_input_grad ? grad_input.data.data() + n * in_size : nullptr);
    }
    return grad_input;
  }

  const std::size_t padded_size = (g.in_h + 2 * padding) * (g.in_w + 2 * padding) * g.in_channels;
  std::vector<T> padded(padded_size, T{0});
  std::vector<T> col(out_hw * ckk);
  Eigen::Map<RowMat<T>> col_mat(col.data(), out_hw, ckk);
  const ColMat<T> w = reorder_weight(weight, g);
  ColMat<T> gw = ColMat<T>::Zero(ckk, g.out_channels);

  std::vector<T> grad_padded(compute_input_grad ? padded_size : 0);
  for (std::size_t n = 0; n < g.batch; ++n) {
    Eigen::Map<const ColMat<T>> gy(grad_out.data.data() + n * g.out_channels * out_hw, out_hw,
                                   g.out_channels);
    if (grad_bias) {
      const T* src = grad_out.data.data() + n * g.out_channels * out_hw;
      for (std::size_t co = 0; co < g.out_channels; ++co) {
        T acc = 0;
        for (std::size_t i = 0; i < out_hw; ++i) acc += src[co * out_hw + i];
        (*grad_bias)[co] += acc;
      }
    }
    pad_channels_last(input.data.data() + n * in_size, g, padded.data());
    im2col(padded.data(), g, col.data());
    gw.noalias() += col_mat.transpose() * gy;
    if (compute_input_grad) {
      col_mat.noalias() = gy * w.transpose();
      std::fill(grad_padded.begin(), grad_padded.end(), T{0});
      col2im(col.data(), g, grad_padded.data());
      unpad_channels_last(grad_padded.data(), g, grad_input.data.data() + n * in_size);
    }
  }
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      for (std::size_t ki = 0; ki < g.kernel; ++ki) {
        for (std::size_t kj = 0; kj < g.kernel; ++kj) {
          grad_weight[((co * g.in_channels + ci) * g.kernel + ki) * g.kernel + kj] +=
              gw((ki * g.kernel + kj) * g.in_channels + ci, co);
        }
      }
    }
  }
  return grad_input;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias) {
  require_rank(input.shape, 2, "linear input");
  require_rank(weight.shape, 2, "linear weight");
  if (input.shape[1] != weight.shape[0]) {
    throw DimensionError("linear: inner dimension mismatch, input has " +
                         std::to_string(input.shape[1]) + " features but weight expects " +
                         std::to_string(weight.shape[0]));
  }
  const std::size_t n = input.shape[0], d = input.shape[1], k = weight.shape[1];
  if (bias && bias->numel() != k) throw DimensionError("linear: bias length mismatch");
  Tensor<T> out({n, k});
  MapMat<T> y(out.data.data(), n, k);
  y.noalias() = CMapMat<T>(input.data.data(), n, d) * CMapMat<T>(weight.data.data(), d, k);
  if (bias) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) y(i, j) += bias->data[j];
    }
  }
  return out;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& grad_out,
                          std::vector<T>& grad_weight, std::type_identity_t<std::vector<T>>* grad_bias) {
  const std::size_t n = input.shape[0], d = input.shape[1], k = weight.shape[1];
  if (grad_out.shape != Shape{n, k}) {
    throw DimensionError("linear backward: upstream gradient " + shape_to_string(grad_out.shape));
  }
  CMapMat<T> gy(grad_out.data.data(), n, k);
  MapMat<T>(grad_weight.data(), d, k).noalias() += CMapMat<T>(input.data.data(), n, d).transpose() * gy;
  if (grad_bias) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) (*grad_bias)[j] += grad_out.data[i * k + j];
    }
  }
  Tensor<T> grad_input({n, d});
  MapMat<T>(grad_input.data.data(), n, d).noalias() =
      gy * CMapMat<T>(weight.data.data(), d, k).transpose();
  return grad_input;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (auto& v : out.data) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  if (input.shape != grad_out.shape) throw DimensionError("relu backward: shape mismatch");
  Tensor<T> out = grad_out;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (!(input.data[i] > T{0})) out.data[i] = T{0};
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& input, std::size_t k) {
  require_rank(input.shape, 4, "avg_pool input");
  const std::size_t n = input.shape[0], c = input.shape[1], h = input.shape[2], w = input.shape[3];
  if (k == 0 || k > h || k > w) {
    throw DimensionError("avg_pool: window " + std::to_string(k) + " larger than spatial extent " +
                         shape_to_string(input.shape));
  }
  const std::size_t oh = h / k, ow = w / k;
  const T scale = T{1} / static_cast<T>(k * k);
  Tensor<T> out({n, c, oh, ow});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          T sum{0};
          for (std::size_t di = 0; di < k; ++di) {
            for (std::size_t dj = 0; dj < k; ++dj) sum += input.at(b, ch, i * k + di, j * k + dj);
          }
          out.at(b, ch, i, j) = sum * scale;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool_backward(const Shape& input_shape, std::size_t k, const Tensor<T>& grad_out) {
  Tensor<T> grad(input_shape);
  const T scale = T{1} / static_cast<T>(k * k);
  for (std::size_t b = 0; b < grad_out.shape[0]; ++b) {
    for (std::size_t ch = 0; ch < grad_out.shape[1]; ++ch) {
      for (std::size_t i = 0; i < grad_out.shape[2]; ++i) {
        for (std::size_t j = 0; j < grad_out.shape[3]; ++j) {
          const T g = grad_out.at(b, ch, i, j) * scale;
          for (std::size_t di = 0; di < k; ++di) {
            for (std::size_t dj = 0; dj < k; ++dj) grad.at(b, ch, i * k + di, j * k + dj) = g;
          }
        }
      }
    }
  }
  return grad;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_rank(input.shape, 4, "global_avg_pool input");
  const std::size_t n = input.shape[0], c = input.shape[1], hw = input.shape[2] * input.shape[3];
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const T* src = input.data.data() + i * hw;
    T sum{0};
    for (std::size_t p = 0; p < hw; ++p) sum += src[p];
    out.data[i] = sum / static_cast<T>(hw);
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  Tensor<T> grad(input_shape);
  const std::size_t hw = input_shape[2] * input_shape[3];
  for (std::size_t i = 0; i < grad_out.numel(); ++i) {
    const T g = grad_out.data[i] / static_cast<T>(hw);
    std::fill_n(grad.data.data() + i * hw, hw, g);
  }
  return grad;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, Mode mode, std::type_identity_t<BatchNormCache<T>>* cache) {
  require_rank(input.shape, 4, "batch_norm input");
  const std::size_t n = input.shape[0], c = input.shape[1], hw = input.shape[2] * input.shape[3];
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("batch_norm: gamma/beta length does not match channel axis " +
                         std::to_string(c));
  }
  if (state.running_mean.size() != c) {
    state.running_mean.assign(c, T{0});
    state.running_var.assign(c, T{1});
  }
  const std::size_t count = n * hw;
  std::vector<T> mean(c), inv_std(c);
  if (mode == Mode::train) {
    if (count < 2) {
      throw DegenerateError("batch_norm: train mode needs at least 2 values per channel, got " +
                            std::to_string(count));
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = input.data.data() + (b * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) sum += src[p];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = input.data.data() + (b * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) sq += (src[p] - mu) * (src[p] - mu);
      }
      const double var = sq / static_cast<double>(count);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
      const double unbiased = sq / static_cast<double>(count - 1);
      state.running_mean[ch] = static_cast<T>((1.0 - kBatchNormMomentum) * state.running_mean[ch] +
                                              kBatchNormMomentum * mu);
      state.running_var[ch] = static_cast<T>((1.0 - kBatchNormMomentum) * state.running_var[ch] +
                                             kBatchNormMomentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[ch]) + kBatchNormEps));
    }
  }
  Tensor<T> normalized(input.shape);
  Tensor<T> out(input.shape);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        const T xhat = (input.data[off + p] - mean[ch]) * inv_std[ch];
        normalized.data[off + p] = xhat;
        out.data[off + p] = gamma.data[ch] * xhat + beta.data[ch];
      }
    }
  }
  if (cache) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
    cache->normalized = std::move(normalized);
    cache->mode = mode;
  }
  return out;
}

template <typename T>
Tensor<T> batch_norm_backward(const Tensor<T>& gamma, const BatchNormCache<T>& cache,
                              const Tensor<T>& grad_out, std::vector<T>& grad_gamma,
                              std::vector<T>& grad_beta) {
  const auto& xhat = cache.normalized;
  if (xhat.shape != grad_out.shape) throw DimensionError("batch_norm backward: shape mismatch");
  const std::size_t n = xhat.shape[0], c = xhat.shape[1], hw = xhat.shape[2] * xhat.shape[3];
  const auto count = static_cast<T>(n * hw);
  Tensor<T> grad(xhat.shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T sum_dy{0}, sum_dy_xhat{0};
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        sum_dy += grad_out.data[off + p];
        sum_dy_xhat += grad_out.data[off + p] * xhat.data[off + p];
      }
    }
    grad_gamma[ch] += sum_dy_xhat;
    grad_beta[ch] += sum_dy;
    const T g = gamma.data[ch] * cache.inv_std[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        if (cache.mode == Mode::train) {
          grad.data[off + p] =
              g * (grad_out.data[off + p] - sum_dy / count - xhat.data[off + p] * sum_dy_xhat / count);
        } else {
          grad.data[off + p] = g * grad_out.data[off + p];
        }
      }
    }
  }
  return grad;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits.shape, 2, "softmax logits");
  const std::size_t n = logits.shape[0], k = logits.shape[1];
  Tensor<T> out(logits.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data.data() + i * k;
    const T mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) {
      out.data[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
  }
  return out;
}

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape, 2, "cross_entropy logits");
  const std::size_t n = logits.shape[0], k = logits.shape[1];
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  LossResult<T> result;
  result.grad = Tensor<T>(logits.shape);
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw LabelError("cross_entropy: label " + std::to_string(y) + " at index " +
                       std::to_string(i) + " outside [0," + std::to_string(k) + ")");
    }
    const T* row = logits.data.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[y];
    T* g = result.grad.data.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(row[j] - log_z);
      g[j] = static_cast<T>((p - (static_cast<int>(j) == y ? 1.0 : 0.0)) * inv_n);
    }
  }
  result.value = total * inv_n;
  return result;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  require_rank(logits.shape, 2, "argmax logits");
  const std::size_t n = logits.shape[0], k = logits.shape[1];
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data.data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
double accuracy(const Tensor<T>& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  if (pred.size() != labels.size()) throw DimensionError("accuracy: label count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(pred.size());
}

#define OODPROBE_INSTANTIATE(T)                                                                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, std::size_t,    \
                            std::size_t);                                                          \
  template Tensor<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t, \
                                     const Tensor<T>&, std::vector<T>&, std::vector<T>*, bool);    \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);                 \
  template Tensor<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                     std::vector<T>&, std::vector<T>*);                            \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> avg_pool(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> avg_pool_backward(const Shape&, std::size_t, const Tensor<T>&);               \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                            \
  template Tensor<T> global_avg_pool_backward(const Shape&, const Tensor<T>&);                     \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                BatchNormState<T>&, Mode, BatchNormCache<T>*);                     \
  template Tensor<T> batch_norm_backward(const Tensor<T>&, const BatchNormCache<T>&,               \
                                         const Tensor<T>&, std::vector<T>&, std::vector<T>&);      \
  template Tensor<T> softmax(const Tensor<T>&);                                                    \
  template LossResult<T> cross_entropy(const Tensor<T>&, std::span<const int>);                   \
  template std::vector<int> argmax_rows(const Tensor<T>&);                                         \
  template double accuracy(const Tensor<T>&, std::span<const int>);

OODPROBE_INSTANTIATE(float)
OODPROBE_INSTANTIATE(double)

#undef OODPROBE_INSTANTIATE

}  // namespace oodprobe::nn
