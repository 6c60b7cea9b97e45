// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ops.hpp
 * @brief  Differentiable primitives: convolution, max pooling, batch norm,
 *         dense, activations and the LSTM / GRU cells, each with an exact
 *         backward kernel.
 *
 * All kernels are pure functions of their arguments. Activations use the
 * layout [B, C, F, T] (batch, channel, frequency, time); rank-3 inputs are
 * treated as a single sample. Backward kernels accumulate into the gradient
 * buffers they are handed.
 */
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "speechface/errors.hpp"
#include "speechface/tensor.hpp"

namespace speechface::ops {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

// ---------------------------------------------------------------------------
// conv2d

struct Conv2dGeometry {
  std::size_t kernel_f = 1;
  std::size_t kernel_t = 1;
  std::size_t stride_f = 1;
  std::size_t stride_t = 1;
  std::size_t pad_f = 0;
  std::size_t pad_t = 0;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel,
                                      std::size_t stride, std::size_t pad,
                                      const char* axis) {
  if (in + 2 * pad < kernel) {
    throw ShapeError(std::string("conv2d: kernel larger than padded input on ") + axis +
                     " axis (" + std::to_string(in) + "+2*" + std::to_string(pad) + " < " +
                     std::to_string(kernel) + ")");
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

struct Layout4 {
  std::size_t batch, channels, freq, time;
};

inline Layout4 layout4(const Dims& d, const char* op) {
  if (d.size() == 4) return {d[0], d[1], d[2], d[3]};
  if (d.size() == 3) return {1, d[0], d[1], d[2]};
  throw ShapeError(std::string(op) + ": expected rank 3 or 4 input, got " + dims_string(d));
}

inline Dims with_layout(const Dims& like, Layout4 l) {
  if (like.size() == 3) return {l.channels, l.freq, l.time};
  return {l.batch, l.channels, l.freq, l.time};
}

struct ConvPlan {
  Layout4 in;
  std::size_t out_channels, out_f, out_t, patch, positions;
};

template <typename T>
ConvPlan plan_conv(const Tensor<T>& input, const Tensor<T>& weights, const Conv2dGeometry& g) {
  ConvPlan p{};
  p.in = layout4(input.dims(), "conv2d");
  if (weights.rank() != 4) {
    throw ShapeError("conv2d: weights must be rank 4, got " + dims_string(weights.dims()));
  }
  if (weights.dim(1) != p.in.channels) {
    throw ShapeError("conv2d: input has " + std::to_string(p.in.channels) +
                     " channels but weights expect " + std::to_string(weights.dim(1)));
  }
  if (weights.dim(2) != g.kernel_f || weights.dim(3) != g.kernel_t) {
    throw ShapeError("conv2d: weight kernel dims " + dims_string(weights.dims()) +
                     " disagree with geometry");
  }
  if (g.stride_f == 0 || g.stride_t == 0) throw ShapeError("conv2d: zero stride");
  p.out_channels = weights.dim(0);
  p.out_f = conv_output_extent(p.in.freq, g.kernel_f, g.stride_f, g.pad_f, "frequency");
  p.out_t = conv_output_extent(p.in.time, g.kernel_t, g.stride_t, g.pad_t, "time");
  p.patch = p.in.channels * g.kernel_f * g.kernel_t;
  p.positions = p.out_f * p.out_t;
  return p;
}

// Samples per im2col chunk, bounding the column buffer to ~4M elements.
inline std::size_t chunk_samples(const ConvPlan& p) {
  const std::size_t per_sample = std::max<std::size_t>(1, p.patch * p.positions);
  return std::clamp<std::size_t>((std::size_t{1} << 22) / per_sample, 1, p.in.batch);
}

// col is [patch, nb * positions], row-major.
template <typename T>
void im2col(const T* in, std::size_t nb, const ConvPlan& p, const Conv2dGeometry& g, T* col) {
  const std::size_t cols = nb * p.positions;
  for (std::size_t c = 0; c < p.in.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_f; ++i) {
      for (std::size_t j = 0; j < g.kernel_t; ++j) {
        T* row = col + ((c * g.kernel_f + i) * g.kernel_t + j) * cols;
        for (std::size_t b = 0; b < nb; ++b) {
          const T* plane = in + (b * p.in.channels + c) * p.in.freq * p.in.time;
          for (std::size_t fo = 0; fo < p.out_f; ++fo) {
            T* dst = row + b * p.positions + fo * p.out_t;
            const auto fi = static_cast<std::ptrdiff_t>(fo * g.stride_f + i) -
                            static_cast<std::ptrdiff_t>(g.pad_f);
            if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(p.in.freq)) {
              std::fill(dst, dst + p.out_t, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(fi) * p.in.time;
            for (std::size_t to = 0; to < p.out_t; ++to) {
              const auto ti = static_cast<std::ptrdiff_t>(to * g.stride_t + j) -
                              static_cast<std::ptrdiff_t>(g.pad_t);
              dst[to] = (ti < 0 || ti >= static_cast<std::ptrdiff_t>(p.in.time))
                            ? T(0)
                            : src[ti];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t nb, const ConvPlan& p, const Conv2dGeometry& g, T* in) {
  const std::size_t cols = nb * p.positions;
  for (std::size_t c = 0; c < p.in.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_f; ++i) {
      for (std::size_t j = 0; j < g.kernel_t; ++j) {
        const T* row = col + ((c * g.kernel_f + i) * g.kernel_t + j) * cols;
        for (std::size_t b = 0; b < nb; ++b) {
          T* plane = in + (b * p.in.channels + c) * p.in.freq * p.in.time;
          for (std::size_t fo = 0; fo < p.out_f; ++fo) {
            const auto fi = static_cast<std::ptrdiff_t>(fo * g.stride_f + i) -
                            static_cast<std::ptrdiff_t>(g.pad_f);
            if (fi < 0 || fi >= static_cast<std::ptrdiff_t>(p.in.freq)) continue;
            const T* src = row + b * p.positions + fo * p.out_t;
            T* dst = plane + static_cast<std::size_t>(fi) * p.in.time;
            for (std::size_t to = 0; to < p.out_t; ++to) {
              const auto ti = static_cast<std::ptrdiff_t>(to * g.stride_t + j) -
                              static_cast<std::ptrdiff_t>(g.pad_t);
              if (ti >= 0 && ti < static_cast<std::ptrdiff_t>(p.in.time)) dst[ti] += src[to];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation with symmetric zero padding. `bias` may be empty.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias,
                 const Conv2dGeometry& g) {
  const auto p = detail::plan_conv(input, weights, g);
  if (!bias.empty() && bias.size() != p.out_channels) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " != " +
                     std::to_string(p.out_channels) + " output channels");
  }
  Tensor<T> out(detail::with_layout(input.dims(), {p.in.batch, p.out_channels, p.out_f, p.out_t}));
  const std::size_t chunk = detail::chunk_samples(p);
  const std::size_t in_stride = p.in.channels * p.in.freq * p.in.time;
  const std::size_t out_stride = p.out_channels * p.positions;
  ConstMatrixMap<T> w(weights.raw(), p.out_channels, p.patch);
  std::vector<T> col;
  RowMatrix<T> result;
  for (std::size_t b0 = 0; b0 < p.in.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, p.in.batch - b0);
    const std::size_t n = nb * p.positions;
    col.resize(p.patch * n);
    detail::im2col(input.raw() + b0 * in_stride, nb, p, g, col.data());
    result.noalias() = w * ConstMatrixMap<T>(col.data(), p.patch, n);
    for (std::size_t b = 0; b < nb; ++b) {
      T* dst = out.raw() + (b0 + b) * out_stride;
      for (std::size_t co = 0; co < p.out_channels; ++co) {
        const T shift = bias.empty() ? T(0) : bias[co];
        const T* src = result.data() + co * n + b * p.positions;
        for (std::size_t k = 0; k < p.positions; ++k) dst[co * p.positions + k] = src[k] + shift;
      }
    }
  }
  return out;
}

/// Accumulates dL/dinput (if non-null), dL/dweights and dL/dbias (if non-null).
template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_out,
                     const Conv2dGeometry& g, Tensor<T>* grad_input, Tensor<T>& grad_weights,
                     Tensor<T>* grad_bias) {
  const auto p = detail::plan_conv(input, weights, g);
  const std::size_t chunk = detail::chunk_samples(p);
  const std::size_t in_stride = p.in.channels * p.in.freq * p.in.time;
  const std::size_t out_stride = p.out_channels * p.positions;
  if (grad_out.size() != p.in.batch * out_stride) {
    throw ShapeError("conv2d backward: upstream gradient dims " + dims_string(grad_out.dims()));
  }
  ConstMatrixMap<T> w(weights.raw(), p.out_channels, p.patch);
  MatrixMap<T> dw(grad_weights.raw(), p.out_channels, p.patch);
  std::vector<T> col, dcol;
  RowMatrix<T> dout;
  for (std::size_t b0 = 0; b0 < p.in.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, p.in.batch - b0);
    const std::size_t n = nb * p.positions;
    dout.resize(p.out_channels, n);
    for (std::size_t b = 0; b < nb; ++b) {
      const T* src = grad_out.raw() + (b0 + b) * out_stride;
      for (std::size_t co = 0; co < p.out_channels; ++co) {
        std::copy_n(src + co * p.positions, p.positions, dout.data() + co * n + b * p.positions);
      }
    }
    if (grad_bias) {
      for (std::size_t co = 0; co < p.out_channels; ++co) (*grad_bias)[co] += dout.row(co).sum();
    }
    col.resize(p.patch * n);
    detail::im2col(input.raw() + b0 * in_stride, nb, p, g, col.data());
    dw.noalias() += dout * ConstMatrixMap<T>(col.data(), p.patch, n).transpose();
    if (grad_input) {
      dcol.resize(p.patch * n);
      MatrixMap<T>(dcol.data(), p.patch, n).noalias() = w.transpose() * dout;
      detail::col2im_add(dcol.data(), nb, p, g, grad_input->raw() + b0 * in_stride);
    }
  }
}

// ---------------------------------------------------------------------------
// max_pool2d

struct PoolWindow {
  std::size_t window_f = 1;
  std::size_t window_t = 1;
  std::size_t stride_f = 1;
  std::size_t stride_t = 1;
};

template <typename T>
struct PoolResult {
  Tensor<T> output;
  /// Flat input offset of the maximum for every output element.
  std::vector<std::size_t> argmax;
};

/// Trailing partial windows are dropped.
template <typename T>
PoolResult<T> max_pool2d(const Tensor<T>& input, const PoolWindow& w) {
  const auto l = detail::layout4(input.dims(), "max_pool2d");
  if (w.window_f > l.freq || w.window_t > l.time || w.window_f == 0 || w.window_t == 0) {
    throw ShapeError("max_pool2d: window (" + std::to_string(w.window_f) + "," +
                     std::to_string(w.window_t) + ") does not fit input " + dims_string(input.dims()));
  }
  if (w.stride_f == 0 || w.stride_t == 0) throw ShapeError("max_pool2d: zero stride");
  const std::size_t of = (l.freq - w.window_f) / w.stride_f + 1;
  const std::size_t ot = (l.time - w.window_t) / w.stride_t + 1;
  PoolResult<T> r{Tensor<T>(detail::with_layout(input.dims(), {l.batch, l.channels, of, ot})), {}};
  r.argmax.resize(r.output.size());
  std::size_t k = 0;
  for (std::size_t plane = 0; plane < l.batch * l.channels; ++plane) {
    const std::size_t base = plane * l.freq * l.time;
    for (std::size_t f = 0; f < of; ++f) {
      for (std::size_t t = 0; t < ot; ++t, ++k) {
        std::size_t best = base + f * w.stride_f * l.time + t * w.stride_t;
        for (std::size_t i = 0; i < w.window_f; ++i) {
          for (std::size_t j = 0; j < w.window_t; ++j) {
            const std::size_t idx = base + (f * w.stride_f + i) * l.time + t * w.stride_t + j;
            if (!std::isnan(input[best]) && !(input[idx] <= input[best])) best = idx;  // NaN wins
          }
        }
        r.output[k] = input[best];
        r.argmax[k] = best;
      }
    }
  }
  return r;
}

template <typename T>
void max_pool2d_backward(const Tensor<T>& grad_out, std::span<const std::size_t> argmax,
                         Tensor<T>& grad_input) {
  for (std::size_t k = 0; k < argmax.size(); ++k) grad_input[argmax[k]] += grad_out[k];
}

// ---------------------------------------------------------------------------
// batch_norm

template <typename T>
struct BatchNormState {
  ParamTensor<T> gamma;
  ParamTensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.9);
  T epsilon = T(1e-5);

  BatchNormState() = default;
  BatchNormState(const std::string& prefix, std::size_t channels)
      : gamma(prefix + ".gamma", Tensor<T>({channels}, T(1))),
        beta(prefix + ".beta", Tensor<T>({channels}, T(0))),
        running_mean(channels, T(0)),
        running_var(channels, T(1)) {}

  std::size_t channels() const { return running_mean.size(); }
};

template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;
  std::vector<T> inv_std;
  bool training = false;
};

/**
 * Per-channel normalization over the batch and any trailing spatial axes.
 * Training mode uses biased batch statistics and folds them into the running
 * estimates as running = momentum * running + (1 - momentum) * batch.
 */
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, bool training,
                     BatchNormCache<T>* cache = nullptr) {
  if (input.rank() < 2) throw ShapeError("batch_norm: input must be [B x C x ...]");
  const std::size_t batch = input.dim(0);
  const std::size_t channels = input.dim(1);
  if (channels != state.channels()) {
    throw ShapeError("batch_norm: input has " + std::to_string(channels) +
                     " channels, state has " + std::to_string(state.channels()));
  }
  if (training && batch < 2) {
    throw InvalidConfiguration("batch_norm: training mode requires batch size >= 2");
  }
  const std::size_t inner = input.size() / (batch * channels);
  using A = Accum<T>;
  const A count = static_cast<A>(batch * inner);

  std::vector<T> mean(channels), inv_std(channels);
  if (training) {
    for (std::size_t c = 0; c < channels; ++c) {
      A sum = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* x = input.raw() + (b * channels + c) * inner;
        for (std::size_t k = 0; k < inner; ++k) sum += x[k];
      }
      const A mu = sum / count;
      A sq = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* x = input.raw() + (b * channels + c) * inner;
        for (std::size_t k = 0; k < inner; ++k) sq += (x[k] - mu) * (x[k] - mu);
      }
      const A var = sq / count;
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(A(1) / std::sqrt(var + static_cast<A>(state.epsilon)));
      state.running_mean[c] = state.momentum * state.running_mean[c] + (T(1) - state.momentum) * static_cast<T>(mu);
      state.running_var[c] = state.momentum * state.running_var[c] + (T(1) - state.momentum) * static_cast<T>(var);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + state.epsilon);
    }
  }

  Tensor<T> out(input.dims());
  Tensor<T> normalized;
  if (cache) normalized = Tensor<T>(input.dims());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * inner;
      const T g = state.gamma.value[c];
      const T be = state.beta.value[c];
      for (std::size_t k = 0; k < inner; ++k) {
        const T xh = (input[off + k] - mean[c]) * inv_std[c];
        if (cache) normalized[off + k] = xh;
        out[off + k] = g * xh + be;
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
    cache->training = training;
  }
  return out;
}

template <typename T>
void batch_norm_backward(const Tensor<T>& grad_out, BatchNormState<T>& state,
                         const BatchNormCache<T>& cache, Tensor<T>* grad_input) {
  const std::size_t batch = grad_out.dim(0);
  const std::size_t channels = grad_out.dim(1);
  const std::size_t inner = grad_out.size() / (batch * channels);
  const T count = static_cast<T>(batch * inner);
  for (std::size_t c = 0; c < channels; ++c) {
    T sum_dy = 0, sum_dy_xh = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels + c) * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        sum_dy += grad_out[off + k];
        sum_dy_xh += grad_out[off + k] * cache.normalized[off + k];
      }
    }
    state.gamma.grad[c] += sum_dy_xh;
    state.beta.grad[c] += sum_dy;
    if (!grad_input) continue;
    const T g = state.gamma.value[c] * cache.inv_std[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels + c) * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        const T dy = grad_out[off + k];
        (*grad_input)[off + k] +=
            cache.training
                ? g * (dy - sum_dy / count - cache.normalized[off + k] * sum_dy_xh / count)
                : g * dy;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// dense

namespace detail {
inline std::pair<std::size_t, std::size_t> rows_cols(const Dims& d, const char* op) {
  if (d.size() == 1) return {1, d[0]};
  if (d.size() == 2) return {d[0], d[1]};
  throw ShapeError(std::string(op) + ": expected rank 1 or 2 input, got " + dims_string(d));
}
}  // namespace detail

/// out = input * weights^T + bias, input [B x D_in], weights [D_out x D_in].
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias) {
  const auto [rows, in_dim] = detail::rows_cols(input.dims(), "dense");
  if (weights.rank() != 2 || weights.dim(1) != in_dim) {
    throw ShapeError("dense: input " + dims_string(input.dims()) + " incompatible with weights " +
                     dims_string(weights.dims()));
  }
  const std::size_t out_dim = weights.dim(0);
  if (!bias.empty() && bias.size() != out_dim) throw ShapeError("dense: bias length mismatch");
  Tensor<T> out(input.rank() == 1 ? Dims{out_dim} : Dims{rows, out_dim});
  MatrixMap<T> o(out.raw(), rows, out_dim);
  o.noalias() = ConstMatrixMap<T>(input.raw(), rows, in_dim) *
                ConstMatrixMap<T>(weights.raw(), out_dim, in_dim).transpose();
  if (!bias.empty()) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) o(r, c) += bias[c];
  }
  return out;
}

template <typename T>
void dense_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_out,
                    Tensor<T>* grad_input, Tensor<T>& grad_weights, Tensor<T>* grad_bias) {
  const auto [rows, in_dim] = detail::rows_cols(input.dims(), "dense");
  const std::size_t out_dim = weights.dim(0);
  ConstMatrixMap<T> dy(grad_out.raw(), rows, out_dim);
  MatrixMap<T>(grad_weights.raw(), out_dim, in_dim).noalias() +=
      dy.transpose() * ConstMatrixMap<T>(input.raw(), rows, in_dim);
  if (grad_bias) {
    for (std::size_t c = 0; c < out_dim; ++c) (*grad_bias)[c] += dy.col(c).sum();
  }
  if (grad_input) {
    MatrixMap<T>(grad_input->raw(), rows, in_dim).noalias() +=
        dy * ConstMatrixMap<T>(weights.raw(), out_dim, in_dim);
  }
}

// ---------------------------------------------------------------------------
// activations

enum class Activation { relu, tanh, sigmoid };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T activate(Activation kind, T x) {
  switch (kind) {
    case Activation::relu: return x < T(0) ? T(0) : x;  // NaN passes through
    case Activation::tanh: return std::tanh(x);
    case Activation::sigmoid: return sigmoid(x);
  }
  return x;
}

template <typename T>
Tensor<T> apply_activation(const Tensor<T>& input, Activation kind) {
  Tensor<T> out(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = activate(kind, input[i]);
  return out;
}

/// Uses the forward output rather than the input.
template <typename T>
void activation_backward(const Tensor<T>& output, const Tensor<T>& grad_out, Activation kind,
                         Tensor<T>& grad_input) {
  for (std::size_t i = 0; i < output.size(); ++i) {
    const T y = output[i];
    T d = 0;
    switch (kind) {
      case Activation::relu: d = y > T(0) ? T(1) : T(0); break;
      case Activation::tanh: d = T(1) - y * y; break;
      case Activation::sigmoid: d = y * (T(1) - y); break;
    }
    grad_input[i] += grad_out[i] * d;
  }
}

// ---------------------------------------------------------------------------
// recurrent cells

/**
 * Weights of one recurrent cell with `gates` stacked gate blocks:
 * weight_ih [gates*H x D], weight_hh [gates*H x H], bias [gates*H].
 * LSTM blocks are ordered (input, forget, candidate, output); GRU blocks
 * (update, reset, candidate).
 */
template <typename T>
struct RecurrentCellParams {
  ParamTensor<T> weight_ih;
  ParamTensor<T> weight_hh;
  ParamTensor<T> bias;

  std::size_t hidden() const { return weight_hh.value.dim(1); }
  std::size_t input() const { return weight_ih.value.dim(1); }
  std::size_t gates() const { return weight_hh.value.dim(0) / hidden(); }
};

namespace detail {
template <typename T>
void check_cell(const RecurrentCellParams<T>& p, std::size_t gates, std::size_t rows,
                std::size_t in_dim, const Tensor<T>& h, const char* op) {
  const std::size_t hid = p.hidden();
  if (p.gates() != gates || p.weight_ih.value.dim(0) != gates * hid || p.bias.value.size() != gates * hid) {
    throw ShapeError(std::string(op) + ": parameter dims inconsistent with cell type");
  }
  if (in_dim != p.input()) {
    throw ShapeError(std::string(op) + ": input width " + std::to_string(in_dim) +
                     " != cell input width " + std::to_string(p.input()));
  }
  const auto [hr, hc] = rows_cols(h.dims(), op);
  if (hr != rows || hc != hid) {
    throw ShapeError(std::string(op) + ": state dims " + dims_string(h.dims()) +
                     " inconsistent with input rows " + std::to_string(rows) + " / hidden " +
                     std::to_string(hid));
  }
}

// pre = x Wih^T + h Whh^T + b  ->  [rows x gates*H]
template <typename T>
RowMatrix<T> gate_preactivations(const Tensor<T>& x, const Tensor<T>& h,
                                 const RecurrentCellParams<T>& p, std::size_t rows) {
  const std::size_t g = p.weight_hh.value.dim(0);
  RowMatrix<T> pre(rows, g);
  pre.noalias() = ConstMatrixMap<T>(x.raw(), rows, p.input()) *
                  ConstMatrixMap<T>(p.weight_ih.value.raw(), g, p.input()).transpose();
  pre.noalias() += ConstMatrixMap<T>(h.raw(), rows, p.hidden()) *
                   ConstMatrixMap<T>(p.weight_hh.value.raw(), g, p.hidden()).transpose();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < g; ++c) pre(r, c) += p.bias.value[c];
  return pre;
}
}  // namespace detail

template <typename T>
struct LstmCache {
  Tensor<T> x, h, c;
  RowMatrix<T> gates;  // activated i, f, g, o
  Tensor<T> c_next, tanh_c_next;
};

/// One LSTM step for a batch: x [B x D], h, c [B x H] (rank-1 for B = 1).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_step(const Tensor<T>& x, const Tensor<T>& h,
                                          const Tensor<T>& c, const RecurrentCellParams<T>& p,
                                          LstmCache<T>* cache = nullptr) {
  const auto [rows, in_dim] = detail::rows_cols(x.dims(), "lstm_step");
  detail::check_cell(p, 4, rows, in_dim, h, "lstm_step");
  if (c.dims() != h.dims()) throw ShapeError("lstm_step: cell state dims differ from hidden state");
  const std::size_t hid = p.hidden();
  RowMatrix<T> gates = detail::gate_preactivations(x, h, p, rows);
  Tensor<T> h_next(h.dims()), c_next(h.dims()), tanh_c(h.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < hid; ++k) {
      const T i = sigmoid(gates(r, k));
      const T f = sigmoid(gates(r, hid + k));
      const T g = std::tanh(gates(r, 2 * hid + k));
      const T o = sigmoid(gates(r, 3 * hid + k));
      gates(r, k) = i;
      gates(r, hid + k) = f;
      gates(r, 2 * hid + k) = g;
      gates(r, 3 * hid + k) = o;
      const std::size_t idx = r * hid + k;
      c_next[idx] = f * c[idx] + i * g;
      tanh_c[idx] = std::tanh(c_next[idx]);
      h_next[idx] = o * tanh_c[idx];
    }
  }
  if (cache) {
    cache->x = x;
    cache->h = h;
    cache->c = c;
    cache->gates = std::move(gates);
    cache->c_next = c_next;
    cache->tanh_c_next = std::move(tanh_c);
  }
  return {std::move(h_next), std::move(c_next)};
}

/// grad_x / grad_h / grad_c are accumulated when non-null; parameter
/// gradients always accumulate into p's grad buffers.
template <typename T>
void lstm_step_backward(const LstmCache<T>& cache, RecurrentCellParams<T>& p,
                        const Tensor<T>* grad_h_next, const Tensor<T>* grad_c_next,
                        Tensor<T>* grad_x, Tensor<T>* grad_h, Tensor<T>* grad_c) {
  const auto [rows, in_dim] = detail::rows_cols(cache.x.dims(), "lstm_step");
  const std::size_t hid = p.hidden();
  RowMatrix<T> dpre(rows, 4 * hid);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < hid; ++k) {
      const std::size_t idx = r * hid + k;
      const T i = cache.gates(r, k), f = cache.gates(r, hid + k);
      const T g = cache.gates(r, 2 * hid + k), o = cache.gates(r, 3 * hid + k);
      const T tc = cache.tanh_c_next[idx];
      const T dh = grad_h_next ? (*grad_h_next)[idx] : T(0);
      T dc = grad_c_next ? (*grad_c_next)[idx] : T(0);
      dc += dh * o * (T(1) - tc * tc);
      dpre(r, k) = dc * g * i * (T(1) - i);
      dpre(r, hid + k) = dc * cache.c[idx] * f * (T(1) - f);
      dpre(r, 2 * hid + k) = dc * i * (T(1) - g * g);
      dpre(r, 3 * hid + k) = dh * tc * o * (T(1) - o);
      if (grad_c) (*grad_c)[idx] += dc * f;
    }
  }
  const std::size_t gh = 4 * hid;
  MatrixMap<T>(p.weight_ih.grad.raw(), gh, in_dim).noalias() +=
      dpre.transpose() * ConstMatrixMap<T>(cache.x.raw(), rows, in_dim);
  MatrixMap<T>(p.weight_hh.grad.raw(), gh, hid).noalias() +=
      dpre.transpose() * ConstMatrixMap<T>(cache.h.raw(), rows, hid);
  for (std::size_t c = 0; c < gh; ++c) p.bias.grad[c] += dpre.col(c).sum();
  if (grad_x) {
    MatrixMap<T>(grad_x->raw(), rows, in_dim).noalias() +=
        dpre * ConstMatrixMap<T>(p.weight_ih.value.raw(), gh, in_dim);
  }
  if (grad_h) {
    MatrixMap<T>(grad_h->raw(), rows, hid).noalias() +=
        dpre * ConstMatrixMap<T>(p.weight_hh.value.raw(), gh, hid);
  }
}

template <typename T>
struct GruCache {
  Tensor<T> x, h;
  RowMatrix<T> gates;  // activated z, r, candidate
  RowMatrix<T> reset_h;
};

/**
 * One GRU step: z = sig(.), r = sig(.), n = tanh(Wx x + Uh (r * h) + b),
 * h' = (1 - z) * h + z * n.
 */
template <typename T>
Tensor<T> gru_step(const Tensor<T>& x, const Tensor<T>& h, const RecurrentCellParams<T>& p,
                   GruCache<T>* cache = nullptr) {
  const auto [rows, in_dim] = detail::rows_cols(x.dims(), "gru_step");
  detail::check_cell(p, 3, rows, in_dim, h, "gru_step");
  const std::size_t hid = p.hidden();
  const std::size_t g3 = 3 * hid;
  ConstMatrixMap<T> wih(p.weight_ih.value.raw(), g3, in_dim);
  ConstMatrixMap<T> whh(p.weight_hh.value.raw(), g3, hid);
  ConstMatrixMap<T> hm(h.raw(), rows, hid);

  RowMatrix<T> gates(rows, g3);
  gates.noalias() = ConstMatrixMap<T>(x.raw(), rows, in_dim) * wih.transpose();
  gates.leftCols(2 * hid).noalias() += hm * whh.topRows(2 * hid).transpose();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < g3; ++c) gates(r, c) += p.bias.value[c];
    for (std::size_t c = 0; c < 2 * hid; ++c) gates(r, c) = sigmoid(gates(r, c));
  }
  RowMatrix<T> reset_h(rows, hid);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < hid; ++k) reset_h(r, k) = gates(r, hid + k) * hm(r, k);
  gates.rightCols(hid).noalias() += reset_h * whh.bottomRows(hid).transpose();

  Tensor<T> h_next(h.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < hid; ++k) {
      const T n = std::tanh(gates(r, 2 * hid + k));
      gates(r, 2 * hid + k) = n;
      const T z = gates(r, k);
      h_next[r * hid + k] = (T(1) - z) * hm(r, k) + z * n;
    }
  }
  if (cache) {
    cache->x = x;
    cache->h = h;
    cache->gates = std::move(gates);
    cache->reset_h = std::move(reset_h);
  }
  return h_next;
}

template <typename T>
void gru_step_backward(const GruCache<T>& cache, RecurrentCellParams<T>& p,
                       const Tensor<T>& grad_h_next, Tensor<T>* grad_x, Tensor<T>* grad_h) {
  const auto [rows, in_dim] = detail::rows_cols(cache.x.dims(), "gru_step");
  const std::size_t hid = p.hidden();
  const std::size_t g3 = 3 * hid;
  ConstMatrixMap<T> whh(p.weight_hh.value.raw(), g3, hid);

  RowMatrix<T> dpre(rows, g3);
  RowMatrix<T> dh_direct(rows, hid);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < hid; ++k) {
      const std::size_t idx = r * hid + k;
      const T z = cache.gates(r, k), n = cache.gates(r, 2 * hid + k);
      const T dy = grad_h_next[idx];
      dpre(r, k) = dy * (n - cache.h[idx]) * z * (T(1) - z);
      dpre(r, 2 * hid + k) = dy * z * (T(1) - n * n);
      dh_direct(r, k) = dy * (T(1) - z);
    }
  }
  // gradient through the reset-gated state feeding the candidate
  RowMatrix<T> d_reset_h = dpre.rightCols(hid) * whh.bottomRows(hid);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < hid; ++k) {
      const T rg = cache.gates(r, hid + k);
      dpre(r, hid + k) = d_reset_h(r, k) * cache.h[r * hid + k] * rg * (T(1) - rg);
      dh_direct(r, k) += d_reset_h(r, k) * rg;
    }
  }
  MatrixMap<T>(p.weight_ih.grad.raw(), g3, in_dim).noalias() +=
      dpre.transpose() * ConstMatrixMap<T>(cache.x.raw(), rows, in_dim);
  MatrixMap<T> dwhh(p.weight_hh.grad.raw(), g3, hid);
  dwhh.topRows(2 * hid).noalias() +=
      dpre.leftCols(2 * hid).transpose() * ConstMatrixMap<T>(cache.h.raw(), rows, hid);
  dwhh.bottomRows(hid).noalias() += dpre.rightCols(hid).transpose() * cache.reset_h;
  for (std::size_t c = 0; c < g3; ++c) p.bias.grad[c] += dpre.col(c).sum();
  if (grad_x) {
    MatrixMap<T>(grad_x->raw(), rows, in_dim).noalias() +=
        dpre * ConstMatrixMap<T>(p.weight_ih.value.raw(), g3, in_dim);
  }
  if (grad_h) {
    MatrixMap<T> gh(grad_h->raw(), rows, hid);
    gh += dh_direct;
    gh.noalias() += dpre.leftCols(2 * hid) * whh.topRows(2 * hid);
  }
}

}  // namespace speechface::ops
