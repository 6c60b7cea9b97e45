// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autograd.hpp
 * @brief  Reverse-mode gradient tape over the kernels in ops.hpp.
 *
 * A Tape records every operation of one forward pass. Values live on the
 * tape; parameters are referenced, and their gradients are accumulated
 * directly into ParamTensor::grad during backward(). A tape belongs to one
 * execution stream and is discarded after backward().
 */
#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "speechface/errors.hpp"
#include "speechface/ops.hpp"
#include "speechface/tensor.hpp"

namespace speechface {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  /// With param_grads=false nothing is recorded for parameter gradients,
  /// which makes inference forward passes cheap.
  explicit Tape(bool param_grads = true) : param_grads_(param_grads) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool param_grads() const { return param_grads_; }

  Var input(Tensor<T> value, bool requires_grad = false, std::string label = "input") {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(label), {}});
    return Var{nodes_.size() - 1};
  }

  /// Low-level recording used by the op wrappers below. `backward` is only
  /// stored when some input or parameter needs a gradient.
  Var record(Tensor<T> value, std::string label, bool needs_grad, Backward backward) {
    debug_check_finite(value, label.c_str());
    nodes_.push_back(Node{std::move(value), {}, needs_grad, std::move(label),
                          needs_grad ? std::move(backward) : Backward{}});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  const std::string& label(Var v) const { return node(v).label; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  bool any_requires_grad(std::initializer_list<Var> vars) const {
    for (auto v : vars)
      if (node(v).requires_grad) return true;
    return false;
  }

  /// Gradient of the last backward() target w.r.t. v (zeros if untouched).
  Tensor<T> grad(Var v) const {
    const auto& n = node(v);
    if (!n.requires_grad) throw StateError("grad requested for a value that does not require grad");
    if (!consumed_) throw StateError("grad requested before backward");
    return n.grad.empty() ? Tensor<T>(n.value.dims()) : n.grad;
  }

  /// Gradient accumulator for v, allocated on first use.
  Tensor<T>& grad_buffer(Var v) {
    auto& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.dims());
    return n.grad;
  }

  void backward(Var loss) {
    if (nodes_.empty()) throw StateError("backward called before any forward pass was recorded");
    if (consumed_) throw StateError("backward called twice on the same tape");
    const auto& ln = node(loss);
    if (ln.value.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " + dims_string(ln.value.dims()));
    }
    consumed_ = true;
    if (!ln.requires_grad) return;
    grad_buffer(loss).fill(T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
    }
  }

  /// Label of the first recorded value holding a NaN or infinity.
  std::optional<std::string> first_non_finite() const {
    for (const auto& n : nodes_)
      if (!n.value.all_finite()) return n.label;
    return std::nullopt;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::string label;
    Backward backward;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw StateError("variable does not belong to this tape");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw StateError("variable does not belong to this tape");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  bool param_grads_;
  bool consumed_ = false;
};

/// Differentiable operations recorded on a Tape.
namespace ag {

template <typename T>
Var conv2d(Tape<T>& tape, Var x, ParamTensor<T>& weight, ParamTensor<T>* bias,
           const ops::Conv2dGeometry& geom, std::string label = "conv2d") {
  std::span<const T> b = bias ? bias->value.data() : std::span<const T>{};
  Tensor<T> out = ops::conv2d(tape.value(x), weight.value, b, geom);
  const bool need = tape.param_grads() || tape.requires_grad(x);
  return tape.record(std::move(out), std::move(label), need,
                     [x, &weight, bias, geom](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>* gx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
                       if (t.param_grads()) {
                         ops::conv2d_backward<T>(t.value(x), weight.value, g, geom, gx, weight.grad,
                                              bias ? &bias->grad : nullptr);
                       } else {
                         Tensor<T> scratch(weight.value.dims());
                         ops::conv2d_backward<T>(t.value(x), weight.value, g, geom, gx, scratch, nullptr);
                       }
                     });
}

template <typename T>
Var max_pool2d(Tape<T>& tape, Var x, const ops::PoolWindow& window, std::string label = "pool") {
  auto r = ops::max_pool2d(tape.value(x), window);
  return tape.record(std::move(r.output), std::move(label), tape.requires_grad(x),
                     [x, argmax = std::move(r.argmax)](Tape<T>& t, const Tensor<T>& g) {
                       ops::max_pool2d_backward<T>(g, argmax, t.grad_buffer(x));
                     });
}

template <typename T>
Var batch_norm(Tape<T>& tape, Var x, ops::BatchNormState<T>& state, bool training,
               std::string label = "batch_norm") {
  ops::BatchNormCache<T> cache;
  Tensor<T> out = ops::batch_norm(tape.value(x), state, training, &cache);
  const bool need = tape.param_grads() || tape.requires_grad(x);
  return tape.record(std::move(out), std::move(label), need,
                     [x, &state, cache = std::move(cache)](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>* gx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
                       if (t.param_grads()) {
                         ops::batch_norm_backward(g, state, cache, gx);
                       } else {
                         auto shadow = state;
                         ops::batch_norm_backward(g, shadow, cache, gx);
                       }
                     });
}

template <typename T>
Var dense(Tape<T>& tape, Var x, ParamTensor<T>& weight, ParamTensor<T>* bias,
          std::string label = "dense") {
  std::span<const T> b = bias ? bias->value.data() : std::span<const T>{};
  Tensor<T> out = ops::dense(tape.value(x), weight.value, b);
  const bool need = tape.param_grads() || tape.requires_grad(x);
  return tape.record(std::move(out), std::move(label), need,
                     [x, &weight, bias](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>* gx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
                       if (t.param_grads()) {
                         ops::dense_backward<T>(t.value(x), weight.value, g, gx, weight.grad,
                                             bias ? &bias->grad : nullptr);
                       } else {
                         Tensor<T> scratch(weight.value.dims());
                         ops::dense_backward<T>(t.value(x), weight.value, g, gx, scratch, nullptr);
                       }
                     });
}

template <typename T>
Var activation(Tape<T>& tape, Var x, ops::Activation kind, std::string label = "") {
  if (label.empty()) label = ops::activation_name(kind);
  Tensor<T> out = ops::apply_activation(tape.value(x), kind);
  const Var y{tape.size()};
  return tape.record(std::move(out), std::move(label), tape.requires_grad(x),
                     [x, y, kind](Tape<T>& t, const Tensor<T>& g) {
                       ops::activation_backward(t.value(y), g, kind, t.grad_buffer(x));
                     });
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Dims dims, std::string label = "reshape") {
  Tensor<T> out = tape.value(x).reshaped(std::move(dims));
  return tape.record(std::move(out), std::move(label), tape.requires_grad(x),
                     [x](Tape<T>& t, const Tensor<T>& g) {
                       auto& gx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

/// Rows of a [N x D] value, in the given order.
template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<std::size_t> rows, std::string label = "gather") {
  const auto& v = tape.value(x);
  if (v.rank() != 2) throw ShapeError("gather_rows: expected rank 2, got " + dims_string(v.dims()));
  const std::size_t width = v.dim(1);
  Tensor<T> out({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= v.dim(0)) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(v.raw() + rows[r] * width, width, out.raw() + r * width);
  }
  return tape.record(std::move(out), std::move(label), tape.requires_grad(x),
                     [x, rows = std::move(rows), width](Tape<T>& t, const Tensor<T>& g) {
                       auto& gx = t.grad_buffer(x);
                       for (std::size_t r = 0; r < rows.size(); ++r)
                         for (std::size_t k = 0; k < width; ++k) gx[rows[r] * width + k] += g[r * width + k];
                     });
}

template <typename T>
Var concat_rows(Tape<T>& tape, std::span<const Var> parts, std::string label = "concat_rows") {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t width = tape.value(parts[0]).dim(1);
  std::size_t rows = 0;
  bool need = false;
  for (auto p : parts) {
    const auto& v = tape.value(p);
    if (v.rank() != 2 || v.dim(1) != width) throw ShapeError("concat_rows: width mismatch");
    rows += v.dim(0);
    need = need || tape.requires_grad(p);
  }
  Tensor<T> out({rows, width});
  std::size_t off = 0;
  for (auto p : parts) {
    const auto& v = tape.value(p);
    std::copy(v.data().begin(), v.data().end(), out.raw() + off);
    off += v.size();
  }
  return tape.record(std::move(out), std::move(label), need,
                     [ps = std::vector<Var>(parts.begin(), parts.end())](Tape<T>& t, const Tensor<T>& g) {
                       std::size_t off = 0;
                       for (auto p : ps) {
                         const std::size_t n = t.value(p).size();
                         if (t.requires_grad(p)) {
                           auto& gp = t.grad_buffer(p);
                           for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
                         }
                         off += n;
                       }
                     });
}

/// Columns [begin, begin + count) of a [N x D] value.
template <typename T>
Var slice_cols(Tape<T>& tape, Var x, std::size_t begin, std::size_t count,
               std::string label = "slice") {
  const auto& v = tape.value(x);
  if (v.rank() != 2 || begin + count > v.dim(1)) throw ShapeError("slice_cols: out of range");
  const std::size_t rows = v.dim(0), width = v.dim(1);
  Tensor<T> out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(v.raw() + r * width + begin, count, out.raw() + r * count);
  return tape.record(std::move(out), std::move(label), tape.requires_grad(x),
                     [x, begin, count, rows, width](Tape<T>& t, const Tensor<T>& g) {
                       auto& gx = t.grad_buffer(x);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t k = 0; k < count; ++k) gx[r * width + begin + k] += g[r * count + k];
                     });
}

template <typename T>
Var concat_cols(Tape<T>& tape, Var a, Var b, std::string label = "concat_cols") {
  const auto& va = tape.value(a);
  const auto& vb = tape.value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(0) != vb.dim(0)) {
    throw ShapeError("concat_cols: incompatible " + dims_string(va.dims()) + " and " +
                     dims_string(vb.dims()));
  }
  const std::size_t rows = va.dim(0), wa = va.dim(1), wb = vb.dim(1);
  Tensor<T> out({rows, wa + wb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(va.raw() + r * wa, wa, out.raw() + r * (wa + wb));
    std::copy_n(vb.raw() + r * wb, wb, out.raw() + r * (wa + wb) + wa);
  }
  return tape.record(std::move(out), std::move(label), tape.any_requires_grad({a, b}),
                     [a, b, rows, wa, wb](Tape<T>& t, const Tensor<T>& g) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (t.requires_grad(a)) {
                           auto& ga = t.grad_buffer(a);
                           for (std::size_t k = 0; k < wa; ++k) ga[r * wa + k] += g[r * (wa + wb) + k];
                         }
                         if (t.requires_grad(b)) {
                           auto& gb = t.grad_buffer(b);
                           for (std::size_t k = 0; k < wb; ++k) gb[r * wb + k] += g[r * (wa + wb) + wa + k];
                         }
                       }
                     });
}

/// LSTM step on a packed state [B x 2H] = (h | c); returns the packed next state.
template <typename T>
Var lstm_step(Tape<T>& tape, Var x, Var state, ops::RecurrentCellParams<T>& params,
              std::string label = "lstm") {
  const auto& s = tape.value(state);
  const std::size_t hid = params.hidden();
  if (s.rank() != 2 || s.dim(1) != 2 * hid) {
    throw ShapeError("lstm_step: packed state must be [B x " + std::to_string(2 * hid) + "], got " +
                     dims_string(s.dims()));
  }
  const std::size_t rows = s.dim(0);
  Tensor<T> h({rows, hid}), c({rows, hid});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(s.raw() + r * 2 * hid, hid, h.raw() + r * hid);
    std::copy_n(s.raw() + r * 2 * hid + hid, hid, c.raw() + r * hid);
  }
  ops::LstmCache<T> cache;
  auto [hn, cn] = ops::lstm_step(tape.value(x), h, c, params, &cache);
  Tensor<T> packed({rows, 2 * hid});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(hn.raw() + r * hid, hid, packed.raw() + r * 2 * hid);
    std::copy_n(cn.raw() + r * hid, hid, packed.raw() + r * 2 * hid + hid);
  }
  const bool need = tape.param_grads() || tape.any_requires_grad({x, state});
  return tape.record(
      std::move(packed), std::move(label), need,
      [x, state, &params, cache = std::move(cache), rows, hid](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T> gh({rows, hid}), gc({rows, hid});
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(g.raw() + r * 2 * hid, hid, gh.raw() + r * hid);
          std::copy_n(g.raw() + r * 2 * hid + hid, hid, gc.raw() + r * hid);
        }
        Tensor<T>* gx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
        Tensor<T> gh_prev({rows, hid}), gc_prev({rows, hid});
        const bool want_state = t.requires_grad(state);
        auto run = [&](ops::RecurrentCellParams<T>& p) {
          ops::lstm_step_backward(cache, p, &gh, &gc, gx, want_state ? &gh_prev : nullptr,
                                  want_state ? &gc_prev : nullptr);
        };
        if (t.param_grads()) {
          run(params);
        } else {
          auto shadow = params;
          run(shadow);
        }
        if (want_state) {
          auto& gs = t.grad_buffer(state);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < hid; ++k) {
              gs[r * 2 * hid + k] += gh_prev[r * hid + k];
              gs[r * 2 * hid + hid + k] += gc_prev[r * hid + k];
            }
          }
        }
      });
}

template <typename T>
Var gru_step(Tape<T>& tape, Var x, Var h, ops::RecurrentCellParams<T>& params,
             std::string label = "gru") {
  ops::GruCache<T> cache;
  Tensor<T> hn = ops::gru_step(tape.value(x), tape.value(h), params, &cache);
  const bool need = tape.param_grads() || tape.any_requires_grad({x, h});
  return tape.record(std::move(hn), std::move(label), need,
                     [x, h, &params, cache = std::move(cache)](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>* gx = t.requires_grad(x) ? &t.grad_buffer(x) : nullptr;
                       Tensor<T>* gh = t.requires_grad(h) ? &t.grad_buffer(h) : nullptr;
                       if (t.param_grads()) {
                         ops::gru_step_backward(cache, params, g, gx, gh);
                       } else {
                         auto shadow = params;
                         ops::gru_step_backward(cache, shadow, g, gx, gh);
                       }
                     });
}

/// sum((pred - target)^2) as a scalar.
template <typename T>
Var sum_squared_error(Tape<T>& tape, Var pred, const Tensor<T>& target, std::string label = "loss") {
  const auto& p = tape.value(pred);
  if (p.size() != target.size()) {
    throw ShapeError("sum_squared_error: prediction " + dims_string(p.dims()) + " vs target " +
                     dims_string(target.dims()));
  }
  Accum<T> sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Accum<T> d = static_cast<Accum<T>>(p[i]) - static_cast<Accum<T>>(target[i]);
    sum += d * d;
  }
  return tape.record(Tensor<T>({1}, static_cast<T>(sum)), std::move(label), tape.requires_grad(pred),
                     [pred, target](Tape<T>& t, const Tensor<T>& g) {
                       auto& gp = t.grad_buffer(pred);
                       const auto& pv = t.value(pred);
                       for (std::size_t i = 0; i < pv.size(); ++i) gp[i] += g[0] * T(2) * (pv[i] - target[i]);
                     });
}

/// sum(weights * x) as a scalar; a generic probe for gradient checks.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var x, const Tensor<T>& weights, std::string label = "weighted_sum") {
  const auto& v = tape.value(x);
  if (v.size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  T sum = 0;
  for (std::size_t i = 0; i < v.size(); ++i) sum += v[i] * weights[i];
  return tape.record(Tensor<T>({1}, sum), std::move(label), tape.requires_grad(x),
                     [x, weights](Tape<T>& t, const Tensor<T>& g) {
                       auto& gx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < weights.size(); ++i) gx[i] += g[0] * weights[i];
                     });
}

}  // namespace ag
}  // namespace speechface
