// SPDX-License-Identifier: Apache-2.0
/**
 * @file   net.hpp
 * @brief  Spectrogram-to-face-parameter network in three variants.
 *
 * Layer stack (per frame, channels x frequency x time):
 *
 *   input 1x128x32
 *   conv1 (3,1)/(2,1) -> 64x64x32    pool1 (2,1) -> 64x32x32
 *   conv2 (3,1)/(2,1) -> 96x16x32    pool2 (2,1) -> 96x8x32
 *   conv3 (3,1)/(2,1) -> 128x4x32
 *   conv4 (3,1)/(2,1) -> 160x2x32
 *   conv5 (2,1)/(2,1) -> 256x1x32    pool5 (1,2) -> 256x1x16
 *   conv6 (1,3)/(1,2) -> 256x1x8
 *   conv7 (1,3)/(1,2) -> 256x1x4
 *   conv8 (1,4)/(1,4) -> 256x1x1
 *   dense1 256 tanh -> [LSTM | GRU 256] -> dense2 256 tanh
 *   heads: rotation 3 (tanh), expression 46 (sigmoid)
 *
 * conv1..conv7 are conv -> batch norm -> ReLU and carry no bias (the batch
 * norm shift subsumes it); conv8 is conv + bias -> ReLU.
 */
#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "speechface/audio.hpp"
#include "speechface/autograd.hpp"
#include "speechface/errors.hpp"
#include "speechface/face3d.hpp"
#include "speechface/ops.hpp"
#include "speechface/random.hpp"
#include "speechface/tensor.hpp"

namespace speechface::net {

enum class Variant : std::uint8_t { cnn_static = 0, cnn_lstm = 1, cnn_gru = 2 };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::cnn_static: return "cnn_static";
    case Variant::cnn_lstm: return "cnn_lstm";
    case Variant::cnn_gru: return "cnn_gru";
  }
  return "?";
}

/// Accepts "cnn_static", "cnn-static", "CNN-static" and the like.
inline Variant parse_variant(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(ch == '-' ? '_' : std::tolower(static_cast<unsigned char>(ch)));
  if (s == "cnn_static") return Variant::cnn_static;
  if (s == "cnn_lstm") return Variant::cnn_lstm;
  if (s == "cnn_gru") return Variant::cnn_gru;
  throw InvalidInput("unknown model variant '" + s + "' (expected cnn-static, cnn-lstm or cnn-gru)");
}

inline bool is_recurrent(Variant v) { return v != Variant::cnn_static; }

enum class Mode { train, infer };

inline constexpr std::size_t kConvCount = 8;
inline constexpr std::size_t kOutputWidth = face3d::kParamCount;

/// Layer widths. The spatial structure is fixed by the 128x32 input; the
/// widths can be shrunk for gradient checking.
struct Architecture {
  std::array<std::size_t, kConvCount> conv_channels{64, 96, 128, 160, 256, 256, 256, 256};
  std::size_t dense1 = 256;
  std::size_t recurrent = 256;
  std::size_t dense2 = 256;

  static Architecture tiny() { return {{2, 3, 2, 3, 2, 3, 2, 3}, 4, 3, 4}; }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct ConvStage {
  const char* name;
  ops::Conv2dGeometry geometry;
  bool batch_norm;
  std::optional<ops::PoolWindow> pool_after;
  const char* pool_name;
};

inline constexpr std::array<ConvStage, kConvCount> kConvStages{{
    {"conv1", {3, 1, 2, 1, 1, 0}, true, ops::PoolWindow{2, 1, 2, 1}, "pool1"},
    {"conv2", {3, 1, 2, 1, 1, 0}, true, ops::PoolWindow{2, 1, 2, 1}, "pool2"},
    {"conv3", {3, 1, 2, 1, 1, 0}, true, std::nullopt, ""},
    {"conv4", {3, 1, 2, 1, 1, 0}, true, std::nullopt, ""},
    {"conv5", {2, 1, 2, 1, 0, 0}, true, ops::PoolWindow{1, 2, 1, 2}, "pool5"},
    {"conv6", {1, 3, 1, 2, 0, 1}, true, std::nullopt, ""},
    {"conv7", {1, 3, 1, 2, 0, 1}, true, std::nullopt, ""},
    {"conv8", {1, 4, 1, 4, 0, 0}, false, std::nullopt, ""},
}};

template <typename T>
struct ConvBlock {
  ParamTensor<T> weight;
  std::optional<ParamTensor<T>> bias;
  std::optional<ops::BatchNormState<T>> bn;
};

/// Recurrent state of one stream. `c` is empty except for LSTM.
template <typename T>
struct RecurrentState {
  Tensor<T> h;
  Tensor<T> c;
};

/// Name, dims and mutable storage of every persisted tensor.
template <typename T>
struct TensorSlot {
  std::string name;
  Dims dims;
  std::span<T> data;
};

template <typename T>
class Model {
 public:
  Variant variant = Variant::cnn_static;
  Architecture arch;
  audio::NormStats norm_stats;

  std::array<ConvBlock<T>, kConvCount> convs;
  ParamTensor<T> dense1_weight, dense1_bias;
  std::optional<ops::RecurrentCellParams<T>> rnn;
  ParamTensor<T> dense2_weight, dense2_bias;
  ParamTensor<T> rotation_weight, rotation_bias;
  ParamTensor<T> expression_weight, expression_bias;

  /// Allocates every tensor with zero values (batch norm gamma 1, running
  /// variance 1).
  Model(Variant v, const Architecture& a) : variant(v), arch(a) {
    std::size_t in_ch = 1;
    for (std::size_t i = 0; i < kConvCount; ++i) {
      const auto& st = kConvStages[i];
      const std::size_t out_ch = arch.conv_channels[i];
      const std::string n = st.name;
      convs[i].weight = ParamTensor<T>(n + ".weight",
                                       Tensor<T>({out_ch, in_ch, st.geometry.kernel_f, st.geometry.kernel_t}));
      if (st.batch_norm) {
        convs[i].bn.emplace(n + ".bn", out_ch);
      } else {
        convs[i].bias.emplace(n + ".bias", Tensor<T>({out_ch}));
      }
      in_ch = out_ch;
    }
    const std::size_t c8 = arch.conv_channels.back();
    dense1_weight = ParamTensor<T>("dense1.weight", Tensor<T>({arch.dense1, c8}));
    dense1_bias = ParamTensor<T>("dense1.bias", Tensor<T>({arch.dense1}));
    std::size_t d2_in = arch.dense1;
    if (is_recurrent(variant)) {
      const std::size_t gates = variant == Variant::cnn_lstm ? 4 : 3;
      const std::size_t h = arch.recurrent;
      rnn.emplace(ops::RecurrentCellParams<T>{
          ParamTensor<T>("rnn.weight_ih", Tensor<T>({gates * h, arch.dense1})),
          ParamTensor<T>("rnn.weight_hh", Tensor<T>({gates * h, h})),
          ParamTensor<T>("rnn.bias", Tensor<T>({gates * h}))});
      d2_in = h;
    }
    dense2_weight = ParamTensor<T>("dense2.weight", Tensor<T>({arch.dense2, d2_in}));
    dense2_bias = ParamTensor<T>("dense2.bias", Tensor<T>({arch.dense2}));
    rotation_weight = ParamTensor<T>("head_rotation.weight", Tensor<T>({face3d::kRotationParams, arch.dense2}));
    rotation_bias = ParamTensor<T>("head_rotation.bias", Tensor<T>({face3d::kRotationParams}));
    expression_weight =
        ParamTensor<T>("head_expression.weight", Tensor<T>({face3d::kExpressionCount, arch.dense2}));
    expression_bias = ParamTensor<T>("head_expression.bias", Tensor<T>({face3d::kExpressionCount}));
  }

  // Tape closures hold references into the model.
  Model(Model&&) = delete;
  Model& operator=(Model&&) = delete;
  Model(const Model&) = default;

  bool recurrent() const { return rnn.has_value(); }
  std::size_t state_width() const {
    return !rnn ? 0 : (variant == Variant::cnn_lstm ? 2 * arch.recurrent : arch.recurrent);
  }

  /// Trainable parameters in a fixed order.
  std::vector<ParamTensor<T>*> parameters() {
    std::vector<ParamTensor<T>*> out;
    for (auto& c : convs) {
      out.push_back(&c.weight);
      if (c.bias) out.push_back(&*c.bias);
      if (c.bn) {
        out.push_back(&c.bn->gamma);
        out.push_back(&c.bn->beta);
      }
    }
    out.push_back(&dense1_weight);
    out.push_back(&dense1_bias);
    if (rnn) {
      out.push_back(&rnn->weight_ih);
      out.push_back(&rnn->weight_hh);
      out.push_back(&rnn->bias);
    }
    for (auto* p : {&dense2_weight, &dense2_bias, &rotation_weight, &rotation_bias, &expression_weight,
                    &expression_bias})
      out.push_back(p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto* p : const_cast<Model*>(this)->parameters()) n += p->value.size();
    return n;
  }

  /// Every persisted tensor: parameters plus batch norm running statistics.
  std::vector<TensorSlot<T>> tensors() {
    std::vector<TensorSlot<T>> out;
    auto add = [&](ParamTensor<T>& p) { out.push_back({p.name, p.value.dims(), p.value.data()}); };
    for (std::size_t i = 0; i < kConvCount; ++i) {
      auto& c = convs[i];
      add(c.weight);
      if (c.bias) add(*c.bias);
      if (c.bn) {
        const std::string n = std::string(kConvStages[i].name) + ".bn";
        add(c.bn->gamma);
        add(c.bn->beta);
        out.push_back({n + ".running_mean", {c.bn->channels()}, c.bn->running_mean});
        out.push_back({n + ".running_var", {c.bn->channels()}, c.bn->running_var});
      }
    }
    add(dense1_weight);
    add(dense1_bias);
    if (rnn) {
      add(rnn->weight_ih);
      add(rnn->weight_hh);
      add(rnn->bias);
    }
    for (auto* p : {&dense2_weight, &dense2_bias, &rotation_weight, &rotation_bias, &expression_weight,
                    &expression_bias})
      add(*p);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  RecurrentState<T> initial_state() const {
    RecurrentState<T> s;
    if (rnn) {
      s.h = Tensor<T>({arch.recurrent});
      if (variant == Variant::cnn_lstm) s.c = Tensor<T>({arch.recurrent});
    }
    return s;
  }
};

namespace detail {

template <typename T>
void glorot_uniform(std::span<T> w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
}

}  // namespace detail

/**
 * Builds a model with deterministic initialization from `seed`: uniform
 * Glorot for every weight matrix (per gate block for recurrent weights),
 * zero biases, LSTM forget-gate bias 1.
 */
template <typename T = float>
void initialize(Model<T>& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& c : m.convs) {
    const auto& d = c.weight.value.dims();
    const std::size_t k = d[2] * d[3];
    detail::glorot_uniform(c.weight.value.data(), d[1] * k, d[0] * k, rng);
  }
  detail::glorot_uniform(m.dense1_weight.value.data(), m.dense1_weight.value.dim(1),
                         m.dense1_weight.value.dim(0), rng);
  if (m.rnn) {
    const std::size_t h = m.arch.recurrent;
    const std::size_t gates = m.rnn->gates();
    const std::size_t in = m.rnn->input();
    for (std::size_t g = 0; g < gates; ++g) {
      detail::glorot_uniform(m.rnn->weight_ih.value.data().subspan(g * h * in, h * in), in, h, rng);
      detail::glorot_uniform(m.rnn->weight_hh.value.data().subspan(g * h * h, h * h), h, h, rng);
    }
    if (m.variant == Variant::cnn_lstm) {
      for (std::size_t k = 0; k < h; ++k) m.rnn->bias.value[h + k] = T(1);
    }
  }
  for (auto* p : {&m.dense2_weight, &m.rotation_weight, &m.expression_weight}) {
    detail::glorot_uniform(p->value.data(), p->value.dim(1), p->value.dim(0), rng);
  }
}

template <typename T = float>
std::unique_ptr<Model<T>> build_model(Variant variant, std::uint64_t seed,
                                      const Architecture& arch = Architecture{}) {
  auto m = std::make_unique<Model<T>>(variant, arch);
  initialize(*m, seed);
  return m;
}

// ---------------------------------------------------------------------------
// forward

/// Frames of a batch are laid out subsequence-major; lengths must be
/// non-increasing so that the active subsequences at every step form a
/// prefix. Ignored by cnn_static.
struct SequenceLayout {
  std::vector<std::size_t> lengths;

  static SequenceLayout single(std::size_t n) { return {{n}}; }
  std::size_t frames() const {
    std::size_t n = 0;
    for (auto l : lengths) n += l;
    return n;
  }
};

struct LayerTrace {
  std::string name;
  Dims dims;  // per frame (batch axis removed)
};

namespace detail {

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t w = x.dim(1);
  Tensor<T> out({rows.size(), w});
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(x.raw() + rows[r] * w, w, out.raw() + r * w);
  return out;
}

// Executes the stack on plain tensors with no gradient bookkeeping.
template <typename T>
struct PlainExec {
  using Value = Tensor<T>;
  const Tensor<T>& value(const Value& v) const { return v; }
  Value constant(Tensor<T> t) { return t; }
  Value conv(const Value& x, const ParamTensor<T>& w, const ParamTensor<T>* b, const ops::Conv2dGeometry& g,
             const std::string&) {
    return ops::conv2d(x, w.value, b ? b->value.data() : std::span<const T>{}, g);
  }
  Value pool(const Value& x, const ops::PoolWindow& p, const std::string&) {
    return ops::max_pool2d(x, p).output;
  }
  Value bn(const Value& x, const ops::BatchNormState<T>& s, Mode mode, const std::string&) {
    if (mode == Mode::train) throw InvalidConfiguration("training forward requires a gradient tape");
    auto shadow = s;
    return ops::batch_norm(x, shadow, false);
  }
  Value act(const Value& x, ops::Activation k, const std::string&) { return ops::apply_activation(x, k); }
  Value reshape(const Value& x, Dims d, const std::string&) { return x.reshaped(std::move(d)); }
  Value dense(const Value& x, const ParamTensor<T>& w, const ParamTensor<T>* b, const std::string&) {
    return ops::dense(x, w.value, b ? b->value.data() : std::span<const T>{});
  }
  Value gather(const Value& x, std::vector<std::size_t> rows) { return gather_rows(x, rows); }
  Value concat_rows(std::span<const Value> parts) {
    std::size_t rows = 0;
    for (const auto& p : parts) rows += p.dim(0);
    Tensor<T> out({rows, parts[0].dim(1)});
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), out.raw() + off);
      off += p.size();
    }
    return out;
  }
  Value slice_cols(const Value& x, std::size_t begin, std::size_t count) {
    Tensor<T> out({x.dim(0), count});
    for (std::size_t r = 0; r < x.dim(0); ++r)
      std::copy_n(x.raw() + r * x.dim(1) + begin, count, out.raw() + r * count);
    return out;
  }
  Value concat_cols(const Value& a, const Value& b) {
    const std::size_t wa = a.dim(1), wb = b.dim(1);
    Tensor<T> out({a.dim(0), wa + wb});
    for (std::size_t r = 0; r < a.dim(0); ++r) {
      std::copy_n(a.raw() + r * wa, wa, out.raw() + r * (wa + wb));
      std::copy_n(b.raw() + r * wb, wb, out.raw() + r * (wa + wb) + wa);
    }
    return out;
  }
  Value lstm(const Value& x, const Value& state, const ops::RecurrentCellParams<T>& p, const std::string&) {
    const std::size_t h = p.hidden();
    auto hv = slice_cols(state, 0, h);
    auto cv = slice_cols(state, h, h);
    auto [hn, cn] = ops::lstm_step(x, hv, cv, p);
    return concat_cols(hn, cn);
  }
  Value gru(const Value& x, const Value& state, const ops::RecurrentCellParams<T>& p, const std::string&) {
    return ops::gru_step(x, state, p);
  }
};

// Records the stack on a gradient tape.
template <typename T>
struct TapeExec {
  using Value = Var;
  Tape<T>& tape;
  const Tensor<T>& value(Var v) const { return tape.value(v); }
  Var constant(Tensor<T> t) { return tape.input(std::move(t), false, "constant"); }
  Var conv(Var x, ParamTensor<T>& w, ParamTensor<T>* b, const ops::Conv2dGeometry& g, const std::string& n) {
    return ag::conv2d(tape, x, w, b, g, n);
  }
  Var pool(Var x, const ops::PoolWindow& p, const std::string& n) { return ag::max_pool2d(tape, x, p, n); }
  Var bn(Var x, ops::BatchNormState<T>& s, Mode mode, const std::string& n) {
    return ag::batch_norm(tape, x, s, mode == Mode::train, n);
  }
  Var act(Var x, ops::Activation k, const std::string& n) { return ag::activation(tape, x, k, n); }
  Var reshape(Var x, Dims d, const std::string& n) { return ag::reshape(tape, x, std::move(d), n); }
  Var dense(Var x, ParamTensor<T>& w, ParamTensor<T>* b, const std::string& n) {
    return ag::dense(tape, x, w, b, n);
  }
  Var gather(Var x, std::vector<std::size_t> rows) { return ag::gather_rows(tape, x, std::move(rows)); }
  Var concat_rows(std::span<const Var> parts) { return ag::concat_rows<T>(tape, parts); }
  Var slice_cols(Var x, std::size_t begin, std::size_t count) { return ag::slice_cols(tape, x, begin, count); }
  Var concat_cols(Var a, Var b) { return ag::concat_cols(tape, a, b, "output"); }
  Var lstm(Var x, Var state, ops::RecurrentCellParams<T>& p, const std::string& n) {
    return ag::lstm_step(tape, x, state, p, n);
  }
  Var gru(Var x, Var state, ops::RecurrentCellParams<T>& p, const std::string& n) {
    return ag::gru_step(tape, x, state, p, n);
  }
};

template <typename T, typename M, typename Exec>
typename Exec::Value run_stack(M& model, Exec& ex, typename Exec::Value x, const SequenceLayout& layout,
                               Mode mode, const Tensor<T>* initial_state, Tensor<T>* final_state,
                               std::vector<LayerTrace>* trace) {
  using Value = typename Exec::Value;
  const Tensor<T>& in = ex.value(x);
  if (in.rank() != 4 || in.dim(1) != 1 || in.dim(2) != audio::kBands || in.dim(3) != audio::kTimeFrames) {
    throw ShapeError("input: expected [N x 1 x 128 x 32], got " + dims_string(in.dims()));
  }
  const std::size_t n = in.dim(0);
  auto note = [&](const std::string& name, const Value& v) {
    if (!trace) return;
    const auto& d = ex.value(v).dims();
    trace->push_back({name, Dims(d.begin() + 1, d.end())});
  };
  note("input", x);

  Value h = x;
  for (std::size_t i = 0; i < kConvCount; ++i) {
    const auto& st = kConvStages[i];
    auto& blk = model.convs[i];
    const std::string name = st.name;
    try {
      h = ex.conv(h, blk.weight, blk.bias ? &*blk.bias : nullptr, st.geometry, name);
    } catch (const ShapeError& e) {
      throw ShapeError(name + ": " + e.what());
    }
    if (blk.bn) h = ex.bn(h, *blk.bn, mode, name + ".bn");
    h = ex.act(h, ops::Activation::relu, name + ".relu");
    note(name, h);
    if (st.pool_after) {
      h = ex.pool(h, *st.pool_after, st.pool_name);
      note(st.pool_name, h);
    }
  }
  h = ex.reshape(h, {n, model.arch.conv_channels.back()}, "flatten");
  h = ex.act(ex.dense(h, model.dense1_weight, &model.dense1_bias, "dense1"), ops::Activation::tanh,
             "dense1.tanh");
  note("dense1", h);

  if (model.rnn) {
    const auto& lengths = layout.lengths;
    if (lengths.empty() || layout.frames() != n) {
      throw ShapeError("rnn: sequence layout covers " + std::to_string(layout.frames()) + " frames, batch has " +
                       std::to_string(n));
    }
    for (std::size_t s = 1; s < lengths.size(); ++s) {
      if (lengths[s] > lengths[s - 1] || lengths[s] == 0) {
        throw InvalidInput("rnn: subsequence lengths must be positive and non-increasing");
      }
    }
    const std::size_t subseqs = lengths.size();
    const std::size_t width = model.state_width();
    const std::size_t hidden = model.arch.recurrent;
    const bool lstm = model.variant == Variant::cnn_lstm;
    std::vector<std::size_t> offsets(subseqs, 0);
    for (std::size_t s = 1; s < subseqs; ++s) offsets[s] = offsets[s - 1] + lengths[s - 1];

    Value state;
    if (initial_state) {
      if (initial_state->dims() != Dims{subseqs, width}) {
        throw ShapeError("rnn: initial state dims " + dims_string(initial_state->dims()));
      }
      state = ex.constant(*initial_state);
    } else {
      state = ex.constant(Tensor<T>({subseqs, width}));
    }
    if (final_state) *final_state = Tensor<T>({subseqs, width});

    std::vector<Value> steps;
    std::vector<std::size_t> position(n);
    std::size_t produced = 0;
    std::size_t active = subseqs;
    for (std::size_t k = 0; k < lengths[0]; ++k) {
      std::size_t now = 0;
      while (now < subseqs && lengths[now] > k) ++now;
      std::vector<std::size_t> rows(now);
      for (std::size_t s = 0; s < now; ++s) rows[s] = offsets[s] + k;
      Value xk = ex.gather(h, rows);
      if (now != active) {
        std::vector<std::size_t> keep(now);
        for (std::size_t s = 0; s < now; ++s) keep[s] = s;
        state = ex.gather(state, keep);
        active = now;
      }
      const std::string label = "rnn.t" + std::to_string(k);
      state = lstm ? ex.lstm(xk, state, *model.rnn, label) : ex.gru(xk, state, *model.rnn, label);
      steps.push_back(lstm ? ex.slice_cols(state, 0, hidden) : state);
      for (std::size_t s = 0; s < now; ++s) {
        position[offsets[s] + k] = produced++;
        if (final_state && lengths[s] == k + 1) {
          const auto& sv = ex.value(state);
          std::copy_n(sv.raw() + s * width, width, final_state->raw() + s * width);
        }
      }
    }
    Value all = steps.size() == 1 ? steps[0] : ex.concat_rows(std::span<const Value>(steps));
    bool identity = true;
    for (std::size_t i = 0; i < n; ++i) identity = identity && position[i] == i;
    h = identity ? all : ex.gather(all, position);
    note("rnn", h);
  }

  h = ex.act(ex.dense(h, model.dense2_weight, &model.dense2_bias, "dense2"), ops::Activation::tanh,
             "dense2.tanh");
  note("dense2", h);
  Value rot = ex.act(ex.dense(h, model.rotation_weight, &model.rotation_bias, "head_rotation"),
                     ops::Activation::tanh, "head_rotation.tanh");
  Value expr = ex.act(ex.dense(h, model.expression_weight, &model.expression_bias, "head_expression"),
                      ops::Activation::sigmoid, "head_expression.sigmoid");
  Value out = ex.concat_cols(rot, expr);
  note("output", out);
  return out;
}

template <typename T>
Tensor<T> pack_state(const Model<T>& m, std::span<const RecurrentState<T>* const> states) {
  const std::size_t w = m.state_width();
  const std::size_t h = m.arch.recurrent;
  Tensor<T> packed({states.size(), w});
  for (std::size_t s = 0; s < states.size(); ++s) {
    const auto& st = *states[s];
    if (st.h.size() != h || (m.variant == Variant::cnn_lstm && st.c.size() != h)) {
      throw ShapeError("recurrent state dims do not match the model");
    }
    std::copy(st.h.data().begin(), st.h.data().end(), packed.raw() + s * w);
    if (m.variant == Variant::cnn_lstm) std::copy(st.c.data().begin(), st.c.data().end(), packed.raw() + s * w + h);
  }
  return packed;
}

template <typename T>
RecurrentState<T> unpack_state(const Model<T>& m, const Tensor<T>& packed, std::size_t row) {
  RecurrentState<T> st = m.initial_state();
  const std::size_t w = m.state_width();
  const std::size_t h = m.arch.recurrent;
  std::copy_n(packed.raw() + row * w, h, st.h.raw());
  if (m.variant == Variant::cnn_lstm) std::copy_n(packed.raw() + row * w + h, h, st.c.raw());
  return st;
}

}  // namespace detail

/// Stacks normalized spectrograms into an [N x 1 x 128 x 32] input tensor.
template <typename T>
Tensor<T> make_input(std::span<const audio::Spectrogram> specs) {
  if (specs.empty()) throw InvalidInput("empty spectrogram list");
  const std::size_t per = audio::kBands * audio::kTimeFrames;
  Tensor<T> x({specs.size(), 1, audio::kBands, audio::kTimeFrames});
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].bands.size() != per) throw ShapeError("spectrogram must be 128 x 32");
    std::copy(specs[i].bands.begin(), specs[i].bands.end(), x.raw() + i * per);
  }
  return x;
}

template <typename T>
face3d::FaceFrame to_face_frame(const Tensor<T>& out, std::size_t row, std::int64_t frame_index) {
  face3d::FaceFrame f;
  f.frame_index = frame_index;
  for (std::size_t k = 0; k < kOutputWidth; ++k) f.set_param(k, static_cast<double>(out[row * kOutputWidth + k]));
  return f;
}

/// Records a training or inference pass on `tape`, returning the [N x 49]
/// output. `final_state` (optional) receives the packed state at the end
/// of every subsequence.
template <typename T>
Var forward_graph(Tape<T>& tape, Model<T>& model, Var input, const SequenceLayout& layout, Mode mode,
                  const Tensor<T>* initial_state = nullptr, Tensor<T>* final_state = nullptr,
                  std::vector<LayerTrace>* trace = nullptr) {
  detail::TapeExec<T> ex{tape};
  return detail::run_stack<T>(model, ex, input, layout, mode, initial_state, final_state, trace);
}

/// Inference on an [N x 1 x 128 x 32] batch laid out per `layout`.
template <typename T>
Tensor<T> infer_batch(const Model<T>& model, const Tensor<T>& input, const SequenceLayout& layout,
                      const Tensor<T>* initial_state = nullptr, Tensor<T>* final_state = nullptr,
                      std::vector<LayerTrace>* trace = nullptr) {
  detail::PlainExec<T> ex;
  return detail::run_stack<T>(model, ex, input, layout, Mode::infer, initial_state, final_state, trace);
}

/// Single-frame forward. Train mode needs a batch (batch norm) and is
/// rejected here; use forward_graph for training.
template <typename T>
std::pair<face3d::FaceFrame, RecurrentState<T>> forward(const Model<T>& model, const audio::Spectrogram& spec,
                                                        const RecurrentState<T>& state, Mode mode = Mode::infer) {
  if (mode == Mode::train) {
    throw InvalidConfiguration("single-frame forward in train mode: batch norm needs batch size >= 2");
  }
  const auto x = make_input<T>(std::span<const audio::Spectrogram>(&spec, 1));
  RecurrentState<T> next = state;
  if (model.recurrent()) {
    const RecurrentState<T>* ptrs[] = {&state};
    const Tensor<T> packed = detail::pack_state(model, std::span<const RecurrentState<T>* const>(ptrs));
    Tensor<T> final_state;
    const auto out = infer_batch(model, x, SequenceLayout::single(1), &packed, &final_state);
    next = detail::unpack_state(model, final_state, 0);
    return {to_face_frame(out, 0, spec.frame_index), std::move(next)};
  }
  const auto out = infer_batch(model, x, SequenceLayout::single(1));
  return {to_face_frame(out, 0, spec.frame_index), std::move(next)};
}

/// Equivalent to folding forward() over `specs` while carrying the state;
/// the convolutional stack runs on the whole batch at once.
template <typename T>
std::vector<face3d::FaceFrame> forward_sequence(const Model<T>& model, std::span<const audio::Spectrogram> specs,
                                                const RecurrentState<T>& initial,
                                                RecurrentState<T>* final_state = nullptr) {
  if (specs.empty()) throw InvalidInput("forward_sequence: empty sequence");
  const auto x = make_input<T>(specs);
  Tensor<T> out;
  if (model.recurrent()) {
    const RecurrentState<T>* ptrs[] = {&initial};
    const Tensor<T> packed = detail::pack_state(model, std::span<const RecurrentState<T>* const>(ptrs));
    Tensor<T> fin;
    out = infer_batch(model, x, SequenceLayout::single(specs.size()), &packed, &fin);
    if (final_state) *final_state = detail::unpack_state(model, fin, 0);
  } else {
    out = infer_batch(model, x, SequenceLayout::single(specs.size()));
    if (final_state) *final_state = initial;
  }
  std::vector<face3d::FaceFrame> frames;
  frames.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) frames.push_back(to_face_frame(out, i, specs[i].frame_index));
  return frames;
}

}  // namespace speechface::net
