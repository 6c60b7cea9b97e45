// SPDX-License-Identifier: Apache-2.0
/**
 * @file   trainer.hpp
 * @brief  Squared-error objective, Adam, sequence-aware minibatching with
 *         truncated backpropagation through time, the training loop and the
 *         grouped evaluation report.
 */
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "speechface/audio.hpp"
#include "speechface/autograd.hpp"
#include "speechface/binary_io.hpp"
#include "speechface/errors.hpp"
#include "speechface/face3d.hpp"
#include "speechface/net.hpp"
#include "speechface/random.hpp"

namespace speechface::train {

struct TrainConfig {
  net::Variant variant = net::Variant::cnn_gru;
  double learning_rate = 1e-4;
  std::size_t minibatch_frames = 300;
  std::size_t epoch_frames = 150000;
  std::size_t epochs = 300;
  std::size_t bptt_len = 32;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (minibatch_frames == 0 || epoch_frames == 0 || epochs == 0 || bptt_len == 0) {
      throw InvalidConfiguration("minibatch, epoch size, epochs and bptt length must all be positive");
    }
    if (!(learning_rate > 0)) throw InvalidConfiguration("learning rate must be positive");
  }
};

// ---------------------------------------------------------------------------
// dataset

inline constexpr std::uint8_t kNoLabel = 255;
inline constexpr std::size_t kSpectrogramSize = audio::kBands * audio::kTimeFrames;

struct Sample {
  std::uint32_t sequence_id = 0;
  std::uint32_t frame_index = 0;
  std::vector<float> spectrogram = std::vector<float>(kSpectrogramSize, 0.0f);  // normalized, band-major
  std::array<float, face3d::kParamCount> target{};
  std::uint8_t emotion = kNoLabel;  // 1..8
  std::uint8_t actor = kNoLabel;
};

struct Dataset {
  std::vector<Sample> samples;

  /// Sample indices per sequence id, ordered by frame index.
  std::map<std::uint32_t, std::vector<std::size_t>> sequences() const {
    std::map<std::uint32_t, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < samples.size(); ++i) out[samples[i].sequence_id].push_back(i);
    for (auto& [id, idx] : out) {
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return samples[a].frame_index < samples[b].frame_index;
      });
    }
    return out;
  }

  void validate() const {
    if (samples.empty()) throw InvalidInput("dataset is empty");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.spectrogram.size() != kSpectrogramSize) throw InvalidInput("record " + std::to_string(i) + ": bad spectrogram size");
      for (std::size_t k = 0; k < face3d::kParamCount; ++k) {
        const float v = s.target[k];
        const bool ok = k < face3d::kRotationParams ? (v >= -1.0f && v <= 1.0f) : (v >= 0.0f && v <= 1.0f);
        if (!ok) {
          throw InvalidInput("record " + std::to_string(i) + ": target component " + std::to_string(k + 1) +
                             " out of range (" + std::to_string(v) + ")");
        }
      }
    }
    for (const auto& [id, idx] : sequences()) {
      for (std::size_t k = 1; k < idx.size(); ++k) {
        if (samples[idx[k]].frame_index != samples[idx[k - 1]].frame_index + 1) {
          throw InvalidInput("sequence " + std::to_string(id) + ": frame indices are not consecutive");
        }
      }
    }
  }
};

inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  io::Writer w;
  w.bytes("SFDS");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(d.samples.size()));
  for (const auto& s : d.samples) {
    w.u32(s.sequence_id);
    w.u32(s.frame_index);
    for (float v : s.spectrogram) w.f32(v);
    for (float v : s.target) w.f32(v);
    w.u8(s.emotion);
    w.u8(s.actor);
  }
  return w.buffer();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  if (r.bytes(4, "magic") != "SFDS") throw LoadError("magic", "not a dataset file");
  if (const auto v = r.u32("version"); v != kDatasetVersion) {
    throw LoadError("version", "unsupported dataset version " + std::to_string(v));
  }
  const std::uint32_t count = r.u32("sample_count");
  Dataset d;
  d.samples.resize(count);
  for (auto& s : d.samples) {
    s.sequence_id = r.u32("sequence_id");
    s.frame_index = r.u32("frame_index");
    r.f32_array(s.spectrogram, "spectrogram");
    r.f32_array(s.target, "target");
    s.emotion = r.u8("emotion");
    s.actor = r.u8("actor");
  }
  if (!r.at_end()) throw LoadError("sample_count", "trailing bytes after last record");
  return d;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  io::write_file(path, encode_dataset(d));
}

inline Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

/// Normalization statistics stored next to a dataset: "SFNS", version,
/// 128 f32 means, 128 f32 stds.
inline void save_norm_stats(const std::filesystem::path& path, const audio::NormStats& s) {
  io::Writer w;
  w.bytes("SFNS");
  w.u32(1);
  for (float v : s.mean) w.f32(v);
  for (float v : s.std) w.f32(v);
  w.save(path);
}

inline audio::NormStats load_norm_stats(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes);
  if (r.bytes(4, "magic") != "SFNS") throw LoadError("magic", "not a normalization stats file");
  if (r.u32("version") != 1) throw LoadError("version", "unsupported stats version");
  audio::NormStats s;
  r.f32_array(s.mean, "mean");
  r.f32_array(s.std, "std");
  if (!s.valid()) throw LoadError("std", "non-positive standard deviation");
  return s;
}

inline std::filesystem::path norm_stats_path(const std::filesystem::path& dataset) {
  auto p = dataset;
  p += ".stats";
  return p;
}

// ---------------------------------------------------------------------------
// objective

/// E = sum_t ||y_t - target_t||^2 over all 49 components.
inline double loss(std::span<const face3d::FaceFrame> pred, std::span<const face3d::FaceFrame> target) {
  if (pred.size() != target.size()) {
    throw InvalidInput("loss: " + std::to_string(pred.size()) + " predictions vs " +
                       std::to_string(target.size()) + " targets");
  }
  double e = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    for (std::size_t k = 0; k < face3d::kParamCount; ++k) {
      const double d = pred[t].param(k) - target[t].param(k);
      e += d * d;
    }
  }
  return e;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

struct AdamHyper {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam update using each parameter's accumulated gradient.
template <typename T>
void adam_step(std::span<ParamTensor<T>* const> params, AdamState<T>& state, const AdamHyper& h) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->value.size(), T(0));
      state.v.emplace_back(p->value.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter list changed between steps");
  ++state.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.value.size() || p.grad.size() != p.value.size()) {
      throw ShapeError("adam_step: state dims do not match parameter " + p.name);
    }
    for (std::size_t k = 0; k < m.size(); ++k) {
      const T g = p.grad[k];
      m[k] = b1 * m[k] + (T(1) - b1) * g;
      v[k] = b2 * v[k] + (T(1) - b2) * g * g;
      const double mhat = static_cast<double>(m[k]) / c1;
      const double vhat = static_cast<double>(v[k]) / c2;
      p.value[k] -= static_cast<T>(h.learning_rate * mhat / (std::sqrt(vhat) + h.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// batching

/// Sample indices laid out subsequence-major with non-increasing lengths.
struct Batch {
  std::vector<std::size_t> samples;
  net::SequenceLayout layout;

  std::size_t frames() const { return samples.size(); }
};

inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return seed ^ (0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(epoch) + 1));
}

/**
 * cnn_static: individual frames, shuffled. Recurrent variants: every
 * sequence is tiled into bptt_len-long contiguous subsequences (the last one
 * may be shorter) and those are shuffled; each subsequence starts from zero
 * state. Units are drawn without replacement until epoch_frames is reached,
 * reshuffling and cycling when the dataset is smaller, and packed into
 * batches of at most minibatch_frames (at least one unit).
 */
inline std::vector<Batch> make_batches(const Dataset& data, const TrainConfig& cfg, std::uint64_t seed) {
  if (data.samples.empty()) throw InvalidInput("make_batches: empty dataset");
  cfg.validate();
  std::vector<std::vector<std::size_t>> units;
  if (net::is_recurrent(cfg.variant)) {
    for (const auto& [id, idx] : data.sequences()) {
      for (std::size_t b = 0; b < idx.size(); b += cfg.bptt_len) {
        units.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b),
                           idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + cfg.bptt_len)));
      }
    }
  } else {
    for (std::size_t i = 0; i < data.samples.size(); ++i) units.push_back({i});
  }

  Rng rng(seed);
  std::vector<std::size_t> order;
  std::vector<std::size_t> drawn;
  std::size_t total = 0;
  while (total < cfg.epoch_frames) {
    if (order.empty()) {
      order.resize(units.size());
      for (std::size_t i = 0; i < units.size(); ++i) order[i] = units.size() - 1 - i;
      rng.shuffle(order);
    }
    drawn.push_back(order.back());
    order.pop_back();
    total += units[drawn.back()].size();
  }

  std::vector<Batch> batches;
  std::vector<std::size_t> pending;
  std::size_t pending_frames = 0;
  auto flush = [&] {
    if (pending.empty()) return;
    std::stable_sort(pending.begin(), pending.end(),
                     [&](std::size_t a, std::size_t b) { return units[a].size() > units[b].size(); });
    Batch b;
    for (auto u : pending) {
      b.samples.insert(b.samples.end(), units[u].begin(), units[u].end());
      b.layout.lengths.push_back(units[u].size());
    }
    batches.push_back(std::move(b));
    pending.clear();
    pending_frames = 0;
  };
  for (auto u : drawn) {
    if (!pending.empty() && pending_frames + units[u].size() > cfg.minibatch_frames) flush();
    pending.push_back(u);
    pending_frames += units[u].size();
  }
  flush();

  // Batch norm needs two frames; fold a trailing single frame into its predecessor.
  if (batches.size() > 1 && batches.back().frames() < 2) {
    Batch last = std::move(batches.back());
    batches.pop_back();
    auto& prev = batches.back();
    prev.samples.insert(prev.samples.end(), last.samples.begin(), last.samples.end());
    prev.layout.lengths.insert(prev.layout.lengths.end(), last.layout.lengths.begin(), last.layout.lengths.end());
  }
  return batches;
}

// ---------------------------------------------------------------------------
// training

struct TrainResult {
  std::unique_ptr<net::Model<float>> model;
  /// Mean minibatch loss per epoch; the last entry is the reported
  /// training error.
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

struct StepOutcome {
  double loss = 0;
};

/// One forward / backward / Adam update on a batch. Returns the batch loss.
template <typename T>
double train_step(net::Model<T>& model, const Dataset& data, const Batch& batch, AdamState<T>& adam,
                  const AdamHyper& hyper) {
  const std::size_t n = batch.frames();
  Tensor<T> input({n, 1, audio::kBands, audio::kTimeFrames});
  Tensor<T> target({n, face3d::kParamCount});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = data.samples[batch.samples[i]];
    std::copy(s.spectrogram.begin(), s.spectrogram.end(), input.raw() + i * kSpectrogramSize);
    std::copy(s.target.begin(), s.target.end(), target.raw() + i * face3d::kParamCount);
  }
  Tape<T> tape(true);
  const Var x = tape.input(std::move(input));
  const Var out = net::forward_graph(tape, model, x, batch.layout, net::Mode::train);
  const Var l = ag::sum_squared_error(tape, out, target);
  const double value = static_cast<double>(tape.value(l)[0]);
  if (!std::isfinite(value)) {
    const auto where = tape.first_non_finite();
    throw TrainingError("non-finite loss; first non-finite activation in layer '" + where.value_or("loss") + "'");
  }
  model.zero_grad();
  tape.backward(l);
  auto params = model.parameters();
  adam_step<T>(params, adam, hyper);
  return value;
}

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

inline TrainResult train(const TrainConfig& cfg, const Dataset& data, const audio::NormStats& stats,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  data.validate();
  TrainResult result;
  result.model = net::build_model<float>(cfg.variant, cfg.seed);
  result.model->norm_stats = stats;
  AdamState<float> adam;
  const AdamHyper hyper{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_batches(data, cfg, epoch_seed(cfg.seed, epoch));
    double sum = 0;
    for (const auto& b : batches) {
      try {
        sum += train_step(*result.model, data, b, adam, hyper);
      } catch (const TrainingError& e) {
        throw TrainingError("epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(result.steps + 1) +
                            ": " + e.what());
      }
      ++result.steps;
    }
    const double mean = sum / static_cast<double>(batches.size());
    result.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  return result;
}

// ---------------------------------------------------------------------------
// evaluation

inline constexpr std::array<const char*, 8> kEmotionNames{"neutral", "calm",    "happy",   "sad",
                                                          "angry",   "fearful", "disgust", "surprised"};

struct EvalOptions {
  bool landmarks = true;
  bool weights = true;
};

struct FrameLabel {
  std::uint8_t emotion = kNoLabel;
  std::uint8_t actor = kNoLabel;
};

/// One metric broken down like the published tables: overall mean plus
/// per-emotion and per-actor cells.
struct MetricTable {
  double mean = 0;
  std::map<int, double> emotion;  // 1..8
  std::map<int, double> actor;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mean"] = mean;
    nlohmann::json em = nlohmann::json::object();
    for (std::size_t k = 0; k < kEmotionNames.size(); ++k) {
      auto it = emotion.find(static_cast<int>(k + 1));
      em[kEmotionNames[k]] = it == emotion.end() ? nlohmann::json(nullptr) : nlohmann::json(it->second);
    }
    j["emotion"] = em;
    nlohmann::json ac = nlohmann::json::object();
    for (const auto& [a, v] : actor) {
      char name[16];
      std::snprintf(name, sizeof name, "actor%02d", a);
      ac[name] = v;
    }
    j["actor"] = ac;
    return j;
  }
};

struct EvalReport {
  std::size_t frames = 0;
  std::optional<MetricTable> landmark_rmse_mm;
  std::optional<MetricTable> weights_mse;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["frames"] = frames;
    if (landmark_rmse_mm) j["landmark_rmse_mm"] = landmark_rmse_mm->to_json();
    if (weights_mse) j["weights_mse"] = weights_mse->to_json();
    return j;
  }
};

/// Metrics over aligned predicted / ground-truth frames. `labels` may be
/// empty (Mean column only) or one entry per frame.
inline EvalReport evaluate_frames(std::span<const face3d::FaceFrame> pred, std::span<const face3d::FaceFrame> truth,
                                  std::span<const FrameLabel> labels, const face3d::BlendshapeRig* rig,
                                  const EvalOptions& opt = {}) {
  if (pred.size() != truth.size()) {
    throw InvalidInput("evaluate: " + std::to_string(pred.size()) + " predicted frames vs " +
                       std::to_string(truth.size()) + " ground-truth frames");
  }
  if (pred.empty()) throw InvalidInput("evaluate: no frames");
  if (!labels.empty() && labels.size() != pred.size()) throw InvalidInput("evaluate: label count mismatch");
  if (opt.landmarks && !rig) throw InvalidConfiguration("landmark metric requested but no rig was provided");
  if (opt.landmarks && rig->landmarks.empty()) throw InvalidConfiguration("rig defines no landmarks");

  using Acc = face3d::SquaredErrorSum;
  auto table = [&](auto&& per_frame, bool root) {
    Acc all;
    std::map<int, Acc> em, ac;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const Acc a = per_frame(pred[i], truth[i]);
      all += a;
      if (!labels.empty()) {
        if (labels[i].emotion != kNoLabel) em[labels[i].emotion] += a;
        if (labels[i].actor != kNoLabel) ac[labels[i].actor] += a;
      }
    }
    auto finish = [root](const Acc& a) {
      const double m = a.sum / static_cast<double>(a.count);
      return root ? std::sqrt(m) : m;
    };
    MetricTable t;
    t.mean = finish(all);
    for (const auto& [k, a] : em) t.emotion[k] = finish(a);
    for (const auto& [k, a] : ac) t.actor[k] = finish(a);
    return t;
  };

  EvalReport report;
  report.frames = pred.size();
  if (opt.landmarks) {
    report.landmark_rmse_mm = table(
        [&](const face3d::FaceFrame& p, const face3d::FaceFrame& t) { return face3d::landmark_squared_error(*rig, p, t); },
        true);
  }
  if (opt.weights) report.weights_mse = table(face3d::weights_squared_error, false);
  return report;
}

inline face3d::FaceFrame target_frame(const Sample& s) {
  face3d::FaceFrame f;
  f.frame_index = s.frame_index;
  for (std::size_t k = 0; k < face3d::kParamCount; ++k) f.set_param(k, s.target[k]);
  return f;
}

/// Runs the model over every sequence of `data` from zero state and scores
/// it against the stored targets.
template <typename T>
EvalReport evaluate(const net::Model<T>& model, const Dataset& data, const face3d::BlendshapeRig* rig,
                    const EvalOptions& opt = {}) {
  if (opt.landmarks && !rig) throw InvalidConfiguration("landmark metric requested but no rig was provided");
  std::vector<face3d::FaceFrame> pred, truth;
  std::vector<FrameLabel> labels;
  for (const auto& [id, idx] : data.sequences()) {
    std::vector<audio::Spectrogram> specs(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& s = data.samples[idx[i]];
      specs[i].bands = s.spectrogram;
      specs[i].frame_index = s.frame_index;
      truth.push_back(target_frame(s));
      labels.push_back({s.emotion, s.actor});
    }
    auto frames = net::forward_sequence(model, std::span<const audio::Spectrogram>(specs), model.initial_state());
    pred.insert(pred.end(), frames.begin(), frames.end());
  }
  return evaluate_frames(pred, truth, labels, rig, opt);
}

}  // namespace speechface::train
