// SPDX-License-Identifier: Apache-2.0
/**
 * @file   corpus.hpp
 * @brief  Turning (audio, ground-truth parameters) pairs into a training
 *         dataset, RAVDESS filename labels, and synthetic fixtures.
 */
#pragma once

#include <algorithm>
#include <array>
#include <climits>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "speechface/audio.hpp"
#include "speechface/errors.hpp"
#include "speechface/face3d.hpp"
#include "speechface/random.hpp"
#include "speechface/trainer.hpp"

namespace speechface::corpus {

struct Labels {
  std::uint8_t emotion = train::kNoLabel;
  std::uint8_t actor = train::kNoLabel;
};

/// "03-01-06-01-02-01-12" -> emotion 6, actor 12. Anything that does not
/// look like a RAVDESS stem yields no labels.
inline Labels parse_ravdess_stem(const std::string& stem) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto dash = stem.find('-', start);
    fields.push_back(stem.substr(start, dash == std::string::npos ? std::string::npos : dash - start));
    if (dash == std::string::npos) break;
    start = dash + 1;
  }
  if (fields.size() != 7) return {};
  for (const auto& f : fields) {
    if (f.empty() || f.size() > 3) return {};
    for (char c : f)
      if (c < '0' || c > '9') return {};
  }
  Labels l;
  const int emotion = std::stoi(fields[2]);
  const int actor = std::stoi(fields[6]);
  if (emotion >= 1 && emotion <= 8) l.emotion = static_cast<std::uint8_t>(emotion);
  if (actor >= 1 && actor < 255) l.actor = static_cast<std::uint8_t>(actor);
  return l;
}

struct Item {
  std::string name;
  audio::AudioClip clip;
  std::vector<face3d::FaceFrame> targets;
  Labels labels;
};

/// Raw (unnormalized) spectrogram of every complete video frame.
inline std::vector<audio::Spectrogram> clip_spectrograms(const audio::AudioClip& clip, double fps,
                                                         std::size_t limit = SIZE_MAX) {
  const std::size_t n = std::min(audio::frame_count(clip.samples.size(), fps), limit);
  std::vector<audio::Spectrogram> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    out[t] = audio::compute_spectrogram(audio::extract_frame_window(clip, t, fps));
    out[t].frame_index = static_cast<std::int64_t>(t);
  }
  return out;
}

/**
 * Computes spectrograms, pairs them with targets (audio and parameter frame
 * counts may differ by one; the longer tail is dropped), fits normalization
 * over the whole corpus and stores normalized inputs.
 */
inline std::pair<train::Dataset, audio::NormStats> build_dataset(const std::vector<Item>& items, double fps) {
  if (items.empty()) throw InvalidInput("no input clips");
  std::vector<std::vector<audio::Spectrogram>> specs;
  std::vector<audio::Spectrogram> all;
  for (const auto& it : items) {
    const std::size_t audio_frames = audio::frame_count(it.clip.samples.size(), fps);
    const std::size_t a = audio_frames, p = it.targets.size();
    if ((a > p ? a - p : p - a) > 1) {
      throw InvalidInput(it.name + ": audio has " + std::to_string(a) + " frames but parameters have " +
                         std::to_string(p));
    }
    const std::size_t n = std::min(a, p);
    if (n == 0) throw InvalidInput(it.name + ": shorter than one video frame");
    specs.push_back(clip_spectrograms(it.clip, fps, n));
    all.insert(all.end(), specs.back().begin(), specs.back().end());
  }
  const auto stats = audio::fit_normalization(all);
  train::Dataset data;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (std::size_t t = 0; t < specs[i].size(); ++t) {
      train::Sample s;
      s.sequence_id = static_cast<std::uint32_t>(i);
      s.frame_index = static_cast<std::uint32_t>(t);
      s.spectrogram = audio::normalize(specs[i][t], stats).bands;
      for (std::size_t k = 0; k < face3d::kParamCount; ++k)
        s.target[k] = static_cast<float>(items[i].targets[t].param(k));
      s.emotion = items[i].labels.emotion;
      s.actor = items[i].labels.actor;
      data.samples.push_back(std::move(s));
    }
  }
  data.validate();
  return {std::move(data), stats};
}

// ---------------------------------------------------------------------------
// synthetic data

/// Speech-like test signal: a few partials with slowly drifting pitch and
/// syllable-rate amplitude envelopes, plus a little noise.
inline std::vector<float> synth_audio(double seconds, std::uint64_t seed) {
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(std::llround(seconds * audio::kSampleRate));
  constexpr int kPartials = 4;
  std::array<double, kPartials> base{}, drift{}, rate{}, phase{};
  for (int k = 0; k < kPartials; ++k) {
    base[k] = rng.uniform(150.0, 4000.0);
    drift[k] = rng.uniform(0.1, 0.4);
    rate[k] = rng.uniform(1.5, 5.0);
    phase[k] = rng.uniform(0.0, 2 * std::numbers::pi);
  }
  std::vector<float> out(n);
  std::array<double, kPartials> acc{};
  const double dt = 1.0 / audio::kSampleRate;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) * dt;
    double v = 0;
    for (int k = 0; k < kPartials; ++k) {
      const double f = base[k] * (1.0 + drift[k] * std::sin(2 * std::numbers::pi * 0.7 * t + phase[k]));
      acc[k] += 2 * std::numbers::pi * f * dt;
      const double env = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * rate[k] * t + phase[k]);
      v += 0.2 * env * std::sin(acc[k]);
    }
    v += 0.01 * (rng.uniform() - 0.5);
    out[i] = static_cast<float>(v);
  }
  return out;
}

/// Smooth random parameter trajectories: rotation in [-0.3,0.3], weights
/// in [0.05,0.95].
inline std::vector<face3d::FaceFrame> synth_targets(std::size_t frames, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<face3d::FaceFrame> out(frames);
  auto curve = [&](double lo, double hi) {
    const double f1 = rng.uniform(0.01, 0.05), f2 = rng.uniform(0.03, 0.1);
    const double p1 = rng.uniform(0.0, 2 * std::numbers::pi), p2 = rng.uniform(0.0, 2 * std::numbers::pi);
    const double a = rng.uniform(0.3, 0.7);
    std::vector<double> v(frames);
    for (std::size_t t = 0; t < frames; ++t) {
      const double s = a * std::sin(2 * std::numbers::pi * f1 * static_cast<double>(t) + p1) +
                       (1 - a) * std::sin(2 * std::numbers::pi * f2 * static_cast<double>(t) + p2);
      v[t] = lo + (hi - lo) * 0.5 * (s + 1.0);
    }
    return v;
  };
  for (std::size_t k = 0; k < face3d::kParamCount; ++k) {
    const auto v = k < face3d::kRotationParams ? curve(-0.3, 0.3) : curve(0.05, 0.95);
    for (std::size_t t = 0; t < frames; ++t) out[t].set_param(k, v[t]);
  }
  for (std::size_t t = 0; t < frames; ++t) out[t].frame_index = static_cast<std::int64_t>(t);
  return out;
}

inline constexpr double kFixtureFps = 30.0;
inline constexpr std::size_t kFixtureFrames = 60;

/// The deterministic 60-frame single-sequence fixture.
inline std::pair<train::Dataset, audio::NormStats> overfit_fixture(std::uint64_t seed = 7) {
  Item it;
  it.name = "fixture";
  it.clip.samples = synth_audio(static_cast<double>(kFixtureFrames) / kFixtureFps, seed);
  it.targets = synth_targets(kFixtureFrames, seed + 1);
  return build_dataset({it}, kFixtureFps);
}

}  // namespace speechface::corpus
