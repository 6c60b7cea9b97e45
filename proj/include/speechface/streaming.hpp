// SPDX-License-Identifier: Apache-2.0
/**
 * @file   streaming.hpp
 * @brief  Incremental inference over pushed audio, one face frame per
 *         video-frame interval.
 */
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "speechface/audio.hpp"
#include "speechface/errors.hpp"
#include "speechface/face3d.hpp"
#include "speechface/net.hpp"

namespace speechface {

template <typename T = float>
class StreamingSession {
 public:
  StreamingSession(const net::Model<T>& model, double fps)
      : model_(model), fps_(fps), state_(model.initial_state()), ring_(audio::kWindowLength, 0.0f) {
    if (!(fps > 0)) throw InvalidInput("fps must be positive");
    if (!model.norm_stats.valid()) throw InvalidConfiguration("model carries invalid normalization statistics");
  }

  /// Appends samples (44.1 kHz mono) and returns the frames whose window
  /// closed inside them.
  std::vector<face3d::FaceFrame> push(std::span<const float> samples) {
    std::vector<face3d::FaceFrame> out;
    for (float s : samples) {
      ring_[head_] = s;
      head_ = (head_ + 1) % ring_.size();
      ++consumed_;
      if (consumed_ == audio::frame_end_sample(frames_emitted_, fps_)) out.push_back(emit());
    }
    return out;
  }

  /// The current analysis window, oldest sample first.
  std::vector<float> window() const {
    std::vector<float> w(ring_.size());
    for (std::size_t i = 0; i < ring_.size(); ++i) w[i] = ring_[(head_ + i) % ring_.size()];
    return w;
  }

  std::size_t frames_emitted() const { return frames_emitted_; }
  std::uint64_t samples_consumed() const { return consumed_; }
  double fps() const { return fps_; }
  const net::RecurrentState<T>& state() const { return state_; }

  void reset() {
    state_ = model_.initial_state();
    std::fill(ring_.begin(), ring_.end(), 0.0f);
    head_ = 0;
    consumed_ = 0;
    frames_emitted_ = 0;
  }

 private:
  face3d::FaceFrame emit() {
    const auto w = window();
    auto spec = audio::normalize(audio::compute_spectrogram(w), model_.norm_stats);
    spec.frame_index = static_cast<std::int64_t>(frames_emitted_);
    auto [frame, next] = net::forward(model_, spec, state_);
    state_ = std::move(next);
    ++frames_emitted_;
    return frame;
  }

  const net::Model<T>& model_;
  double fps_;
  net::RecurrentState<T> state_;
  std::vector<float> ring_;
  std::size_t head_ = 0;
  std::uint64_t consumed_ = 0;
  std::size_t frames_emitted_ = 0;
};

}  // namespace speechface
