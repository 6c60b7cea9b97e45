// SPDX-License-Identifier: Apache-2.0
/**
 * @file   audio.hpp
 * @brief  WAV ingestion and the per-video-frame spectrogram frontend.
 *
 * Every video frame t gets the 4224 samples (32 hops of 128 under a
 * 256-sample window) that end at round((t+1) * 44100 / fps). Nothing after
 * that sample is read, so frames can be produced live.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "speechface/binary_io.hpp"
#include "speechface/errors.hpp"

namespace speechface::audio {

inline constexpr double kSampleRate = 44100.0;
inline constexpr std::size_t kFftSize = 256;
inline constexpr std::size_t kHop = 128;
inline constexpr std::size_t kBands = 128;
inline constexpr std::size_t kTimeFrames = 32;
inline constexpr std::size_t kWindowLength = kFftSize + (kTimeFrames - 1) * kHop;  // 4224

static_assert(kWindowLength == 4224);

struct AudioClip {
  std::vector<float> samples;
  double sample_rate = kSampleRate;
  /// Set when the source rate differed and linear resampling was applied.
  bool resampled = false;
  double source_rate = kSampleRate;
};

enum class WavEncoding { pcm16, float32 };

// ---------------------------------------------------------------------------
// WAV

/// Linear-interpolation resampling; n samples at `from` become
/// floor((n - 1) * to / from) + 1 samples at `to`.
inline std::vector<float> resample_linear(std::span<const float> in, double from, double to) {
  if (in.empty()) return {};
  if (from == to) return {in.begin(), in.end()};
  const auto n_out = static_cast<std::size_t>(
      std::floor(static_cast<double>(in.size() - 1) * to / from + 1e-9)) + 1;
  std::vector<float> out(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) * from / to;
    auto idx = static_cast<std::size_t>(pos);
    if (idx >= in.size() - 1) {
      out[i] = in.back();
      continue;
    }
    const double frac = pos - static_cast<double>(idx);
    out[i] = static_cast<float>((1.0 - frac) * in[idx] + frac * in[idx + 1]);
  }
  return out;
}

/**
 * Decodes RIFF/WAVE with 16-bit integer or 32-bit float PCM, mono or
 * stereo. Stereo is averaged to mono and any rate other than 44.1 kHz is
 * resampled.
 */
inline AudioClip parse_wav(std::span<const std::uint8_t> bytes) {
  auto u16 = [&](std::size_t off) {
    return static_cast<std::uint16_t>(bytes[off] | (bytes[off + 1] << 8));
  };
  auto u32 = [&](std::size_t off) {
    return static_cast<std::uint32_t>(bytes[off]) | (static_cast<std::uint32_t>(bytes[off + 1]) << 8) |
           (static_cast<std::uint32_t>(bytes[off + 2]) << 16) |
           (static_cast<std::uint32_t>(bytes[off + 3]) << 24);
  };
  auto tag = [&](std::size_t off) {
    return std::string(reinterpret_cast<const char*>(bytes.data() + off), 4);
  };

  if (bytes.size() < 12) throw ParseError("file too short for a RIFF header", bytes.size());
  if (tag(0) != "RIFF") throw ParseError("missing RIFF magic", 0);
  if (tag(8) != "WAVE") throw ParseError("RIFF form type is not WAVE", 8);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t data_off = 0, data_len = 0;
  bool have_data = false;

  std::size_t off = 12;
  while (off + 8 <= bytes.size()) {
    const std::string id = tag(off);
    const std::uint32_t len = u32(off + 4);
    const std::size_t body = off + 8;
    if (id == "fmt ") {
      if (len < 16 || body + 16 > bytes.size()) throw ParseError("fmt chunk too short", off);
      format = u16(body);
      channels = u16(body + 2);
      rate = u32(body + 4);
      bits = u16(body + 14);
      if (format == 0xFFFE) {
        if (len < 40 || body + 26 > bytes.size()) throw ParseError("truncated WAVE_FORMAT_EXTENSIBLE", off);
        format = u16(body + 24);
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw ParseError("data chunk before fmt chunk", off);
      data_off = body;
      data_len = std::min<std::size_t>(len, bytes.size() - body);
      have_data = true;
      break;
    }
    off = body + len + (len & 1u);
  }
  if (!have_fmt) throw ParseError("no fmt chunk", off);
  if (!have_data) throw ParseError("no data chunk", off);
  if (!(format == 1 && bits == 16) && !(format == 3 && bits == 32)) {
    throw ParseError("unsupported codec (format " + std::to_string(format) + ", " +
                         std::to_string(bits) + " bits)",
                     20);
  }
  if (channels != 1 && channels != 2) {
    throw ParseError("unsupported channel count " + std::to_string(channels), 22);
  }
  if (rate == 0) throw ParseError("zero sample rate", 24);

  const std::size_t sample_bytes = bits / 8;
  const std::size_t frames = data_len / (sample_bytes * channels);
  AudioClip clip;
  clip.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t p = data_off + (i * channels + c) * sample_bytes;
      if (format == 1) {
        acc += static_cast<std::int16_t>(u16(p)) / 32768.0;
      } else {
        acc += std::bit_cast<float>(u32(p));
      }
    }
    clip.samples[i] = static_cast<float>(acc / channels);
  }
  clip.source_rate = rate;
  if (rate != static_cast<std::uint32_t>(kSampleRate)) {
    clip.samples = resample_linear(clip.samples, rate, kSampleRate);
    clip.resampled = true;
  }
  clip.sample_rate = kSampleRate;
  return clip;
}

inline AudioClip load_wav(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return parse_wav(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

/// `interleaved` holds frames * channels samples in [-1, 1].
inline std::vector<std::uint8_t> encode_wav(std::span<const float> interleaved, std::uint32_t rate,
                                            std::uint16_t channels = 1,
                                            WavEncoding enc = WavEncoding::pcm16) {
  const std::uint16_t bits = enc == WavEncoding::pcm16 ? 16 : 32;
  const auto data_len = static_cast<std::uint32_t>(interleaved.size() * bits / 8);
  io::Writer w;
  w.bytes("RIFF");
  w.u32(36 + data_len);
  w.bytes("WAVE");
  w.bytes("fmt ");
  w.u32(16);
  w.u16(enc == WavEncoding::pcm16 ? 1 : 3);
  w.u16(channels);
  w.u32(rate);
  w.u32(rate * channels * bits / 8);
  w.u16(static_cast<std::uint16_t>(channels * bits / 8));
  w.u16(bits);
  w.bytes("data");
  w.u32(data_len);
  for (float s : interleaved) {
    if (enc == WavEncoding::pcm16) {
      const double scaled = std::clamp(std::round(static_cast<double>(s) * 32768.0), -32768.0, 32767.0);
      w.u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
    } else {
      w.f32(s);
    }
  }
  return w.buffer();
}

inline void save_wav(const std::filesystem::path& path, std::span<const float> interleaved,
                     std::uint32_t rate, std::uint16_t channels = 1,
                     WavEncoding enc = WavEncoding::pcm16) {
  io::write_file(path, encode_wav(interleaved, rate, channels, enc));
}

// ---------------------------------------------------------------------------
// framing

/// One past the last sample belonging to video frame t.
inline std::size_t frame_end_sample(std::size_t t, double fps) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(t + 1) * kSampleRate / fps));
}

/// Number of complete video frames covered by `num_samples` samples.
inline std::size_t frame_count(std::size_t num_samples, double fps) {
  auto n = static_cast<std::size_t>(std::floor(static_cast<double>(num_samples) * fps / kSampleRate));
  while (n > 0 && frame_end_sample(n - 1, fps) > num_samples) --n;
  while (frame_end_sample(n, fps) <= num_samples) ++n;
  return n;
}

/// The 4224 samples ending at frame t's boundary, zero-padded on the left.
inline std::vector<float> extract_frame_window(const AudioClip& clip, std::size_t t, double fps) {
  if (!(fps > 0)) throw InvalidInput("fps must be positive");
  const std::size_t end = frame_end_sample(t, fps);
  if (end > clip.samples.size()) {
    throw RangeError("frame " + std::to_string(t) + " ends at sample " + std::to_string(end) +
                     " beyond clip length " + std::to_string(clip.samples.size()));
  }
  std::vector<float> window(kWindowLength, 0.0f);
  const std::size_t avail = std::min(end, kWindowLength);
  std::copy(clip.samples.begin() + static_cast<std::ptrdiff_t>(end - avail),
            clip.samples.begin() + static_cast<std::ptrdiff_t>(end),
            window.begin() + static_cast<std::ptrdiff_t>(kWindowLength - avail));
  return window;
}

// ---------------------------------------------------------------------------
// spectrogram

/// 128 x 32 band-major power array for one video frame.
struct Spectrogram {
  std::vector<float> bands = std::vector<float>(kBands * kTimeFrames, 0.0f);
  std::int64_t frame_index = 0;

  float& at(std::size_t band, std::size_t frame) { return bands[band * kTimeFrames + frame]; }
  float at(std::size_t band, std::size_t frame) const { return bands[band * kTimeFrames + frame]; }
};

namespace detail {

// In-place iterative radix-2 FFT of size kFftSize.
class Fft256 {
 public:
  Fft256() {
    for (std::size_t k = 0; k < kFftSize / 2; ++k) {
      const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / kFftSize;
      twiddle_[k] = {std::cos(a), std::sin(a)};
    }
    for (std::size_t i = 0; i < kFftSize; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < 8; ++b)
        if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (7 - b);
      reversed_[i] = r;
    }
  }

  void transform(std::array<std::complex<double>, kFftSize>& x) const {
    for (std::size_t i = 0; i < kFftSize; ++i)
      if (i < reversed_[i]) std::swap(x[i], x[reversed_[i]]);
    for (std::size_t len = 2; len <= kFftSize; len <<= 1) {
      const std::size_t step = kFftSize / len;
      for (std::size_t i = 0; i < kFftSize; i += len) {
        for (std::size_t j = 0; j < len / 2; ++j) {
          const auto u = x[i + j];
          const auto v = x[i + j + len / 2] * twiddle_[j * step];
          x[i + j] = u + v;
          x[i + j + len / 2] = u - v;
        }
      }
    }
  }

 private:
  std::array<std::complex<double>, kFftSize / 2> twiddle_{};
  std::array<std::size_t, kFftSize> reversed_{};
};

inline const Fft256& fft() {
  static const Fft256 instance;
  return instance;
}

}  // namespace detail

/// Periodic Hann window of length kFftSize.
inline const std::array<double, kFftSize>& hann_window() {
  static const auto w = [] {
    std::array<double, kFftSize> v{};
    for (std::size_t n = 0; n < kFftSize; ++n)
      v[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / kFftSize);
    return v;
  }();
  return w;
}

/// 32 Hann-windowed 256-point DFTs at hop 128; power |X[k]|^2 for k < 128.
inline Spectrogram compute_spectrogram(std::span<const float> window) {
  if (window.size() != kWindowLength) {
    throw ShapeError("compute_spectrogram: window length " + std::to_string(window.size()) +
                     " != " + std::to_string(kWindowLength));
  }
  const auto& hann = hann_window();
  Spectrogram spec;
  std::array<std::complex<double>, kFftSize> buf;
  for (std::size_t f = 0; f < kTimeFrames; ++f) {
    const float* frame = window.data() + f * kHop;
    for (std::size_t n = 0; n < kFftSize; ++n) buf[n] = {hann[n] * frame[n], 0.0};
    detail::fft().transform(buf);
    for (std::size_t k = 0; k < kBands; ++k) spec.at(k, f) = static_cast<float>(std::norm(buf[k]));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// normalization

struct NormStats {
  std::vector<float> mean = std::vector<float>(kBands, 0.0f);
  std::vector<float> std = std::vector<float>(kBands, 1.0f);

  bool valid() const {
    if (mean.size() != kBands || std.size() != kBands) return false;
    for (float s : std)
      if (!(s > 0.0f)) return false;
    return true;
  }
};

inline constexpr float kStdFloor = 1e-6f;

/// Per-band mean and population standard deviation pooled over every time
/// column of every spectrogram (Welford accumulation).
inline NormStats fit_normalization(std::span<const Spectrogram> corpus) {
  if (corpus.size() < 2) {
    throw InvalidInput("fit_normalization needs at least 2 spectrograms, got " +
                       std::to_string(corpus.size()));
  }
  NormStats stats;
  for (std::size_t b = 0; b < kBands; ++b) {
    double mean = 0, m2 = 0;
    std::size_t n = 0;
    for (const auto& s : corpus) {
      for (std::size_t t = 0; t < kTimeFrames; ++t) {
        const double x = s.at(b, t);
        ++n;
        const double delta = x - mean;
        mean += delta / static_cast<double>(n);
        m2 += delta * (x - mean);
      }
    }
    stats.mean[b] = static_cast<float>(mean);
    stats.std[b] = std::max(static_cast<float>(std::sqrt(m2 / static_cast<double>(n))), kStdFloor);
  }
  return stats;
}

inline Spectrogram normalize(const Spectrogram& spec, const NormStats& stats) {
  Spectrogram out;
  out.frame_index = spec.frame_index;
  for (std::size_t b = 0; b < kBands; ++b)
    for (std::size_t t = 0; t < kTimeFrames; ++t)
      out.at(b, t) = (spec.at(b, t) - stats.mean[b]) / stats.std[b];
  return out;
}

}  // namespace speechface::audio
