// SPDX-License-Identifier: Apache-2.0
// Command implementations behind the speechface CLI.
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "speechface/speechface.hpp"

namespace speechface::cli {

namespace fs = std::filesystem;

inline std::vector<fs::path> files_with_extension(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw InvalidInput(dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string x = e.path().extension().string();
    std::transform(x.begin(), x.end(), x.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (x == ext) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
}

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// ---------------------------------------------------------------------------
// prepare

struct PrepareOptions {
  fs::path wav_dir;
  fs::path params_dir;
  double fps = 30.0;
  fs::path out;
};

struct PrepareResult {
  std::size_t clips = 0;
  std::size_t records = 0;
  std::size_t resampled = 0;
  fs::path stats_path;
};

inline PrepareResult cmd_prepare(const PrepareOptions& opt) {
  if (!(opt.fps > 0)) throw InvalidInput("--fps must be positive");
  const auto wavs = files_with_extension(opt.wav_dir, ".wav");
  const auto csvs = files_with_extension(opt.params_dir, ".csv");
  if (wavs.empty()) throw InvalidInput("no .wav files in " + opt.wav_dir.string());
  std::map<std::string, fs::path> wav_by_stem, csv_by_stem;
  for (const auto& p : wavs) wav_by_stem[p.stem().string()] = p;
  for (const auto& p : csvs) csv_by_stem[p.stem().string()] = p;
  std::vector<std::string> orphans;
  for (const auto& [s, p] : wav_by_stem)
    if (!csv_by_stem.count(s)) orphans.push_back(s + ".wav");
  for (const auto& [s, p] : csv_by_stem)
    if (!wav_by_stem.count(s)) orphans.push_back(s + ".csv");
  if (!orphans.empty()) {
    std::string list;
    for (const auto& o : orphans) list += (list.empty() ? "" : ", ") + o;
    throw InvalidInput("unpaired inputs: " + list);
  }

  PrepareResult res;
  std::vector<corpus::Item> items;
  for (const auto& [stem, wav] : wav_by_stem) {
    corpus::Item it;
    it.name = stem;
    it.clip = audio::load_wav(wav);
    if (it.clip.resampled) ++res.resampled;
    it.targets = csv::load_params(csv_by_stem.at(stem));
    try {
      csv::check_ranges(it.targets);
    } catch (const InvalidInput& e) {
      throw InvalidInput(csv_by_stem.at(stem).string() + ": " + e.what());
    }
    it.labels = corpus::parse_ravdess_stem(stem);
    items.push_back(std::move(it));
  }
  auto [data, stats] = corpus::build_dataset(items, opt.fps);
  train::save_dataset(opt.out, data);
  res.stats_path = train::norm_stats_path(opt.out);
  train::save_norm_stats(res.stats_path, stats);
  res.clips = items.size();
  res.records = data.samples.size();
  return res;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  fs::path dataset;
  train::TrainConfig config;
  bool bptt_given = false;
  fs::path out;
  bool quiet = false;
};

struct TrainCommandResult {
  std::vector<double> epoch_loss;
  fs::path loss_trace;
  std::vector<std::string> warnings;
};

inline TrainCommandResult cmd_train(const TrainOptions& opt) {
  TrainCommandResult res;
  if (opt.config.variant == net::Variant::cnn_static && opt.bptt_given) {
    res.warnings.push_back("--bptt has no effect for cnn-static");
    std::cerr << "warning: --bptt has no effect for cnn-static\n";
  }
  const auto data = train::load_dataset(opt.dataset);
  const auto stats = train::load_norm_stats(train::norm_stats_path(opt.dataset));
  auto r = train::train(opt.config, data, stats, [&](std::size_t epoch, double loss) {
    if (!opt.quiet) std::fprintf(stderr, "epoch %zu/%zu  loss %.6f\n", epoch, opt.config.epochs, loss);
  });
  net::save_checkpoint(*r.model, opt.out);
  res.epoch_loss = r.epoch_loss;
  res.loss_trace = opt.out;
  res.loss_trace += ".loss.csv";
  std::string trace = "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < r.epoch_loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, r.epoch_loss[i]);
    trace += buf;
  }
  write_text(res.loss_trace, trace);
  return res;
}

// ---------------------------------------------------------------------------
// infer

struct InferOptions {
  fs::path model;
  fs::path wav;
  double fps = 30.0;
  fs::path out;
  bool realtime = false;
  bool pace = true;  // realtime: feed audio at wall-clock rate
};

struct LatencyStats {
  double median_ms = 0;
  double p95_ms = 0;
  double p99_ms = 0;
  double max_ms = 0;
};

inline LatencyStats latency_stats(const std::vector<double>& ms) {
  return {percentile(ms, 0.5), percentile(ms, 0.95), percentile(ms, 0.99),
          ms.empty() ? 0.0 : *std::max_element(ms.begin(), ms.end())};
}

struct InferResult {
  std::vector<face3d::FaceFrame> frames;
  std::optional<LatencyStats> latency;
};

inline std::vector<face3d::FaceFrame> infer_batch_frames(const net::Model<float>& model, const audio::AudioClip& clip,
                                                         double fps) {
  auto specs = corpus::clip_spectrograms(clip, fps);
  for (auto& s : specs) s = audio::normalize(s, model.norm_stats);
  return net::forward_sequence(model, std::span<const audio::Spectrogram>(specs), model.initial_state());
}

inline std::vector<face3d::FaceFrame> infer_streaming_frames(const net::Model<float>& model,
                                                             const audio::AudioClip& clip, double fps, bool pace,
                                                             std::vector<double>* latency_ms) {
  StreamingSession<float> session(model, fps);
  std::vector<face3d::FaceFrame> frames;
  const auto start = std::chrono::steady_clock::now();
  std::size_t pos = 0;
  const std::size_t n = audio::frame_count(clip.samples.size(), fps);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t end = audio::frame_end_sample(t, fps);
    if (pace) {
      std::this_thread::sleep_until(start + std::chrono::duration<double>(static_cast<double>(end) / audio::kSampleRate));
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto out = session.push(std::span<const float>(clip.samples.data() + pos, end - pos));
    const auto t1 = std::chrono::steady_clock::now();
    pos = end;
    if (latency_ms) latency_ms->push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    frames.insert(frames.end(), out.begin(), out.end());
  }
  return frames;
}

inline InferResult cmd_infer(const InferOptions& opt) {
  if (!(opt.fps > 0)) throw InvalidInput("--fps must be positive");
  const auto model = net::load_checkpoint<float>(opt.model);
  const auto clip = audio::load_wav(opt.wav);
  if (audio::frame_count(clip.samples.size(), opt.fps) == 0) {
    throw InvalidInput(opt.wav.string() + ": shorter than one video frame interval");
  }
  InferResult res;
  if (opt.realtime) {
    std::vector<double> ms;
    res.frames = infer_streaming_frames(*model, clip, opt.fps, opt.pace, &ms);
    res.latency = latency_stats(ms);
    std::fprintf(stderr, "realtime: %zu frames, latency median %.3f ms, p95 %.3f ms, p99 %.3f ms, max %.3f ms\n",
                 res.frames.size(), res.latency->median_ms, res.latency->p95_ms, res.latency->p99_ms,
                 res.latency->max_ms);
  } else {
    res.frames = infer_batch_frames(*model, clip, opt.fps);
  }
  csv::save_params(opt.out, res.frames);
  return res;
}

// ---------------------------------------------------------------------------
// eval

struct EvalCommandOptions {
  fs::path pred;
  fs::path truth;
  std::optional<fs::path> rig;
  fs::path report;
  bool groups = false;
  train::EvalOptions metrics;
};

inline train::EvalOptions parse_metrics(const std::string& list) {
  train::EvalOptions m{false, false};
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto comma = list.find(',', start);
    const std::string item = list.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (item == "landmarks") m.landmarks = true;
    else if (item == "weights") m.weights = true;
    else if (!item.empty()) throw InvalidInput("unknown metric '" + item + "' (expected landmarks, weights)");
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (!m.landmarks && !m.weights) throw InvalidInput("no metrics selected");
  return m;
}

inline train::EvalReport cmd_eval(const EvalCommandOptions& opt) {
  if (opt.metrics.landmarks && !opt.rig) {
    throw InvalidConfiguration("the landmark metric needs --rig (or select --metrics weights)");
  }
  std::vector<std::pair<std::string, fs::path>> pairs_pred, pairs_truth;
  if (fs::is_directory(opt.pred) != fs::is_directory(opt.truth)) {
    throw InvalidInput("--pred and --truth must both be files or both be directories");
  }
  if (fs::is_directory(opt.pred)) {
    for (const auto& p : files_with_extension(opt.pred, ".csv")) pairs_pred.emplace_back(p.stem().string(), p);
    std::map<std::string, fs::path> truth;
    for (const auto& p : files_with_extension(opt.truth, ".csv")) truth[p.stem().string()] = p;
    if (pairs_pred.size() != truth.size()) {
      throw InvalidInput("prediction directory has " + std::to_string(pairs_pred.size()) +
                         " files, ground-truth directory has " + std::to_string(truth.size()));
    }
    for (const auto& [stem, p] : pairs_pred) {
      auto it = truth.find(stem);
      if (it == truth.end()) throw InvalidInput("no ground truth for " + stem);
      pairs_truth.emplace_back(stem, it->second);
    }
  } else {
    pairs_pred.emplace_back(opt.pred.stem().string(), opt.pred);
    pairs_truth.emplace_back(opt.truth.stem().string(), opt.truth);
  }
  if (pairs_pred.empty()) throw InvalidInput("no prediction files");

  std::vector<face3d::FaceFrame> pred, truth;
  std::vector<train::FrameLabel> labels;
  for (std::size_t i = 0; i < pairs_pred.size(); ++i) {
    const auto p = csv::load_params(pairs_pred[i].second);
    const auto t = csv::load_params(pairs_truth[i].second);
    if (p.size() != t.size()) {
      throw InvalidInput(pairs_pred[i].first + ": " + std::to_string(p.size()) + " predicted frames vs " +
                         std::to_string(t.size()) + " ground-truth frames");
    }
    pred.insert(pred.end(), p.begin(), p.end());
    truth.insert(truth.end(), t.begin(), t.end());
    if (opt.groups) {
      const auto l = corpus::parse_ravdess_stem(pairs_truth[i].first);
      labels.insert(labels.end(), p.size(), train::FrameLabel{l.emotion, l.actor});
    }
  }
  std::optional<face3d::BlendshapeRig> rig;
  if (opt.rig) rig = face3d::load_rig(*opt.rig);
  auto report = train::evaluate_frames(pred, truth, labels, rig ? &*rig : nullptr, opt.metrics);
  write_text(opt.report, report.to_json().dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
  fs::path model;
  std::size_t iters = 200;
  std::size_t warmup = 10;
  double fps = 30.0;
  std::uint64_t seed = 1;
};

struct BenchResult {
  std::string variant;
  std::size_t iters = 0;
  double median_ms = 0;
  double p95_ms = 0;
  double frames_per_second = 0;

  nlohmann::json to_json() const {
    return {{"variant", variant},
            {"iters", iters},
            {"median_ms", median_ms},
            {"p95_ms", p95_ms},
            {"frames_per_second", frames_per_second},
            {"budget_ms_at_30fps", 1000.0 / 30.0}};
  }
};

/// Per-frame wall time of spectrogram + forward through a streaming
/// session fed with random audio.
inline BenchResult bench_model(const net::Model<float>& model, const BenchOptions& opt) {
  if (opt.iters == 0) throw InvalidInput("--iters must be positive");
  StreamingSession<float> session(model, opt.fps);
  Rng rng(opt.seed);
  std::vector<double> ms;
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < opt.warmup + opt.iters; ++i) {
    const std::size_t end = audio::frame_end_sample(session.frames_emitted(), opt.fps);
    std::vector<float> chunk(end - pos);
    for (auto& s : chunk) s = static_cast<float>(rng.uniform(-0.5, 0.5));
    pos = end;
    const auto t0 = std::chrono::steady_clock::now();
    const auto frames = session.push(chunk);
    const auto t1 = std::chrono::steady_clock::now();
    if (frames.size() != 1) throw StateError("streaming session emitted " + std::to_string(frames.size()) + " frames");
    if (i >= opt.warmup) ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  BenchResult r;
  r.variant = net::variant_name(model.variant);
  r.iters = opt.iters;
  r.median_ms = percentile(ms, 0.5);
  r.p95_ms = percentile(ms, 0.95);
  r.frames_per_second = r.median_ms > 0 ? 1000.0 / r.median_ms : 0.0;
  return r;
}

inline BenchResult cmd_bench(const BenchOptions& opt) {
  const auto model = net::load_checkpoint<float>(opt.model);
  return bench_model(*model, opt);
}

// ---------------------------------------------------------------------------
// export-obj

struct ExportOptions {
  fs::path rig;
  fs::path frames;
  fs::path out_dir;
};

inline std::vector<fs::path> cmd_export_obj(const ExportOptions& opt) {
  const auto rig = face3d::load_rig(opt.rig);
  const auto frames = csv::load_params(opt.frames);
  csv::check_ranges(frames);
  fs::create_directories(opt.out_dir);
  const std::size_t digits = std::max<std::size_t>(5, std::to_string(frames.size()).size());
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    std::string idx = std::to_string(i);
    idx.insert(0, digits - idx.size(), '0');
    const auto path = opt.out_dir / ("frame_" + idx + ".obj");
    write_text(path, face3d::to_obj(face3d::compose_shape(rig, frames[i]), rig.faces));
    written.push_back(path);
  }
  return written;
}

// ---------------------------------------------------------------------------
// synthetic corpus

struct SynthOptions {
  fs::path out_dir;
  std::size_t clips = 4;
  double seconds = 2.0;
  double fps = 30.0;
  std::uint64_t seed = 1;
};

/// Writes wav/ and params/ subdirectories with RAVDESS-style stems, plus
/// rig.sfrg.
inline std::size_t cmd_synth(const SynthOptions& opt) {
  if (opt.clips == 0 || !(opt.seconds > 0)) throw InvalidInput("--clips and --seconds must be positive");
  fs::create_directories(opt.out_dir / "wav");
  fs::create_directories(opt.out_dir / "params");
  for (std::size_t i = 0; i < opt.clips; ++i) {
    const auto samples = corpus::synth_audio(opt.seconds, opt.seed * 1000 + i);
    const std::size_t frames = audio::frame_count(samples.size(), opt.fps);
    const auto targets = corpus::synth_targets(frames, opt.seed * 1000 + 500 + i);
    char stem[32];
    std::snprintf(stem, sizeof stem, "03-01-%02zu-01-01-01-%02zu", i % 8 + 1, i / 8 % 4 + 1);
    audio::save_wav(opt.out_dir / "wav" / (std::string(stem) + ".wav"), samples, 44100, 1, audio::WavEncoding::pcm16);
    csv::save_params(opt.out_dir / "params" / (std::string(stem) + ".csv"), targets);
  }
  face3d::save_rig(opt.out_dir / "rig.sfrg", face3d::make_toy_rig(opt.seed));
  return opt.clips;
}

}  // namespace speechface::cli
