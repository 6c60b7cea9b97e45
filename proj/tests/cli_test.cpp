// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"

using namespace speechface;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("speechface_cli_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_pair(const fs::path& root, const std::string& stem, double seconds, std::size_t param_frames,
                std::uint64_t seed) {
  fs::create_directories(root / "wav");
  fs::create_directories(root / "params");
  audio::save_wav(root / "wav" / (stem + ".wav"), corpus::synth_audio(seconds, seed), 44100);
  csv::save_params(root / "params" / (stem + ".csv"), corpus::synth_targets(param_frames, seed + 1));
}

double max_abs_diff(const std::vector<face3d::FaceFrame>& a, const std::vector<face3d::FaceFrame>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < face3d::kParamCount; ++k) worst = std::max(worst, std::abs(a[i].param(k) - b[i].param(k)));
  return worst;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Ravdess, StemParsing) {
  auto l = corpus::parse_ravdess_stem("03-01-06-01-02-01-12");
  EXPECT_EQ(l.emotion, 6);
  EXPECT_EQ(l.actor, 12);
  EXPECT_STREQ(train::kEmotionNames[l.emotion - 1], "fearful");
  l = corpus::parse_ravdess_stem("interview_take2");
  EXPECT_EQ(l.emotion, train::kNoLabel);
  EXPECT_EQ(l.actor, train::kNoLabel);
  l = corpus::parse_ravdess_stem("03-01-09-01-02-01-12");  // emotion out of range
  EXPECT_EQ(l.emotion, train::kNoLabel);
  EXPECT_EQ(l.actor, 12);
}

TEST(ParamCsv, RoundTripToSixDecimals) {
  auto frames = corpus::synth_targets(12, 3);
  frames[5].e[4] = 0.1234567891;
  const auto text = csv::format_params(frames);
  EXPECT_EQ(text.substr(0, text.find('\n')), csv::header());
  EXPECT_EQ(csv::header().substr(0, 20), "frame,r1,r2,r3,e01,e");
  const auto back = csv::parse_params(text);
  ASSERT_EQ(back.size(), frames.size());
  EXPECT_LE(max_abs_diff(back, frames), 0.5e-6 + 1e-12);
  EXPECT_EQ(back[5].e[4], 0.123457);
  EXPECT_EQ(csv::format_params(back), text);
}

TEST(ParamCsv, ErrorsCarryLineNumbers) {
  const auto good = csv::format_params(corpus::synth_targets(3, 1));
  auto lines = [&] {
    std::vector<std::string> v;
    std::istringstream is(good);
    for (std::string l; std::getline(is, l);) v.push_back(l);
    return v;
  }();
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& l : v) s += l + "\n";
    return s;
  };
  auto bad = lines;
  bad[2] += ",0.5";
  try {
    csv::parse_params(join(bad));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 3u);
    EXPECT_NE(std::string(e.what()).find("50 columns"), std::string::npos);
  }
  bad = lines;
  bad[3].replace(bad[3].find(',') + 1, 3, "abc");
  try {
    csv::parse_params(join(bad));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  bad = lines;
  std::swap(bad[1], bad[2]);
  EXPECT_THROW(csv::parse_params(join(bad)), ParseError);
  EXPECT_THROW(csv::parse_params("frame,r1\n"), ParseError);
}

TEST(ParamCsv, RangeCheckNamesRow) {
  auto frames = corpus::synth_targets(4, 2);
  frames[2].e[9] = 1.2;
  const auto msg = error_of([&] { csv::check_ranges(frames); });
  EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("e10"), std::string::npos) << msg;
}

TEST(Prepare, RecordCountAndLabels) {
  TempDir dir;
  write_pair(dir.path(), "03-01-06-01-02-01-12", 3.2, 96, 5);
  cli::PrepareOptions o{dir / "wav", dir / "params", 30.0, dir / "out.sfd"};
  const auto r = cli::cmd_prepare(o);
  EXPECT_EQ(r.records, 96u);
  EXPECT_EQ(r.clips, 1u);
  const auto d = train::load_dataset(dir / "out.sfd");
  ASSERT_EQ(d.samples.size(), 96u);
  EXPECT_EQ(d.samples[0].emotion, 6);
  EXPECT_EQ(d.samples[0].actor, 12);
  EXPECT_EQ(d.samples[95].frame_index, 95u);
  EXPECT_TRUE(fs::exists(r.stats_path));
  EXPECT_TRUE(train::load_norm_stats(r.stats_path).valid());
}

TEST(Prepare, OffByOneFrameIsTruncated) {
  TempDir dir;
  write_pair(dir.path(), "a", 2.0, 61, 1);
  write_pair(dir.path(), "b", 2.0, 59, 2);
  const auto r = cli::cmd_prepare({dir / "wav", dir / "params", 30.0, dir / "out.sfd"});
  EXPECT_EQ(r.records, 60u + 59u);
  write_pair(dir.path(), "c", 2.0, 57, 3);
  EXPECT_THROW(cli::cmd_prepare({dir / "wav", dir / "params", 30.0, dir / "out2.sfd"}), InvalidInput);
  EXPECT_FALSE(fs::exists(dir / "out2.sfd"));
}

TEST(Prepare, OrphansAndEmptyDirectories) {
  TempDir dir;
  fs::create_directories(dir / "wav");
  fs::create_directories(dir / "params");
  EXPECT_THROW(cli::cmd_prepare({dir / "wav", dir / "params", 30.0, dir / "out.sfd"}), InvalidInput);
  EXPECT_FALSE(fs::exists(dir / "out.sfd"));
  write_pair(dir.path(), "paired", 1.0, 30, 1);
  csv::save_params(dir / "params" / "lonely.csv", corpus::synth_targets(30, 4));
  audio::save_wav(dir / "wav" / "silent.wav", std::vector<float>(44100, 0.0f), 44100);
  const auto msg = error_of([&] { cli::cmd_prepare({dir / "wav", dir / "params", 30.0, dir / "out.sfd"}); });
  EXPECT_NE(msg.find("lonely.csv"), std::string::npos) << msg;
  EXPECT_NE(msg.find("silent.wav"), std::string::npos) << msg;
  EXPECT_FALSE(fs::exists(dir / "out.sfd"));
}

TEST(Prepare, MalformedCsvReportsLine) {
  TempDir dir;
  write_pair(dir.path(), "x", 1.0, 30, 1);
  auto text = slurp(dir / "params" / "x.csv");
  const auto third = text.find('\n', text.find('\n', text.find('\n') + 1) + 1);
  text.insert(third, ",oops");
  cli::write_text(dir / "params" / "x.csv", text);
  const auto msg = error_of([&] { cli::cmd_prepare({dir / "wav", dir / "params", 30.0, dir / "out.sfd"}); });
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
}

TEST(Train, WritesCheckpointAndTraceDeterministically) {
  TempDir dir;
  write_pair(dir.path(), "03-01-01-01-01-01-01", 1.0, 30, 11);
  cli::cmd_prepare({dir / "wav", dir / "params", 30.0, dir / "d.sfd"});
  cli::TrainOptions o;
  o.dataset = dir / "d.sfd";
  o.config.variant = net::Variant::cnn_static;
  o.config.epochs = 2;
  o.config.minibatch_frames = 10;
  o.config.epoch_frames = 10;
  o.bptt_given = true;
  o.quiet = true;
  o.out = dir / "a.sfck";
  const auto r = cli::cmd_train(o);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("bptt"), std::string::npos);
  EXPECT_EQ(r.epoch_loss.size(), 2u);
  const auto trace = slurp(r.loss_trace);
  EXPECT_EQ(trace.substr(0, 11), "epoch,loss\n");
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 3);
  o.out = dir / "b.sfck";
  o.bptt_given = false;
  EXPECT_TRUE(cli::cmd_train(o).warnings.empty());
  EXPECT_EQ(slurp(dir / "a.sfck"), slurp(dir / "b.sfck"));
  EXPECT_EQ(net::load_checkpoint<float>(dir / "a.sfck")->variant, net::Variant::cnn_static);
}

TEST(Infer, FrameCountAndBatchStreamingAgreement) {
  TempDir dir;
  audio::save_wav(dir / "clip.wav", corpus::synth_audio(2.0, 3), 44100);
  for (auto v : {net::Variant::cnn_static, net::Variant::cnn_lstm, net::Variant::cnn_gru}) {
    auto m = net::build_model<float>(v, 17);
    net::save_checkpoint(*m, dir / "m.sfck");
    cli::InferOptions o;
    o.model = dir / "m.sfck";
    o.wav = dir / "clip.wav";
    o.out = dir / "batch.csv";
    const auto batch = cli::cmd_infer(o);
    EXPECT_EQ(batch.frames.size(), 60u);
    EXPECT_EQ(csv::load_params(o.out).size(), 60u);
    o.realtime = true;
    o.pace = false;
    o.out = dir / "rt.csv";
    const auto rt = cli::cmd_infer(o);
    ASSERT_EQ(rt.frames.size(), 60u);
    ASSERT_TRUE(rt.latency.has_value());
    EXPECT_GT(rt.latency->median_ms, 0.0);
    EXPECT_LE(max_abs_diff(batch.frames, rt.frames), 1e-6) << net::variant_name(v);
  }
}

TEST(Infer, ClipShorterThanOneFrameIsAnError) {
  TempDir dir;
  audio::save_wav(dir / "short.wav", std::vector<float>(1000, 0.1f), 44100);
  auto m = net::build_model<float>(net::Variant::cnn_static, 1);
  net::save_checkpoint(*m, dir / "m.sfck");
  cli::InferOptions o{dir / "m.sfck", dir / "short.wav", 30.0, dir / "out.csv"};
  EXPECT_THROW(cli::cmd_infer(o), InvalidInput);
  EXPECT_FALSE(fs::exists(dir / "out.csv"));
}

TEST(Infer, SilenceSettlesForRecurrentVariants) {
  const audio::AudioClip silence{std::vector<float>(static_cast<std::size_t>(3 * 44100), 0.0f)};
  for (auto v : {net::Variant::cnn_lstm, net::Variant::cnn_gru}) {
    auto m = net::build_model<float>(v, 23);
    const auto frames = cli::infer_batch_frames(*m, silence, 30.0);
    ASSERT_EQ(frames.size(), 90u);
    double worst = 0;
    for (std::size_t t = 31; t < frames.size(); ++t)
      worst = std::max(worst, max_abs_diff({frames[t]}, {frames[t - 1]}));
    EXPECT_LT(worst, 1e-3) << net::variant_name(v);
  }
}

TEST(Streaming, FutureSamplesDoNotAffectEmittedFrames) {
  auto m = net::build_model<float>(net::Variant::cnn_gru, 2);
  auto clip = corpus::synth_audio(1.0, 8);
  StreamingSession<float> a(*m, 30.0), b(*m, 30.0);
  const std::size_t end = audio::frame_end_sample(9, 30.0);
  const auto fa = a.push(std::span<const float>(clip.data(), end));
  auto mutated = clip;
  for (std::size_t i = end; i < mutated.size(); ++i) mutated[i] = -mutated[i];
  const auto fb = b.push(std::span<const float>(mutated.data(), end + 1000));
  ASSERT_EQ(fa.size(), 10u);
  ASSERT_EQ(fb.size(), 10u);
  EXPECT_EQ(max_abs_diff(fa, fb), 0.0);
  EXPECT_EQ(a.frames_emitted(), 10u);
  a.reset();
  EXPECT_EQ(a.frames_emitted(), 0u);
  EXPECT_EQ(a.samples_consumed(), 0u);
}

TEST(Eval, CopyScoresZeroAndGroupsComeFromStems) {
  TempDir dir;
  const auto rig = face3d::make_toy_rig(1);
  face3d::save_rig(dir / "rig.sfrg", rig);
  fs::create_directories(dir / "pred");
  fs::create_directories(dir / "truth");
  for (int a = 1; a <= 4; ++a) {
    for (int e = 1; e <= 8; ++e) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "03-01-%02d-01-01-01-%02d", e, a);
      const auto t = corpus::synth_targets(6, static_cast<std::uint64_t>(a * 10 + e));
      csv::save_params(dir / "truth" / (std::string(stem) + ".csv"), t);
      csv::save_params(dir / "pred" / (std::string(stem) + ".csv"), t);
    }
  }
  cli::EvalCommandOptions o;
  o.pred = dir / "pred";
  o.truth = dir / "truth";
  o.rig = dir / "rig.sfrg";
  o.report = dir / "report.json";
  o.groups = true;
  const auto r = cli::cmd_eval(o);
  EXPECT_EQ(r.frames, 32u * 6u);
  const auto j = nlohmann::json::parse(slurp(o.report));
  for (const char* metric : {"landmark_rmse_mm", "weights_mse"}) {
    EXPECT_EQ(j[metric]["mean"], 0.0);
    EXPECT_EQ(j[metric]["emotion"].size(), 8u);
    EXPECT_EQ(j[metric]["actor"].size(), 4u);
  }
}

TEST(Eval, HandFixtureAndErrors) {
  TempDir dir;
  // Single-vertex rig: B1 is B0 lifted by 10 mm, so e1 = 0.5 moves the landmark 5 mm.
  face3d::BlendshapeRig rig;
  rig.vertex_count = 1;
  for (int s = 0; s < 47; ++s) rig.shapes.push_back({0, 0, 0});
  rig.shapes[1] = {0, 10, 0};
  rig.landmarks = {0};
  face3d::save_rig(dir / "rig.sfrg", rig);
  std::vector<face3d::FaceFrame> truth(5), pred(5);
  for (std::size_t i = 0; i < 5; ++i) truth[i].frame_index = pred[i].frame_index = static_cast<std::int64_t>(i);
  pred[1].e[0] = 0.5;
  csv::save_params(dir / "p.csv", pred);
  csv::save_params(dir / "t.csv", truth);
  cli::EvalCommandOptions o;
  o.pred = dir / "p.csv";
  o.truth = dir / "t.csv";
  o.rig = dir / "rig.sfrg";
  o.report = dir / "r.json";
  const auto r = cli::cmd_eval(o);
  EXPECT_NEAR(r.landmark_rmse_mm->mean, 5.0 / std::sqrt(5.0), 1e-9);
  EXPECT_NEAR(r.weights_mse->mean, 0.25 / (5.0 * 46.0), 1e-12);

  o.rig.reset();
  EXPECT_THROW(cli::cmd_eval(o), InvalidConfiguration);
  o.metrics = cli::parse_metrics("weights");
  EXPECT_NO_THROW(cli::cmd_eval(o));
  EXPECT_THROW(cli::parse_metrics("speed"), InvalidInput);

  csv::save_params(dir / "t.csv", std::vector<face3d::FaceFrame>(truth.begin(), truth.begin() + 4));
  const auto msg = error_of([&] { cli::cmd_eval(o); });
  EXPECT_NE(msg.find("5 predicted"), std::string::npos) << msg;
  EXPECT_NE(msg.find("4 ground-truth"), std::string::npos) << msg;
}

TEST(Bench, ReportFields) {
  auto m = net::build_model<float>(net::Variant::cnn_static, 1);
  cli::BenchOptions o;
  o.iters = 5;
  o.warmup = 1;
  const auto r = cli::bench_model(*m, o);
  const auto j = r.to_json();
  for (const char* k : {"median_ms", "p95_ms", "frames_per_second", "variant", "iters"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_GT(r.median_ms, 0.0);
  EXPECT_LE(r.median_ms, r.p95_ms);
  EXPECT_NEAR(r.frames_per_second, 1000.0 / r.median_ms, 1e-9);
}

TEST(ExportObj, OneFilePerFrameAndNeutralFrame) {
  TempDir dir;
  const auto rig = face3d::make_toy_rig(3);
  face3d::save_rig(dir / "rig.sfrg", rig);
  auto frames = corpus::synth_targets(10, 5);
  frames[0] = face3d::FaceFrame{};
  csv::save_params(dir / "f.csv", frames);
  const auto files = cli::cmd_export_obj({dir / "rig.sfrg", dir / "f.csv", dir / "obj"});
  ASSERT_EQ(files.size(), 10u);
  EXPECT_EQ(files[0].filename(), "frame_00000.obj");
  EXPECT_EQ(files[9].filename(), "frame_00009.obj");
  const auto v0 = face3d::parse_obj_vertices(slurp(files[0]));
  ASSERT_EQ(v0.size(), rig.vertex_count);
  for (std::size_t v = 0; v < v0.size(); ++v) {
    const auto b0 = rig.vertex(0, v);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(v0[v][c], b0[c], 5e-7);
  }
  const auto parsed = csv::load_params(dir / "f.csv");
  const auto v7 = face3d::parse_obj_vertices(slurp(files[7]));
  const auto ref = face3d::compose_shape(rig, parsed[7]);
  for (std::size_t v = 0; v < v7.size(); ++v)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(v7[v][c], ref[v][c], 1e-4);
}

TEST(ExportObj, OutOfRangeWeightNamesRow) {
  TempDir dir;
  face3d::save_rig(dir / "rig.sfrg", face3d::make_toy_rig(3));
  auto frames = corpus::synth_targets(5, 5);
  frames[3].e[0] = -0.2;
  csv::save_params(dir / "f.csv", frames);
  const auto msg = error_of([&] { cli::cmd_export_obj({dir / "rig.sfrg", dir / "f.csv", dir / "obj"}); });
  EXPECT_NE(msg.find("row 4"), std::string::npos) << msg;
}

TEST(Synth, CorpusLayout) {
  TempDir dir;
  cli::SynthOptions o;
  o.out_dir = dir.path();
  o.clips = 3;
  o.seconds = 1.0;
  EXPECT_EQ(cli::cmd_synth(o), 3u);
  EXPECT_EQ(cli::files_with_extension(dir / "wav", ".wav").size(), 3u);
  EXPECT_EQ(cli::files_with_extension(dir / "params", ".csv").size(), 3u);
  EXPECT_NO_THROW(face3d::load_rig(dir / "rig.sfrg"));
  const auto r = cli::cmd_prepare({dir / "wav", dir / "params", 30.0, dir / "d.sfd"});
  EXPECT_EQ(r.records, 90u);
}
