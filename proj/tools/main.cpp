// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>

#include "commands.hpp"

using namespace speechface;

int main(int argc, char** argv) {
  CLI::App app{"speechface: speech-driven 3D facial animation"};
  app.require_subcommand(1);

  cli::PrepareOptions prep;
  auto* c_prep = app.add_subcommand("prepare", "build a .sfd dataset from paired WAV / parameter CSV files");
  c_prep->add_option("--wav-dir", prep.wav_dir, "directory of .wav clips")->required();
  c_prep->add_option("--params-dir", prep.params_dir, "directory of ground-truth .csv files (same stems)")->required();
  c_prep->add_option("--fps", prep.fps, "video frame rate")->capture_default_str();
  c_prep->add_option("--out", prep.out, "output dataset (.sfd); stats go to <out>.stats")->required();

  cli::TrainOptions tr;
  std::string variant = "cnn-gru";
  auto* c_train = app.add_subcommand("train", "train a model");
  c_train->add_option("--dataset", tr.dataset, ".sfd dataset")->required();
  c_train->add_option("--variant", variant, "cnn-static | cnn-lstm | cnn-gru")->capture_default_str();
  c_train->add_option("--epochs", tr.config.epochs)->capture_default_str();
  c_train->add_option("--lr", tr.config.learning_rate)->capture_default_str();
  c_train->add_option("--minibatch", tr.config.minibatch_frames, "frames per minibatch")->capture_default_str();
  c_train->add_option("--epoch-frames", tr.config.epoch_frames, "frames per epoch")->capture_default_str();
  auto* bptt = c_train->add_option("--bptt", tr.config.bptt_len, "truncated BPTT length")->capture_default_str();
  c_train->add_option("--seed", tr.config.seed)->capture_default_str();
  c_train->add_option("--out", tr.out, "checkpoint path; loss trace goes to <out>.loss.csv")->required();
  c_train->add_flag("--quiet", tr.quiet, "no per-epoch progress");

  cli::InferOptions inf;
  bool no_pace = false;
  auto* c_infer = app.add_subcommand("infer", "predict face parameters for a WAV file");
  c_infer->add_option("--model", inf.model)->required();
  c_infer->add_option("--wav", inf.wav)->required();
  c_infer->add_option("--fps", inf.fps)->capture_default_str();
  c_infer->add_option("--out", inf.out, "output parameter CSV")->required();
  c_infer->add_flag("--realtime", inf.realtime, "stream through a live session and report latency");
  c_infer->add_flag("--no-pace", no_pace, "with --realtime: do not wait for wall-clock audio time");

  cli::EvalCommandOptions ev;
  std::string rig_path, metrics = "landmarks,weights";
  auto* c_eval = app.add_subcommand("eval", "score predictions against ground truth");
  c_eval->add_option("--pred", ev.pred, "prediction CSV or directory")->required();
  c_eval->add_option("--truth", ev.truth, "ground-truth CSV or directory")->required();
  c_eval->add_option("--rig", rig_path, "blendshape rig (.sfrg)");
  c_eval->add_option("--report", ev.report, "output JSON report")->required();
  c_eval->add_flag("--groups", ev.groups, "group by RAVDESS emotion / actor parsed from file stems");
  c_eval->add_option("--metrics", metrics, "comma list of landmarks, weights")->capture_default_str();

  cli::BenchOptions be;
  auto* c_bench = app.add_subcommand("bench", "per-frame latency of spectrogram + forward");
  c_bench->add_option("--model", be.model)->required();
  c_bench->add_option("--iters", be.iters)->capture_default_str();
  c_bench->add_option("--fps", be.fps)->capture_default_str();
  c_bench->add_option("--seed", be.seed)->capture_default_str();

  cli::ExportOptions ex;
  auto* c_export = app.add_subcommand("export-obj", "write one OBJ mesh per parameter frame");
  c_export->add_option("--rig", ex.rig)->required();
  c_export->add_option("--frames", ex.frames, "parameter CSV")->required();
  c_export->add_option("--out-dir", ex.out_dir)->required();

  std::string rig_out;
  std::uint64_t rig_seed = 1;
  auto* c_rig = app.add_subcommand("make-rig", "write the deterministic synthetic blendshape rig");
  c_rig->add_option("--out", rig_out)->required();
  c_rig->add_option("--seed", rig_seed)->capture_default_str();

  cli::SynthOptions sy;
  auto* c_synth = app.add_subcommand("synth-corpus", "write a small synthetic labeled corpus and rig");
  c_synth->add_option("--out-dir", sy.out_dir)->required();
  c_synth->add_option("--clips", sy.clips)->capture_default_str();
  c_synth->add_option("--seconds", sy.seconds)->capture_default_str();
  c_synth->add_option("--fps", sy.fps)->capture_default_str();
  c_synth->add_option("--seed", sy.seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_prep) {
      const auto r = cli::cmd_prepare(prep);
      std::printf("wrote %zu records from %zu clips to %s (stats: %s)\n", r.records, r.clips,
                  prep.out.string().c_str(), r.stats_path.string().c_str());
    } else if (*c_train) {
      tr.config.variant = net::parse_variant(variant);
      tr.bptt_given = bptt->count() > 0;
      const auto r = cli::cmd_train(tr);
      std::printf("final training error %.6f; checkpoint %s; loss trace %s\n", r.epoch_loss.back(),
                  tr.out.string().c_str(), r.loss_trace.string().c_str());
    } else if (*c_infer) {
      inf.pace = !no_pace;
      const auto r = cli::cmd_infer(inf);
      std::printf("wrote %zu frames to %s\n", r.frames.size(), inf.out.string().c_str());
    } else if (*c_eval) {
      if (!rig_path.empty()) ev.rig = rig_path;
      ev.metrics = cli::parse_metrics(metrics);
      const auto r = cli::cmd_eval(ev);
      std::printf("%s\n", r.to_json().dump(2).c_str());
    } else if (*c_bench) {
      std::printf("%s\n", cli::cmd_bench(be).to_json().dump(2).c_str());
    } else if (*c_export) {
      const auto files = cli::cmd_export_obj(ex);
      std::printf("wrote %zu OBJ files to %s\n", files.size(), ex.out_dir.string().c_str());
    } else if (*c_rig) {
      face3d::save_rig(rig_out, face3d::make_toy_rig(rig_seed));
      std::printf("wrote %s\n", rig_out.c_str());
    } else if (*c_synth) {
      const auto n = cli::cmd_synth(sy);
      std::printf("wrote %zu clips to %s\n", n, sy.out_dir.string().c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
