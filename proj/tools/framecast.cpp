// framecast CLI: synthetic data generation, training, prediction and
// evaluation for the tuple-parallel video prediction model.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>
#include <vector>

#include "framecast/config.hpp"
#include "framecast/metrics.hpp"
#include "framecast/predictor.hpp"
#include "framecast/trainer.hpp"

namespace fs = std::filesystem;
using namespace framecast;

using Real = float;  // training/inference scalar; tests use double instances

namespace {

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
  int classes = 6;
  int videos_per_class = 20;
  long frames = 40;
  long size = 32;
  std::uint64_t seed = 0;
  std::string out;
};

int run_gen_data(const GenDataArgs& args) {
  if (args.classes < 1 || args.classes > kMotionClassCount) {
    std::cerr << "gen-data: --classes must be in 1.." << kMotionClassCount << "\n";
    return 1;
  }
  fs::create_directories(args.out);
  std::ofstream index(fs::path(args.out) / kCorpusIndexName);
  if (!index) {
    std::cerr << "gen-data: cannot write index in " << args.out << "\n";
    return 2;
  }
  for (int cls = 0; cls < args.classes; ++cls) {
    for (int v = 0; v < args.videos_per_class; ++v) {
      std::uint64_t key = derive_key(args.seed, static_cast<std::uint64_t>(cls),
                                     static_cast<std::uint64_t>(v));
      RandomStream s(key);
      GlyphSpec spec;
      spec.motion_class = static_cast<MotionClass>(cls);
      spec.glyph = random_glyph(derive_key(key, 1));
      spec.x0 = static_cast<Index>(
          s.uniform_int(0, static_cast<std::uint64_t>(args.size - kGlyphSize)));
      spec.y0 = static_cast<Index>(
          s.uniform_int(1, static_cast<std::uint64_t>(args.size - kGlyphSize)));
      spec.speed = 1.0 + static_cast<double>(s.uniform_int(2, 2));  // 1 or 2 px/frame
      auto video = generate_glyph_video<Real>(spec, args.frames, args.size, args.size, key);
      char name[64];
      std::snprintf(name, sizeof name, "c%02d_v%03d.arfv", cls, v);
      write_packed_video(video, (fs::path(args.out) / name).string());
      index << name << "\t" << video.class_label << "\n";
    }
  }
  std::printf("gen-data: wrote %d videos to %s\n", args.classes * args.videos_per_class,
              args.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, bool resume, const Json& overrides) {
  ModelSpec spec = desk_preset();
  TrainConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) {
      std::cerr << "train: cannot open config " << config_path << "\n";
      return 2;
    }
    Json j = Json::parse(in);
    if (j.contains("model")) from_json(j.at("model"), spec);
    if (j.contains("train")) from_json(j.at("train"), cfg);
  }
  if (overrides.contains("model")) from_json(overrides.at("model"), spec);
  if (overrides.contains("train")) from_json(overrides.at("train"), cfg);
  cfg.validate();

  auto model = build_model<Real>(spec);
  auto corpus = load_corpus<Real>(data_dir);
  TrainerState<Real> state;
  std::string ckpt = (fs::path(out_dir) / "checkpoint.fckp").string();
  if (resume && fs::exists(ckpt)) {
    ModelSpec stored_spec;
    TrainConfig stored_cfg;
    state = load_checkpoint<Real>(ckpt, stored_spec, stored_cfg);
    check_structure(state, model, cfg.seed);
    std::printf("train: resuming from step %ld\n", state.step);
  } else {
    state = init_trainer(model, cfg);
  }
  std::printf("train: preset %s, %lld parameters, %ld steps, batch %d, lambda_cst %.3g\n",
              spec.preset.c_str(), static_cast<long long>(state.params.total_size()),
              cfg.steps, cfg.batch, spec.edm.lambda_cst);
  std::fflush(stdout);

  auto t0 = std::chrono::steady_clock::now();
  fit(model, corpus, spec, cfg, state, out_dir,
      [&](long step, double loss, double sigma_mean) {
        double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("step %6ld  loss %10.4f  sigma_mean %7.3f  [%.0fs]\n", step, loss,
                    sigma_mean, secs);
        std::fflush(stdout);
      });
  std::printf("train: done at step %ld, checkpoint at %s\n", state.step, ckpt.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

int run_predict(const std::string& ckpt_path, const std::string& context_path,
                int class_label, long total_frames, std::uint64_t seed,
                const std::string& out_path, const std::string& png_dir,
                int parallel_tuples) {
  ModelSpec spec;
  TrainConfig cfg;
  TrainerState<Real> state = load_checkpoint<Real>(ckpt_path, spec, cfg);
  auto model = build_model<Real>(spec);
  check_structure(state, model, cfg.seed);

  auto context_video = load_packed_video<Real>(context_path);
  if (class_label < 0) class_label = context_video.class_label;
  if (context_video.length() < model.tuples.context_len) {
    std::cerr << "predict: context video has " << context_video.length()
              << " frames, need " << model.tuples.context_len << "\n";
    return 2;
  }
  auto context = slice_context_tuple(context_video.frames, model.tuples);

  if (total_frames <= model.tuples.context_len ||
      (total_frames - model.tuples.context_len) % model.tuples.future_len != 0) {
    std::cerr << "predict: --total-frames minus the context length ("
              << model.tuples.context_len << ") must be a positive multiple of "
              << model.tuples.future_len << "\n";
    return 1;
  }

  Tensor<Real> predicted = predict_video(state.ema, model, context.frames, class_label,
                                         total_frames, seed, parallel_tuples);
  write_prediction(out_path, predicted, class_label, model.tuples.context_len, png_dir);
  std::printf("predict: wrote %lld frames to %s\n",
              static_cast<long long>(predicted.shape()[0]), out_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

int run_evaluate(const std::string& ckpt_path, const std::string& data_dir,
                 long total_frames, const std::string& out_dir, std::uint64_t seed,
                 Index overlap_shift, int threads) {
  ModelSpec spec;
  TrainConfig tcfg;
  TrainerState<Real> state = load_checkpoint<Real>(ckpt_path, spec, tcfg);
  auto model = build_model<Real>(spec);
  check_structure(state, model, tcfg.seed);
  auto corpus = load_corpus<Real>(data_dir);
  const TupleConfig& tc = model.tuples;
  if (total_frames <= tc.context_len ||
      (total_frames - tc.context_len) % tc.future_len != 0) {
    std::cerr << "evaluate: --total-frames minus " << tc.context_len
              << " must be a positive multiple of " << tc.future_len << "\n";
    return 1;
  }
  if (overlap_shift < 0 || overlap_shift >= tc.future_len) {
    std::cerr << "evaluate: --overlap-shift must be in 0.." << tc.future_len - 1 << "\n";
    return 1;
  }

  Index horizon = total_frames - tc.context_len;
  Index windows = horizon / tc.future_len;
  size_t n_videos = corpus.videos.size();
  std::vector<double> video_psnr(n_videos), video_ssim(n_videos);
  std::vector<double> video_overlap(n_videos, 0.0);
  std::vector<Tensor<Real>> predictions(n_videos);
  int workers = std::max(1, threads);
  std::vector<std::string> errors(static_cast<size_t>(workers));

  auto worker = [&](int w) {
    try {
      for (size_t v = static_cast<size_t>(w); v < n_videos; v += static_cast<size_t>(workers)) {
        const VideoSequence<Real>& video = corpus.videos[v];
        if (video.length() < total_frames)
          throw std::runtime_error("video " + std::to_string(v) +
                                   " is shorter than --total-frames");
        auto context = slice_context_tuple(video.frames, tc);
        std::uint64_t vseed = derive_key(seed, 0x6576ull /*'ev'*/, static_cast<std::uint64_t>(v));
        Tensor<Real> pred = predict_video(state.ema, model, context.frames,
                                          video.class_label, total_frames, vseed, 1);
        predictions[v] = quantized_unit(pred);

        Index fsz = video.channels() * video.height() * video.width();
        Tensor<Real> truth({horizon, video.channels(), video.height(), video.width()});
        truth.array() = video.frames.array().segment(tc.context_len * fsz, horizon * fsz);
        truth = quantized_unit(truth);

        double psnr_sum = 0, ssim_sum = 0;
        for (Index f = 0; f < horizon; ++f) {
          Tensor<Real> pf({video.channels(), video.height(), video.width()});
          Tensor<Real> tf(pf.shape());
          pf.array() = predictions[v].array().segment(f * fsz, fsz);
          tf.array() = truth.array().segment(f * fsz, fsz);
          psnr_sum += psnr(pf, tf);
          ssim_sum += ssim(pf, tf);
        }
        video_psnr[v] = psnr_sum / static_cast<double>(horizon);
        video_ssim[v] = ssim_sum / static_cast<double>(horizon);

        if (overlap_shift > 0 && windows >= 1) {
          // sample each shifted window and measure the squared discrepancy
          // against the base tiling on the shared absolute frames
          NoiseStreams streams = make_noise_streams(vseed);
          double total_sq = 0;
          long count = 0;
          for (Index n = 1; n <= windows; ++n) {
            Index start = initial_frame_index(n, tc);
            if (start + overlap_shift + tc.future_len > total_frames) break;
            Tensor<Real> shifted = predict_window(state.ema, model, context.frames,
                                                  start + overlap_shift,
                                                  video.class_label, streams);
            shifted = quantized_unit(shifted);
            Index overlap = tc.future_len - overlap_shift;
            for (Index j = 0; j < overlap * fsz; ++j) {
              Index base_off = (start - tc.context_len + overlap_shift) * fsz + j;
              double d = static_cast<double>(predictions[v][base_off]) -
                         static_cast<double>(shifted[j]);
              total_sq += d * d;
              ++count;
            }
          }
          video_overlap[v] = count > 0 ? total_sq / static_cast<double>(count) : 0.0;
        }
      }
    } catch (const std::exception& e) {
      errors[static_cast<size_t>(w)] = e.what();
    }
  };

  if (workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (!e.empty()) {
      std::cerr << "evaluate: " << e << "\n";
      return 2;
    }

  fs::create_directories(out_dir);
  FrameCurveAccumulator<Real> curves(tc.context_len);
  double mean_psnr = 0, mean_ssim = 0, mean_overlap = 0;
  for (size_t v = 0; v < n_videos; ++v) {
    const VideoSequence<Real>& video = corpus.videos[v];
    Index fsz = video.channels() * video.height() * video.width();
    Tensor<Real> truth({horizon, video.channels(), video.height(), video.width()});
    truth.array() = video.frames.array().segment(tc.context_len * fsz, horizon * fsz);
    curves.add(predictions[v], quantized_unit(truth));
    mean_psnr += video_psnr[v];
    mean_ssim += video_ssim[v];
    mean_overlap += video_overlap[v];
  }
  mean_psnr /= static_cast<double>(n_videos);
  mean_ssim /= static_cast<double>(n_videos);
  mean_overlap /= static_cast<double>(n_videos);

  write_curve_csv((fs::path(out_dir) / "curves.csv").string(), curves.rows());
  Json summary{{"videos", n_videos},
               {"total_frames", total_frames},
               {"mean_psnr", mean_psnr},
               {"mean_ssim", mean_ssim}};
  if (overlap_shift > 0) {
    summary["overlap_shift"] = overlap_shift;
    summary["overlap_mse"] = mean_overlap;
  }
  std::ofstream((fs::path(out_dir) / "summary.json").string()) << summary.dump(2) << "\n";
  std::printf("evaluate: %zu videos, mean PSNR %.3f dB, mean SSIM %.4f", n_videos,
              mean_psnr, mean_ssim);
  if (overlap_shift > 0) std::printf(", overlap MSE %.6g", mean_overlap);
  std::printf("\n");
  return 0;
}

// ---------------------------------------------------------------------------
// curves
// ---------------------------------------------------------------------------

int run_curves(const std::string& pred_dir, const std::string& true_dir,
               const std::string& out_csv) {
  auto pred = load_corpus<Real>(pred_dir);
  auto truth = load_corpus<Real>(true_dir);
  if (pred.videos.size() != truth.videos.size()) {
    std::cerr << "curves: directories hold different video counts\n";
    return 2;
  }
  Index pred_len = pred.videos[0].length();
  Index true_len = truth.videos[0].length();
  if (true_len <= pred_len) {
    std::cerr << "curves: true videos must include the context before the predicted span\n";
    return 2;
  }
  Index context_len = true_len - pred_len;  // predictions cover the tail
  FrameCurveAccumulator<Real> acc(context_len);
  for (size_t v = 0; v < pred.videos.size(); ++v) {
    const auto& pv = pred.videos[v];
    const auto& tv = truth.videos[v];
    if (pv.length() != pred_len || tv.length() != true_len) {
      std::cerr << "curves: inconsistent video lengths at entry " << v << "\n";
      return 2;
    }
    Index fsz = tv.channels() * tv.height() * tv.width();
    Tensor<Real> tail({pred_len, tv.channels(), tv.height(), tv.width()});
    tail.array() = tv.frames.array().segment(context_len * fsz, pred_len * fsz);
    acc.add(quantized_unit(pv.frames), quantized_unit(tail));
  }
  write_curve_csv(out_csv, acc.rows());
  std::printf("curves: %d videos, %zu rows -> %s\n", acc.video_count(), acc.rows().size(),
              out_csv.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tuple-parallel video prediction (diffusion over future frame windows)"};
  app.require_subcommand(1);

  GenDataArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic glyph corpus");
  gen_cmd->add_option("--classes", gen.classes, "motion classes (1..6)")->capture_default_str();
  gen_cmd->add_option("--videos-per-class", gen.videos_per_class)->capture_default_str();
  gen_cmd->add_option("--frames", gen.frames)->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "square frame size")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "output directory")->required();

  std::string train_config, train_data, train_out, train_preset;
  bool train_resume = false;
  long train_steps = -1;
  double train_lambda = -1;
  long long train_seed = -1;
  int train_threads = -1;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--config", train_config, "JSON config (model/train sections)");
  train_cmd->add_option("--data", train_data, "corpus directory")->required();
  train_cmd->add_option("--out", train_out, "output directory (checkpoint + log)")->required();
  train_cmd->add_flag("--resume", train_resume, "resume from the checkpoint in --out");
  train_cmd->add_option("--preset", train_preset, "model preset: desk, paper or tiny");
  train_cmd->add_option("--steps", train_steps, "override training steps");
  train_cmd->add_option("--lambda-cst", train_lambda, "override consistency weight");
  train_cmd->add_option("--seed", train_seed, "override seed");
  train_cmd->add_option("--threads", train_threads, "batch worker threads");

  std::string pr_ckpt, pr_context, pr_out, pr_png;
  int pr_class = -1, pr_parallel = 1;
  long pr_total = 30;
  std::uint64_t pr_seed = 0;
  CLI::App* pr_cmd = app.add_subcommand("predict", "predict future frames from a context video");
  pr_cmd->add_option("--checkpoint", pr_ckpt)->required();
  pr_cmd->add_option("--context", pr_context, "input .arfv (first F_p frames are used)")
      ->required();
  pr_cmd->add_option("--class", pr_class, "class label (default: from the video header)");
  pr_cmd->add_option("--total-frames", pr_total)->capture_default_str();
  pr_cmd->add_option("--seed", pr_seed)->capture_default_str();
  pr_cmd->add_option("--out", pr_out, "output .arfv path")->required();
  pr_cmd->add_option("--png-dir", pr_png, "also write frame_%04d.png here");
  pr_cmd->add_option("--parallel-tuples", pr_parallel, "windows sampled concurrently")
      ->capture_default_str();

  std::string ev_ckpt, ev_data, ev_out;
  long ev_total = 30;
  std::uint64_t ev_seed = 0;
  long ev_overlap = 0;
  int ev_threads = 1;
  CLI::App* ev_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on a corpus");
  ev_cmd->add_option("--checkpoint", ev_ckpt)->required();
  ev_cmd->add_option("--data", ev_data, "held-out corpus directory")->required();
  ev_cmd->add_option("--total-frames", ev_total)->capture_default_str();
  ev_cmd->add_option("--out", ev_out, "output directory")->required();
  ev_cmd->add_option("--seed", ev_seed)->capture_default_str();
  ev_cmd->add_option("--overlap-shift", ev_overlap,
                     "also measure cross-window consistency at this shift (0 = off)")
      ->capture_default_str();
  ev_cmd->add_option("--threads", ev_threads)->capture_default_str();

  std::string cv_pred, cv_true, cv_out;
  CLI::App* cv_cmd =
      app.add_subcommand("curves", "frame-wise metric curves from stored videos");
  cv_cmd->add_option("--pred-dir", cv_pred)->required();
  cv_cmd->add_option("--true-dir", cv_true)->required();
  cv_cmd->add_option("--out-csv", cv_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) {
      Json overrides;
      if (!train_preset.empty()) overrides["model"]["preset"] = train_preset;
      if (train_lambda >= 0) overrides["model"]["edm"]["lambda_cst"] = train_lambda;
      if (train_steps >= 0) overrides["train"]["steps"] = train_steps;
      if (train_seed >= 0) overrides["train"]["seed"] = train_seed;
      if (train_threads > 0) overrides["train"]["threads"] = train_threads;
      return run_train(train_config, train_data, train_out, train_resume, overrides);
    }
    if (*pr_cmd)
      return run_predict(pr_ckpt, pr_context, pr_class, pr_total, pr_seed, pr_out, pr_png,
                         pr_parallel);
    if (*ev_cmd)
      return run_evaluate(ev_ckpt, ev_data, ev_total, ev_out, ev_seed, ev_overlap,
                          ev_threads);
    if (*cv_cmd) return run_curves(cv_pred, cv_true, cv_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
