#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "framecast/diffusion.hpp"
#include "framecast/png_io.hpp"

namespace framecast {

// Inference without rollout: every future window is sampled directly from
// the observed context window. A predicted frame never re-enters the model;
// windows only share the read-only weights, the context, and the
// counter-keyed noise streams, which is why evaluating them in any order or
// in parallel yields identical bytes.

/// Samples the F_f-frame window starting at an arbitrary absolute index.
/// Pure function of its arguments: the motion feature is computed once (it
/// does not depend on the noise level) and the initial noise comes from the
/// video-level streams keyed by absolute frame index, so two windows agree
/// on the noise of any frame they share.
template <typename S>
Tensor<S> predict_window(const Parameters<S>& params, const VideoModel<S>& model,
                         const Tensor<S>& context, Index start, int class_label,
                         const NoiseStreams& streams) {
  if (context.shape() !=
      Shape{model.tuples.context_len, model.denoiser.channels, model.denoiser.height,
            model.denoiser.width})
    throw std::invalid_argument("predict_window: context shape mismatch");

  Tensor<S> motion;
  {
    Graph<S> g;
    g.set_inference(true);
    NodeId m0 = extract_motion(g, params, model.motion,
                               frame_differences(g, g.constant(context)));
    NodeId mn = predict_motion(g, params, model.motion, m0, start, class_label);
    motion = g.val(mn);
  }

  DenoiseFn<S> fn = [&](const Tensor<S>& x, double sigma) {
    Graph<S> g;
    g.set_inference(true);
    NodeId out = denoise_with_motion(g, params, model, g.constant(x), g.constant(context),
                                     g.constant(motion), sigma, start);
    return g.val(out);
  };

  Shape frame_shape{model.denoiser.channels, model.denoiser.height, model.denoiser.width};
  Tensor<S> init = mixed_noise<S>(model.tuples.future_len, frame_shape,
                                  model.edm.alpha_mix, streams, start);
  try {
    return lms_sample(fn, init, model.edm);
  } catch (const std::exception& e) {
    throw std::runtime_error("window at frame " + std::to_string(start) + ": " + e.what());
  }
}

/// Samples window n (n >= 1) of the regular tiling.
template <typename S>
Tensor<S> predict_tuple(const Parameters<S>& params, const VideoModel<S>& model,
                        const Tensor<S>& context, Index n, int class_label,
                        const NoiseStreams& streams) {
  return predict_window(params, model, context, initial_frame_index(n, model.tuples),
                        class_label, streams);
}

/// Predicts all (total_frames - F_p) / F_f windows independently and
/// concatenates them. parallel_tuples > 1 samples windows concurrently;
/// the output is identical for any worker count or evaluation order.
template <typename S>
Tensor<S> predict_video(const Parameters<S>& params, const VideoModel<S>& model,
                        const Tensor<S>& context, int class_label, Index total_frames,
                        std::uint64_t seed, int parallel_tuples = 1) {
  const TupleConfig& tc = model.tuples;
  if (total_frames <= tc.context_len)
    throw std::invalid_argument("total_frames must exceed the context length");
  if ((total_frames - tc.context_len) % tc.future_len != 0)
    throw std::invalid_argument(
        "total_frames - " + std::to_string(tc.context_len) +
        " must be divisible by " + std::to_string(tc.future_len) + ", got " +
        std::to_string(total_frames - tc.context_len));
  Index windows = (total_frames - tc.context_len) / tc.future_len;
  NoiseStreams streams = make_noise_streams(seed);

  Index fsz = model.denoiser.channels * model.denoiser.height * model.denoiser.width;
  Tensor<S> out({total_frames - tc.context_len, model.denoiser.channels,
                 model.denoiser.height, model.denoiser.width});

  int workers = std::max(1, std::min<int>(parallel_tuples, static_cast<int>(windows)));
  std::vector<std::string> errors(static_cast<size_t>(workers));
  auto run = [&](int w) {
    try {
      for (Index n = 1 + w; n <= windows; n += workers) {
        Tensor<S> window = predict_tuple(params, model, context, n, class_label, streams);
        out.array().segment((n - 1) * tc.future_len * fsz, tc.future_len * fsz) =
            window.array();
      }
    } catch (const std::exception& e) {
      errors[static_cast<size_t>(w)] = e.what();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error(e);
  return out;
}

/// Writes a predicted video as .arfv plus an optional frame_%04d.png
/// sequence (frame numbering continues the absolute indexing, so frame
/// F_p is the first predicted one).
template <typename S>
void write_prediction(const std::string& arfv_path, const Tensor<S>& predicted,
                      int class_label, Index first_frame_index,
                      const std::string& png_dir = "") {
  VideoSequence<S> video;
  video.frames = predicted;
  video.class_label = class_label;
  write_packed_video(video, arfv_path);
  if (!png_dir.empty()) {
    std::filesystem::create_directories(png_dir);
    const Shape& s = predicted.shape();
    for (Index f = 0; f < s[0]; ++f) {
      Tensor<S> frame({s[1], s[2], s[3]});
      frame.array() = predicted.array().segment(f * s[1] * s[2] * s[3], s[1] * s[2] * s[3]);
      char name[32];
      std::snprintf(name, sizeof name, "frame_%04lld.png",
                    static_cast<long long>(first_frame_index + f));
      write_frame_png((std::filesystem::path(png_dir) / name).string(), frame);
    }
  }
}

}  // namespace framecast
