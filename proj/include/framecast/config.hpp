#pragma once

#include <json.hpp>

#include <stdexcept>
#include <string>

#include "framecast/diffusion.hpp"

namespace framecast {

using Json = nlohmann::json;

/// Everything that defines a model, minus its weights.
struct ModelSpec {
  std::string preset = "desk";
  MotionConfig motion;
  DenoiserConfig denoiser;
  EdmConfig edm;
};

struct TrainConfig {
  long steps = 10000;
  int batch = 8;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double ema_decay = 0.995;
  double grad_clip = 1.0;  // 0 disables clipping
  long checkpoint_interval = 1000;
  long log_interval = 100;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    if (steps < 1 || batch < 1) throw std::invalid_argument("steps and batch must be >= 1");
    if (!(ema_decay > 0 && ema_decay < 1))
      throw std::invalid_argument("ema_decay must be in (0, 1)");
    if (threads < 1) throw std::invalid_argument("threads must be >= 1");
    if (log_interval < 1 || checkpoint_interval < 1)
      throw std::invalid_argument("intervals must be >= 1");
  }
};

/// CPU-trainable default: ~1.9M parameters at 32x32.
inline ModelSpec desk_preset() {
  ModelSpec spec;
  spec.preset = "desk";
  return spec;
}

/// Full-size layout (64x64 grayscale; 2 neighborhood + 10 global blocks at
/// widths 256/512). Kept as a named preset; not trainable on a desk CPU.
inline ModelSpec paper_preset() {
  ModelSpec spec;
  spec.preset = "paper";
  spec.motion.height = 64;
  spec.motion.width = 64;
  spec.motion.d_c = 128;
  spec.denoiser.height = 64;
  spec.denoiser.width = 64;
  spec.denoiser.levels = {{BlockKind::kNeighborhood, 2, 256}, {BlockKind::kGlobal, 10, 512}};
  spec.denoiser.cond_dim = 128;
  spec.denoiser.motion_feat_h = 16;
  spec.denoiser.motion_feat_w = 16;
  return spec;
}

/// Minimal legal model for fast functional tests.
inline ModelSpec tiny_preset() {
  ModelSpec spec;
  spec.preset = "tiny";
  spec.motion.d_m = 4;
  spec.motion.d_c = 8;
  spec.motion.heads = 2;
  spec.motion.blocks = 1;
  spec.motion.height = 16;
  spec.motion.width = 16;
  spec.denoiser.patch = 4;
  spec.denoiser.levels = {{BlockKind::kGlobal, 1, 16}};
  spec.denoiser.d_m = 4;
  spec.denoiser.context_len = 4;
  spec.denoiser.future_len = 3;
  spec.denoiser.height = 16;
  spec.denoiser.width = 16;
  spec.denoiser.cond_dim = 8;
  spec.denoiser.motion_feat_h = 4;
  spec.denoiser.motion_feat_w = 4;
  return spec;
}

inline ModelSpec preset_by_name(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  if (name == "tiny") return tiny_preset();
  throw std::invalid_argument("unknown preset: " + name +
                              " (expected desk, paper or tiny)");
}

template <typename S>
VideoModel<S> build_model(const ModelSpec& spec) {
  return make_video_model<S>(spec.motion, spec.denoiser, spec.edm);
}

// --- JSON mappings (field names mirror the config structs) ---

inline void to_json(Json& j, const LevelSpec& l) {
  j = Json{{"kind", l.kind == BlockKind::kNeighborhood ? "neighborhood" : "global"},
           {"blocks", l.blocks},
           {"width", l.width}};
}
inline void from_json(const Json& j, LevelSpec& l) {
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "neighborhood") l.kind = BlockKind::kNeighborhood;
  else if (kind == "global") l.kind = BlockKind::kGlobal;
  else throw std::invalid_argument("level kind must be neighborhood or global");
  j.at("blocks").get_to(l.blocks);
  j.at("width").get_to(l.width);
}

namespace detail {
template <typename T>
void get_if_present(const Json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}
}  // namespace detail

inline void to_json(Json& j, const MotionConfig& c) {
  j = Json{{"d_m", c.d_m},       {"d_c", c.d_c},
           {"heads", c.heads},   {"blocks", c.blocks},
           {"num_classes", c.num_classes}, {"channels", c.channels},
           {"height", c.height}, {"width", c.width},
           {"ff_expand", c.ff_expand}};
}
inline void from_json(const Json& j, MotionConfig& c) {
  detail::get_if_present(j, "d_m", c.d_m);
  detail::get_if_present(j, "d_c", c.d_c);
  detail::get_if_present(j, "heads", c.heads);
  detail::get_if_present(j, "blocks", c.blocks);
  detail::get_if_present(j, "num_classes", c.num_classes);
  detail::get_if_present(j, "channels", c.channels);
  detail::get_if_present(j, "height", c.height);
  detail::get_if_present(j, "width", c.width);
  detail::get_if_present(j, "ff_expand", c.ff_expand);
}

inline void to_json(Json& j, const DenoiserConfig& c) {
  j = Json{{"patch", c.patch},
           {"levels", c.levels},
           {"neighborhood_kernel", c.neighborhood_kernel},
           {"d_m", c.d_m},
           {"context_len", c.context_len},
           {"future_len", c.future_len},
           {"channels", c.channels},
           {"height", c.height},
           {"width", c.width},
           {"cond_dim", c.cond_dim},
           {"head_dim", c.head_dim},
           {"ff_expand", c.ff_expand},
           {"motion_feat_h", c.motion_feat_h},
           {"motion_feat_w", c.motion_feat_w}};
}
inline void from_json(const Json& j, DenoiserConfig& c) {
  detail::get_if_present(j, "patch", c.patch);
  if (j.contains("levels")) c.levels = j.at("levels").get<std::vector<LevelSpec>>();
  detail::get_if_present(j, "neighborhood_kernel", c.neighborhood_kernel);
  detail::get_if_present(j, "d_m", c.d_m);
  detail::get_if_present(j, "context_len", c.context_len);
  detail::get_if_present(j, "future_len", c.future_len);
  detail::get_if_present(j, "channels", c.channels);
  detail::get_if_present(j, "height", c.height);
  detail::get_if_present(j, "width", c.width);
  detail::get_if_present(j, "cond_dim", c.cond_dim);
  detail::get_if_present(j, "head_dim", c.head_dim);
  detail::get_if_present(j, "ff_expand", c.ff_expand);
  detail::get_if_present(j, "motion_feat_h", c.motion_feat_h);
  detail::get_if_present(j, "motion_feat_w", c.motion_feat_w);
}

inline void to_json(Json& j, const EdmConfig& c) {
  j = Json{{"sigma_min", c.sigma_min}, {"sigma_max", c.sigma_max},
           {"sigma_data", c.sigma_data}, {"p_mean", c.p_mean},
           {"p_std", c.p_std},         {"rho", c.rho},
           {"steps", c.steps},         {"lms_order", c.lms_order},
           {"lambda_cst", c.lambda_cst}, {"alpha_mix", c.alpha_mix}};
}
inline void from_json(const Json& j, EdmConfig& c) {
  detail::get_if_present(j, "sigma_min", c.sigma_min);
  detail::get_if_present(j, "sigma_max", c.sigma_max);
  detail::get_if_present(j, "sigma_data", c.sigma_data);
  detail::get_if_present(j, "p_mean", c.p_mean);
  detail::get_if_present(j, "p_std", c.p_std);
  detail::get_if_present(j, "rho", c.rho);
  detail::get_if_present(j, "steps", c.steps);
  detail::get_if_present(j, "lms_order", c.lms_order);
  detail::get_if_present(j, "lambda_cst", c.lambda_cst);
  detail::get_if_present(j, "alpha_mix", c.alpha_mix);
}

inline void to_json(Json& j, const ModelSpec& s) {
  j = Json{{"preset", s.preset},
           {"motion", s.motion},
           {"denoiser", s.denoiser},
           {"edm", s.edm}};
}
inline void from_json(const Json& j, ModelSpec& s) {
  if (j.contains("preset")) {
    s = preset_by_name(j.at("preset").get<std::string>());
  }
  if (j.contains("motion")) from_json(j.at("motion"), s.motion);
  if (j.contains("denoiser")) from_json(j.at("denoiser"), s.denoiser);
  if (j.contains("edm")) from_json(j.at("edm"), s.edm);
}

inline void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"steps", c.steps},
           {"batch", c.batch},
           {"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"ema_decay", c.ema_decay},
           {"grad_clip", c.grad_clip},
           {"checkpoint_interval", c.checkpoint_interval},
           {"log_interval", c.log_interval},
           {"seed", c.seed},
           {"threads", c.threads}};
}
inline void from_json(const Json& j, TrainConfig& c) {
  detail::get_if_present(j, "steps", c.steps);
  detail::get_if_present(j, "batch", c.batch);
  detail::get_if_present(j, "lr", c.lr);
  detail::get_if_present(j, "weight_decay", c.weight_decay);
  detail::get_if_present(j, "beta1", c.beta1);
  detail::get_if_present(j, "beta2", c.beta2);
  detail::get_if_present(j, "adam_eps", c.adam_eps);
  detail::get_if_present(j, "ema_decay", c.ema_decay);
  detail::get_if_present(j, "grad_clip", c.grad_clip);
  detail::get_if_present(j, "checkpoint_interval", c.checkpoint_interval);
  detail::get_if_present(j, "log_interval", c.log_interval);
  detail::get_if_present(j, "seed", c.seed);
  detail::get_if_present(j, "threads", c.threads);
}

}  // namespace framecast
