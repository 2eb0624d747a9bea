#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "framecast/config.hpp"
#include "framecast/diffusion.hpp"

namespace framecast {

// ---------------------------------------------------------------------------
// optimizer and averaged weights
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay Adam over a parameter tree.
template <typename S>
struct AdamW {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  Parameters<S> m, v;
  long t = 0;

  void init(const Parameters<S>& params) {
    m = params.zeros_like();
    v = params.zeros_like();
    t = 0;
  }

  void step(Parameters<S>& params, const Parameters<S>& grads) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (int i = 0; i < params.count(); ++i) {
      auto& mi = m[i].array();
      auto& vi = v[i].array();
      const auto& gi = grads[i].array();
      auto& pi = params[i].array();
      mi = static_cast<S>(beta1) * mi + static_cast<S>(1.0 - beta1) * gi;
      vi = static_cast<S>(beta2) * vi + static_cast<S>(1.0 - beta2) * gi * gi;
      pi -= static_cast<S>(lr) *
            ((mi / static_cast<S>(bc1)) /
                 ((vi / static_cast<S>(bc2)).sqrt() + static_cast<S>(eps)) +
             static_cast<S>(weight_decay) * pi);
    }
  }
};

template <typename S>
void ema_update(Parameters<S>& ema, const Parameters<S>& params, double decay) {
  for (int i = 0; i < params.count(); ++i)
    ema[i].array() = static_cast<S>(decay) * ema[i].array() +
                     static_cast<S>(1.0 - decay) * params[i].array();
}

template <typename S>
double global_grad_norm(const Parameters<S>& grads) {
  double total = 0;
  for (int i = 0; i < grads.count(); ++i)
    total += static_cast<double>((grads[i].array() * grads[i].array()).sum());
  return std::sqrt(total);
}

// ---------------------------------------------------------------------------
// training state and step
// ---------------------------------------------------------------------------

template <typename S>
struct TrainerState {
  Parameters<S> params;
  Parameters<S> ema;
  AdamW<S> opt;
  long step = 0;
};

template <typename S>
TrainerState<S> init_trainer(const VideoModel<S>& model, const TrainConfig& cfg) {
  cfg.validate();
  TrainerState<S> state;
  init_model_params(state.params, model, cfg.seed);
  state.ema = state.params;
  state.opt.lr = cfg.lr;
  state.opt.beta1 = cfg.beta1;
  state.opt.beta2 = cfg.beta2;
  state.opt.eps = cfg.adam_eps;
  state.opt.weight_decay = cfg.weight_decay;
  state.opt.init(state.params);
  return state;
}

struct StepStats {
  double loss = 0;
  double sigma_mean = 0;
};

/// One optimization step: samples a batch keyed by (seed, step), draws one
/// sigma and one noise pair per sample, accumulates gradients of the mean
/// total loss, clips, applies AdamW and refreshes the EMA weights.
/// Workers split the batch by sample index and their buffers merge in
/// worker order, so a run is reproducible for a fixed thread count.
template <typename S>
StepStats train_step(const VideoModel<S>& model, const Corpus<S>& corpus,
                     const TrainConfig& cfg, TrainerState<S>& state) {
  std::uint64_t step_key = derive_key(cfg.seed, 0x73746570ull /*'step'*/,
                                      static_cast<std::uint64_t>(state.step));
  auto batch = sample_training_batch(corpus, model.tuples, cfg.batch, step_key);

  std::vector<double> sigmas(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    RandomStream stream(derive_key(step_key, 0x7367ull /*'sg'*/, static_cast<std::uint64_t>(i)));
    sigmas[i] = sample_training_sigma(stream, 0, model.edm);
  }

  int workers = std::min<int>(cfg.threads, static_cast<int>(batch.size()));
  std::vector<Parameters<S>> worker_grads;
  std::vector<double> worker_loss(static_cast<size_t>(workers), 0.0);
  std::vector<std::string> worker_error(static_cast<size_t>(workers));
  worker_grads.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) worker_grads.push_back(state.params.zeros_like());

  auto run_worker = [&](int w) {
    try {
      for (size_t i = static_cast<size_t>(w); i < batch.size(); i += static_cast<size_t>(workers)) {
        const TrainingSample<S>& sample = batch[i];
        Shape noise_shape = sample.future.frames.shape();
        RandomStream ea(derive_key(step_key, 0x6561ull, static_cast<std::uint64_t>(i)));
        RandomStream eb(derive_key(step_key, 0x6562ull, static_cast<std::uint64_t>(i)));
        Tensor<S> eps = ea.normal_tensor<S>(noise_shape);
        Tensor<S> eps_shifted = eb.normal_tensor<S>(noise_shape);

        Graph<S> g;
        NodeId loss = loss_total(g, state.params, model, sample, sigmas[i], eps, eps_shifted);
        double value = static_cast<double>(g.val(loss)[0]);
        if (!std::isfinite(value))
          throw std::runtime_error(
              "non-finite loss at step " + std::to_string(state.step) + " (sigma " +
              std::to_string(sigmas[i]) + ", video " + std::to_string(sample.video_index) +
              ", window start " + std::to_string(sample.start_index) + ")");
        worker_loss[static_cast<size_t>(w)] += value;
        g.backward(loss);
        g.add_param_grads(state.params, worker_grads[static_cast<size_t>(w)]);
      }
    } catch (const std::exception& e) {
      worker_error[static_cast<size_t>(w)] = e.what();
    }
  };

  if (workers == 1) {
    run_worker(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(run_worker, w);
    for (auto& t : threads) t.join();
  }
  for (const auto& err : worker_error)
    if (!err.empty()) throw std::runtime_error(err);

  Parameters<S>& grads = worker_grads[0];
  for (int w = 1; w < workers; ++w)
    for (int i = 0; i < grads.count(); ++i)
      grads[i].array() += worker_grads[static_cast<size_t>(w)][i].array();

  double inv_batch = 1.0 / static_cast<double>(batch.size());
  for (int i = 0; i < grads.count(); ++i) grads[i].array() *= static_cast<S>(inv_batch);

  if (cfg.grad_clip > 0) {
    double norm = global_grad_norm(grads);
    if (norm > cfg.grad_clip) {
      S factor = static_cast<S>(cfg.grad_clip / norm);
      for (int i = 0; i < grads.count(); ++i) grads[i].array() *= factor;
    }
  }

  state.opt.step(state.params, grads);
  ema_update(state.ema, state.params, cfg.ema_decay);
  ++state.step;

  StepStats stats;
  double loss_sum = 0;
  for (double l : worker_loss) loss_sum += l;
  stats.loss = loss_sum * inv_batch;
  for (double s : sigmas) stats.sigma_mean += s;
  stats.sigma_mean /= static_cast<double>(sigmas.size());
  return stats;
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------
//
// Single file: magic "FCKP", u32 version, u64 manifest length, manifest JSON
// (model spec, train config, step, optimizer step count, array directory
// with name/dtype/shape/offset), then raw little-endian array data.

namespace detail {

template <typename S>
const char* dtype_name() {
  if constexpr (std::is_same_v<S, float>) return "f32";
  else return "f64";
}

template <typename S>
void append_group(Json& arrays, std::string prefix, const Parameters<S>& tree,
                  std::vector<const Tensor<S>*>& order, std::uint64_t& offset) {
  for (int i = 0; i < tree.count(); ++i) {
    const Tensor<S>& t = tree[i];
    Json entry;
    entry["name"] = prefix + tree.name(i);
    entry["dtype"] = dtype_name<S>();
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    arrays.push_back(entry);
    order.push_back(&t);
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(S);
  }
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const TrainerState<S>& state,
                     const ModelSpec& spec, const TrainConfig& cfg) {
  Json manifest;
  manifest["format"] = "framecast-checkpoint";
  manifest["step"] = state.step;
  manifest["opt_t"] = state.opt.t;
  manifest["model"] = spec;
  manifest["train"] = cfg;

  Json arrays = Json::array();
  std::vector<const Tensor<S>*> order;
  std::uint64_t offset = 0;
  detail::append_group(arrays, "params/", state.params, order, offset);
  detail::append_group(arrays, "ema/", state.ema, order, offset);
  detail::append_group(arrays, "opt_m/", state.opt.m, order, offset);
  detail::append_group(arrays, "opt_v/", state.opt.v, order, offset);
  manifest["arrays"] = arrays;

  std::string mjson = manifest.dump();
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
    out.write("FCKP", 4);
    std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 4);
    std::uint64_t mlen = mjson.size();
    out.write(reinterpret_cast<const char*>(&mlen), 8);
    out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    for (const Tensor<S>* t : order)
      out.write(reinterpret_cast<const char*>(t->data()),
                static_cast<std::streamsize>(t->size() * sizeof(S)));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename S>
TrainerState<S> load_checkpoint(const std::string& path, ModelSpec& spec_out,
                                TrainConfig& cfg_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "FCKP")
    throw std::runtime_error(path + ": not a checkpoint file");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), 8);
  std::string mjson(mlen, '\0');
  in.read(mjson.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw std::runtime_error(path + ": truncated manifest");

  Json manifest = Json::parse(mjson);
  spec_out = manifest.at("model").get<ModelSpec>();
  cfg_out = manifest.at("train").get<TrainConfig>();

  TrainerState<S> state;
  state.step = manifest.at("step").get<long>();
  state.opt.t = manifest.at("opt_t").get<long>();
  state.opt.lr = cfg_out.lr;
  state.opt.beta1 = cfg_out.beta1;
  state.opt.beta2 = cfg_out.beta2;
  state.opt.eps = cfg_out.adam_eps;
  state.opt.weight_decay = cfg_out.weight_decay;

  std::uint64_t data_start = 16 + mlen;
  auto read_group = [&](const std::string& prefix, Parameters<S>& tree) {
    for (const Json& entry : manifest.at("arrays")) {
      std::string name = entry.at("name").get<std::string>();
      if (name.rfind(prefix, 0) != 0) continue;
      if (entry.at("dtype").get<std::string>() != detail::dtype_name<S>())
        throw std::runtime_error(path + ": dtype mismatch for " + name + " (expected " +
                                 detail::dtype_name<S>() + ")");
      Shape shape = entry.at("shape").get<Shape>();
      Tensor<S> t(shape);
      in.seekg(static_cast<std::streamoff>(data_start + entry.at("offset").get<std::uint64_t>()));
      in.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(S)));
      if (!in) throw std::runtime_error(path + ": truncated array data at " + name);
      tree.add(name.substr(prefix.size()), std::move(t));
    }
  };
  read_group("params/", state.params);
  read_group("ema/", state.ema);
  read_group("opt_m/", state.opt.m);
  read_group("opt_v/", state.opt.v);
  return state;
}

/// Raises when a checkpoint's parameter tree does not match the model built
/// from the requested spec (e.g. loading weights across presets).
template <typename S>
void check_structure(const TrainerState<S>& state, const VideoModel<S>& model,
                     std::uint64_t seed) {
  Parameters<S> expected;
  init_model_params(expected, model, seed);
  if (!state.params.same_structure(expected))
    throw std::runtime_error(
        "checkpoint structure mismatch: the stored parameter tree does not match "
        "the requested model configuration");
}

// ---------------------------------------------------------------------------
// fit loop
// ---------------------------------------------------------------------------

using ProgressFn = std::function<void(long step, double loss, double sigma_mean)>;

/// Runs train_step for cfg.steps, appending one CSV row
/// (step, loss, sigma_mean) averaged over each log window and writing an
/// atomic checkpoint every checkpoint_interval steps. Resumes seamlessly
/// when `state` already carries progress.
template <typename S>
void fit(const VideoModel<S>& model, const Corpus<S>& corpus, const ModelSpec& spec,
         const TrainConfig& cfg, TrainerState<S>& state, const std::string& out_dir,
         const ProgressFn& progress = {}) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  std::string log_path = (std::filesystem::path(out_dir) / "train_log.csv").string();
  std::string ckpt_path = (std::filesystem::path(out_dir) / "checkpoint.fckp").string();

  bool fresh_log = state.step == 0 || !std::filesystem::exists(log_path);
  std::ofstream log(log_path, fresh_log ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot open log: " + log_path);
  if (fresh_log) log << "step,loss,sigma_mean\n";

  double window_loss = 0, window_sigma = 0;
  long window_count = 0;
  while (state.step < cfg.steps) {
    StepStats stats = train_step(model, corpus, cfg, state);
    window_loss += stats.loss;
    window_sigma += stats.sigma_mean;
    ++window_count;
    if (state.step % cfg.log_interval == 0) {
      log << state.step << "," << window_loss / static_cast<double>(window_count) << ","
          << window_sigma / static_cast<double>(window_count) << "\n";
      log.flush();
      if (progress)
        progress(state.step, window_loss / static_cast<double>(window_count),
                 window_sigma / static_cast<double>(window_count));
      window_loss = window_sigma = 0;
      window_count = 0;
    }
    if (state.step % cfg.checkpoint_interval == 0 || state.step == cfg.steps)
      save_checkpoint(ckpt_path, state, spec, cfg);
  }
  save_checkpoint(ckpt_path, state, spec, cfg);
}

}  // namespace framecast
