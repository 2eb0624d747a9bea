#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "framecast/dataset.hpp"
#include "framecast/denoiser.hpp"
#include "framecast/motion.hpp"
#include "framecast/tuples.hpp"

namespace framecast {

// ---------------------------------------------------------------------------
// noise-level bookkeeping
// ---------------------------------------------------------------------------

struct EdmConfig {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double sigma_data = 0.5;
  double p_mean = -1.2;  // training sigma: exp(N(p_mean, p_std^2)), clamped
  double p_std = 1.2;
  double rho = 7.0;      // sampler schedule exponent
  int steps = 50;        // T
  int lms_order = 4;
  double lambda_cst = 0.1;
  double alpha_mix = 1.0;

  void validate() const {
    if (!(sigma_min > 0 && sigma_min < sigma_max))
      throw std::invalid_argument("need 0 < sigma_min < sigma_max");
    if (sigma_data <= 0) throw std::invalid_argument("sigma_data must be > 0");
    if (steps < 2) throw std::invalid_argument("sampler needs at least 2 steps");
    if (lms_order < 1 || lms_order > 4)
      throw std::invalid_argument("lms_order must be in 1..4");
    if (lambda_cst < 0 || alpha_mix < 0)
      throw std::invalid_argument("lambda_cst and alpha_mix must be >= 0");
  }
};

struct PreconditionCoeffs {
  double c_skip, c_out, c_in, c_noise;
};

inline PreconditionCoeffs precondition_coeffs(double sigma, const EdmConfig& cfg) {
  if (sigma <= 0) throw std::domain_error("precondition_coeffs: sigma must be > 0");
  double sd = cfg.sigma_data;
  double s2 = sigma * sigma + sd * sd;
  return {sd * sd / s2, sigma * sd / std::sqrt(s2), 1.0 / std::sqrt(s2),
          std::log(sigma) / 4.0};
}

/// Loss weight: the reciprocal of c_out^2, so the effective objective is a
/// unit-weight regression in raw network output space at every noise level.
inline double loss_weight(double sigma, const EdmConfig& cfg) {
  double sd = cfg.sigma_data;
  return (sigma * sigma + sd * sd) / ((sigma * sd) * (sigma * sd));
}

inline double sample_training_sigma(const RandomStream& stream, std::uint64_t index,
                                    const EdmConfig& cfg) {
  double sigma = std::exp(cfg.p_mean + cfg.p_std * stream.normal(index));
  return std::min(cfg.sigma_max, std::max(cfg.sigma_min, sigma));
}

/// Strictly decreasing sigma ladder sigma_0 = sigma_max .. sigma_{T-1} =
/// sigma_min, with a terminal 0 appended.
inline std::vector<double> sampler_schedule(const EdmConfig& cfg) {
  cfg.validate();
  std::vector<double> sigmas;
  sigmas.reserve(static_cast<size_t>(cfg.steps) + 1);
  double inv_rho = 1.0 / cfg.rho;
  double hi = std::pow(cfg.sigma_max, inv_rho);
  double lo = std::pow(cfg.sigma_min, inv_rho);
  for (int i = 0; i < cfg.steps; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(cfg.steps - 1);
    sigmas.push_back(std::pow(hi + t * (lo - hi), cfg.rho));
  }
  sigmas.push_back(0.0);
  return sigmas;
}

template <typename S>
Tensor<S> add_noise(const Tensor<S>& frames, double sigma, const Tensor<S>& eps) {
  if (!same_shape(frames, eps))
    throw std::invalid_argument("add_noise: noise shape mismatch");
  if (sigma <= 0) throw std::domain_error("add_noise: sigma must be > 0");
  Tensor<S> out(frames.shape());
  out.array() = frames.array() + static_cast<S>(sigma) * eps.array();
  return out;
}

// ---------------------------------------------------------------------------
// mixed noise
// ---------------------------------------------------------------------------

/// Keys for the counter-based noise streams of one predicted video. The
/// shared component is drawn once per video; per-frame components are keyed
/// by absolute frame index, so any tuple covering a frame regenerates the
/// identical noise regardless of evaluation order or thread.
struct NoiseStreams {
  std::uint64_t shared_key = 0;
  std::uint64_t frame_key = 0;
};

inline NoiseStreams make_noise_streams(std::uint64_t seed) {
  return {derive_key(seed, 0x7368617265ull /*'share'*/),
          derive_key(seed, 0x6672616D65ull /*'frame'*/)};
}

/// Unit-marginal noise with cross-frame correlation alpha^2/(1+alpha^2):
/// eps_i = sqrt(alpha^2/(1+alpha^2)) * eps_shared + sqrt(1/(1+alpha^2)) * eps_i.
template <typename S>
Tensor<S> mixed_noise(Index frame_count, const Shape& frame_shape, double alpha,
                      const NoiseStreams& streams, Index first_abs_frame) {
  Index fsz = shape_size(frame_shape);
  Shape out_shape{frame_count};
  out_shape.insert(out_shape.end(), frame_shape.begin(), frame_shape.end());
  Tensor<S> out(out_shape);
  double shared_w = std::sqrt(alpha * alpha / (1.0 + alpha * alpha));
  double indep_w = std::sqrt(1.0 / (1.0 + alpha * alpha));
  RandomStream shared(streams.shared_key);
  for (Index f = 0; f < frame_count; ++f) {
    RandomStream indep(derive_key(streams.frame_key,
                                  static_cast<std::uint64_t>(first_abs_frame + f)));
    for (Index i = 0; i < fsz; ++i)
      out[f * fsz + i] = static_cast<S>(
          shared_w * shared.normal(static_cast<std::uint64_t>(i)) +
          indep_w * indep.normal(static_cast<std::uint64_t>(i)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// model aggregate
// ---------------------------------------------------------------------------

/// Configuration bundle plus the denoiser's precomputed plan. Immutable
/// after construction; shared read-only by concurrent samplers.
template <typename S>
struct VideoModel {
  MotionConfig motion;
  DenoiserConfig denoiser;
  EdmConfig edm;
  TupleConfig tuples;
  DenoiserPlan<S> plan;
};

template <typename S>
VideoModel<S> make_video_model(const MotionConfig& motion, const DenoiserConfig& denoiser,
                               const EdmConfig& edm) {
  if (motion.d_m != denoiser.d_m)
    throw std::invalid_argument("motion.d_m and denoiser.d_m disagree");
  if (motion.height != denoiser.height || motion.width != denoiser.width ||
      motion.channels != denoiser.channels)
    throw std::invalid_argument("motion and denoiser frame geometry disagree");
  if (motion.feat_h() != denoiser.motion_feat_h || motion.feat_w() != denoiser.motion_feat_w)
    throw std::invalid_argument("motion feature grid disagrees with the denoiser plan");
  edm.validate();
  VideoModel<S> m{motion, denoiser, edm,
                  TupleConfig{denoiser.context_len, denoiser.future_len},
                  make_denoiser_plan<S>(denoiser)};
  return m;
}

template <typename S>
void init_model_params(Parameters<S>& params, const VideoModel<S>& m, std::uint64_t seed) {
  init_denoiser_params(params, m.denoiser, seed);
  init_motion_params(params, m.motion, seed);
}

// ---------------------------------------------------------------------------
// preconditioned denoiser
// ---------------------------------------------------------------------------

/// c_skip * x + c_out * network(c_in * x, c_noise), with the precomputed
/// motion feature entering through the assembled input's channels.
template <typename S>
NodeId denoise_with_motion(Graph<S>& g, const Parameters<S>& p, const VideoModel<S>& m,
                           NodeId noisy, NodeId context, NodeId motion_tokens,
                           double sigma, Index start_index) {
  PreconditionCoeffs c = precondition_coeffs(sigma, m.edm);
  NodeId assembled = assemble_input(g, m.plan, context,
                                    scale(g, noisy, static_cast<S>(c.c_in)), motion_tokens);
  NodeId raw = raw_denoiser_forward(g, p, m.plan, assembled, c.c_noise, start_index);
  return add(g, scale(g, noisy, static_cast<S>(c.c_skip)),
             scale(g, raw, static_cast<S>(c.c_out)));
}

/// Full composition from the context window: extracts the context motion
/// feature, predicts the window's motion feature, then denoises.
template <typename S>
NodeId denoise(Graph<S>& g, const Parameters<S>& p, const VideoModel<S>& m,
               NodeId noisy, NodeId context, Index start_index, int class_label,
               double sigma) {
  NodeId m0 = extract_motion(g, p, m.motion, frame_differences(g, context));
  NodeId mn = predict_motion(g, p, m.motion, m0, start_index, class_label);
  return denoise_with_motion(g, p, m, noisy, context, mn, sigma, start_index);
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Noise-weighted squared error, averaged over the window's frames:
/// loss_weight(sigma)/F * sum_i ||target_i - denoised_i||^2.
template <typename S>
NodeId loss_diff(Graph<S>& g, NodeId target, NodeId denoised, double sigma,
                 const EdmConfig& edm) {
  if (g.val(target).shape() != g.val(denoised).shape())
    throw std::invalid_argument("loss_diff: shape mismatch");
  Index frames = g.val(target).shape()[0];
  S w = static_cast<S>(loss_weight(sigma, edm) / static_cast<double>(frames));
  return scale(g, sum_sq(g, sub(g, target, denoised)), w);
}

/// Consistency term over the overlap of a window and its shifted copy:
/// loss_weight(sigma)/overlap * sum over shared absolute frames of the
/// squared difference between the two denoised windows.
template <typename S>
NodeId loss_cst(Graph<S>& g, NodeId denoised, NodeId denoised_shifted, Index shift,
                double sigma, const EdmConfig& edm, const TupleConfig& tuples) {
  OverlapSpec ov = make_overlap(shift, tuples);
  const Shape& s = g.val(denoised).shape();
  Index fsz = s[1] * s[2] * s[3];
  Shape ov_shape{ov.overlap_len, s[1], s[2], s[3]};
  NodeId base_tail = slice_flat(g, denoised, shift * fsz, ov_shape);
  NodeId shifted_head = slice_flat(g, denoised_shifted, 0, ov_shape);
  S w = static_cast<S>(loss_weight(sigma, edm) / static_cast<double>(ov.overlap_len));
  return scale(g, sum_sq(g, sub(g, base_tail, shifted_head)), w);
}

/// One sample's training objective: both windows denoised by the same
/// parameters at the same sigma, averaged difference losses plus the
/// weighted consistency term.
template <typename S>
NodeId loss_total(Graph<S>& g, const Parameters<S>& p, const VideoModel<S>& m,
                  const TrainingSample<S>& sample, double sigma,
                  const Tensor<S>& eps, const Tensor<S>& eps_shifted) {
  NodeId context = g.constant(sample.context.frames);
  NodeId m0 = extract_motion(g, p, m.motion, frame_differences(g, context));
  NodeId motion_base = predict_motion(g, p, m.motion, m0, sample.start_index,
                                      sample.class_label);
  NodeId motion_shifted = predict_motion(g, p, m.motion, m0, sample.shifted_start_index,
                                         sample.class_label);

  NodeId noisy_base = g.constant(add_noise(sample.future.frames, sigma, eps));
  NodeId noisy_shifted = g.constant(add_noise(sample.shifted.frames, sigma, eps_shifted));

  NodeId den_base = denoise_with_motion(g, p, m, noisy_base, context, motion_base,
                                        sigma, sample.start_index);
  NodeId den_shifted = denoise_with_motion(g, p, m, noisy_shifted, context, motion_shifted,
                                           sigma, sample.shifted_start_index);

  NodeId ld_base = loss_diff(g, g.constant(sample.future.frames), den_base, sigma, m.edm);
  NodeId ld_shifted =
      loss_diff(g, g.constant(sample.shifted.frames), den_shifted, sigma, m.edm);
  NodeId total = scale(g, add(g, ld_base, ld_shifted), S(0.5));
  if (m.edm.lambda_cst > 0) {
    NodeId cst = loss_cst(g, den_base, den_shifted, sample.shift, sigma, m.edm, m.tuples);
    total = add(g, total, scale(g, cst, static_cast<S>(m.edm.lambda_cst)));
  }
  return total;
}

// ---------------------------------------------------------------------------
// probability-flow sampler
// ---------------------------------------------------------------------------

template <typename S>
using DenoiseFn = std::function<Tensor<S>(const Tensor<S>&, double)>;

namespace detail {

/// Integral over [a, b] of the Lagrange basis polynomials through `pts`
/// (exact: the basis polynomials are expanded and integrated analytically).
inline std::vector<double> adams_bashforth_coeffs(const std::vector<double>& pts,
                                                  double a, double b) {
  size_t k = pts.size();
  std::vector<double> out(k);
  for (size_t j = 0; j < k; ++j) {
    std::vector<double> poly{1.0};  // monomial coefficients, low order first
    double denom = 1.0;
    for (size_t m = 0; m < k; ++m) {
      if (m == j) continue;
      std::vector<double> next(poly.size() + 1, 0.0);
      for (size_t d = 0; d < poly.size(); ++d) {
        next[d] += poly[d] * (-pts[m]);
        next[d + 1] += poly[d];
      }
      poly = std::move(next);
      denom *= pts[j] - pts[m];
    }
    double integral = 0.0;
    double pa = a, pb = b;
    for (size_t d = 0; d < poly.size(); ++d) {
      integral += poly[d] * (pb - pa) / static_cast<double>(d + 1);
      pa *= a;
      pb *= b;
    }
    out[j] = integral / denom;
  }
  return out;
}

}  // namespace detail

/// Integrates dx/dsigma = (x - D(x, sigma)) / sigma from sigma_max to 0 with
/// an explicit linear-multistep rule: the derivative history is interpolated
/// by a Lagrange polynomial whose exact integral over [sigma_i, sigma_{i+1}]
/// advances the state. Warm-up steps use the available history (order 1 at
/// the first step). init_noise must have unit marginals; the caller scales
/// nothing.
template <typename S>
Tensor<S> lms_sample(const DenoiseFn<S>& denoise_fn, const Tensor<S>& init_noise,
                     const EdmConfig& cfg) {
  cfg.validate();
  std::vector<double> sigmas = sampler_schedule(cfg);
  Tensor<S> x(init_noise.shape());
  x.array() = init_noise.array() * static_cast<S>(cfg.sigma_max);

  std::vector<Tensor<S>> history;    // derivative evaluations, newest first
  std::vector<double> history_pts;
  for (size_t i = 0; i + 1 < sigmas.size(); ++i) {
    double sigma = sigmas[i];
    Tensor<S> den = denoise_fn(x, sigma);
    Tensor<S> deriv(x.shape());
    deriv.array() = (x.array() - den.array()) / static_cast<S>(sigma);

    history.insert(history.begin(), std::move(deriv));
    history_pts.insert(history_pts.begin(), sigma);
    size_t order = std::min<size_t>(static_cast<size_t>(cfg.lms_order), history.size());
    history.resize(order);
    history_pts.resize(order);

    std::vector<double> coeffs =
        detail::adams_bashforth_coeffs(history_pts, sigma, sigmas[i + 1]);
    for (size_t j = 0; j < order; ++j)
      x.array() += static_cast<S>(coeffs[j]) * history[j].array();

    if (!x.array().allFinite())
      throw std::runtime_error("lms_sample: non-finite state at step " + std::to_string(i));
  }
  return x;
}

}  // namespace framecast
