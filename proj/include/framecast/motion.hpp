#pragma once

#include <memory>
#include <stdexcept>
#include <string>

#include "framecast/graph.hpp"
#include "framecast/tuples.hpp"

namespace framecast {

/// Motion pathway: a strided conv encoder and a convolutional gated
/// recurrent cell fold the context frame differences into one spatial
/// feature map at 1/4 resolution; a stack of cross-attention blocks then
/// retargets that feature to a future window, attending to a two-token
/// embedding of the window's start index and the class label.
struct MotionConfig {
  Index d_m = 64;   // motion feature channels
  Index d_c = 128;  // conditioning token width
  int heads = 4;
  int blocks = 6;
  int num_classes = 6;
  Index channels = 1;
  Index height = 32;
  Index width = 32;
  Index ff_expand = 3;

  Index feat_h() const { return height / 4; }
  Index feat_w() const { return width / 4; }
  Index feat_tokens() const { return feat_h() * feat_w(); }
};

/// Spatial motion feature; stored token-major (feat_h*feat_w, d_m), logical
/// shape (d_m, feat_h, feat_w).
template <typename S>
struct MotionFeature {
  Tensor<S> tokens;
  Index channels = 0;
  Index feat_h = 0;
  Index feat_w = 0;

  S at(Index c, Index y, Index x) const {
    return tokens.at(y * feat_w + x, c);
  }
};

template <typename S>
void init_motion_params(Parameters<S>& params, const MotionConfig& cfg,
                        std::uint64_t seed) {
  ParamBuilder<S> b(params, "motion.", seed);
  Index dm = cfg.d_m;
  Index dh = dm / 2;
  b.weight("enc.conv1.w", 3 * 3 * cfg.channels, dh);
  b.zeros("enc.conv1.b", {dh});
  b.weight("enc.conv2.w", 3 * 3 * dh, dm);
  b.zeros("enc.conv2.b", {dm});
  for (const char* gate : {"z", "r", "h"}) {
    b.weight(std::string("gru.") + gate + ".w", 3 * 3 * 2 * dm, dm);
    b.zeros(std::string("gru.") + gate + ".b", {dm});
  }
  b.weight("time.w1", cfg.d_c, cfg.d_c);
  b.zeros("time.b1", {cfg.d_c});
  b.weight("time.w2", cfg.d_c, cfg.d_c);
  b.zeros("time.b2", {cfg.d_c});
  b.normal("cls.table", {static_cast<Index>(cfg.num_classes), cfg.d_c}, S(1));
  b.weight("cls.w1", cfg.d_c, cfg.d_c);
  b.zeros("cls.b1", {cfg.d_c});
  b.weight("cls.w2", cfg.d_c, cfg.d_c);
  b.zeros("cls.b2", {cfg.d_c});
  for (int i = 0; i < cfg.blocks; ++i) {
    ParamBuilder<S> blk = b.scoped("pred.block" + std::to_string(i));
    blk.normal("norm1.gain", {dm}, S(0));  // filled with ones below
    blk.weight("q.w", dm, dm);
    blk.weight("k.w", cfg.d_c, dm);
    blk.weight("v.w", cfg.d_c, dm);
    blk.weight("o.w", dm, dm);
    blk.normal("norm2.gain", {dm}, S(0));
    blk.weight("ff.w1", dm, cfg.ff_expand * dm);
    blk.zeros("ff.b1", {cfg.ff_expand * dm});
    blk.weight("ff.w2", cfg.ff_expand * dm, dm);
    blk.zeros("ff.b2", {dm});
    params.at("motion.pred.block" + std::to_string(i) + ".norm1.gain").array().setConstant(S(1));
    params.at("motion.pred.block" + std::to_string(i) + ".norm2.gain").array().setConstant(S(1));
  }
}

/// Sinusoidal featurization of a scalar position (geometric frequency
/// ladder, classic transformer layout).
template <typename S>
Tensor<S> sinusoidal_features(double x, Index dim, double base = 1e4) {
  Tensor<S> out({dim});
  for (Index j = 0; j < dim / 2; ++j) {
    double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
    out[2 * j] = static_cast<S>(std::sin(x * freq));
    out[2 * j + 1] = static_cast<S>(std::cos(x * freq));
  }
  return out;
}

namespace detail {

/// (F, C, H, W) -> (F, H, W, C) permutation map, cached per geometry.
inline std::shared_ptr<const std::vector<Index>> channels_last_map(Index f, Index c,
                                                                   Index h, Index w) {
  static std::mutex mu;
  static std::vector<std::pair<std::array<Index, 4>, std::shared_ptr<const std::vector<Index>>>> cache;
  std::array<Index, 4> key{f, c, h, w};
  std::lock_guard<std::mutex> lock(mu);
  for (auto& [k, m] : cache)
    if (k == key) return m;
  auto map = std::make_shared<std::vector<Index>>();
  map->reserve(static_cast<size_t>(f * c * h * w));
  for (Index fi = 0; fi < f; ++fi)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        for (Index ci = 0; ci < c; ++ci)
          map->push_back(((fi * c + ci) * h + y) * w + x);
  cache.emplace_back(key, map);
  return cache.back().second;
}

}  // namespace detail

/// Adjacent-frame pixel differences of a context window (F, C, H, W) ->
/// (F-1, C, H, W).
template <typename S>
NodeId frame_differences(Graph<S>& g, NodeId context) {
  Shape s = g.val(context).shape();  // copy: node vector may reallocate below
  if (s.size() != 4 || s[0] < 2)
    throw std::domain_error("frame_differences: need at least 2 context frames");
  Index frame = s[1] * s[2] * s[3];
  NodeId tail = slice_flat(g, context, frame, {s[0] - 1, s[1], s[2], s[3]});
  NodeId head = slice_flat(g, context, 0, {s[0] - 1, s[1], s[2], s[3]});
  return sub(g, tail, head);
}

/// Folds the difference frames through the conv encoder and the gated
/// recurrent cell; returns motion feature tokens (feat_tokens, d_m).
template <typename S>
NodeId extract_motion(Graph<S>& g, const Parameters<S>& p, const MotionConfig& cfg,
                      NodeId diffs) {
  Shape s = g.val(diffs).shape();  // copy: node vector may reallocate below
  if (s.size() != 4 || s[1] != cfg.channels || s[2] != cfg.height || s[3] != cfg.width)
    throw std::invalid_argument("extract_motion: expected (F," +
                                std::to_string(cfg.channels) + "," +
                                std::to_string(cfg.height) + "," +
                                std::to_string(cfg.width) + "), got " +
                                shape_str(s));
  if (cfg.height % 4 != 0 || cfg.width % 4 != 0)
    throw std::invalid_argument("extract_motion: spatial size must be divisible by 4");
  Index f = s[0];
  Index dm = cfg.d_m;
  Index dh = dm / 2;
  Index h2 = cfg.height / 2, w2 = cfg.width / 2;
  Index h4 = cfg.feat_h(), w4 = cfg.feat_w();

  NodeId x = gather(g, diffs, detail::channels_last_map(f, cfg.channels, cfg.height, cfg.width),
                    {f, cfg.height, cfg.width, cfg.channels});
  x = conv2d(g, x, g.param(p, "motion.enc.conv1.w"), g.param(p, "motion.enc.conv1.b"),
             3, 2, 1, {f, cfg.height, cfg.width, cfg.channels});
  x = gelu(g, x);
  x = conv2d(g, x, g.param(p, "motion.enc.conv2.w"), g.param(p, "motion.enc.conv2.b"),
             3, 2, 1, {f, h2, w2, dh});
  x = gelu(g, x);  // (f*h4*w4, dm)

  // recurrent fold, zero initial state
  Index step = h4 * w4 * dm;
  NodeId hidden = g.constant(Tensor<S>({h4 * w4, dm}));
  Shape conv_shape{1, h4, w4, 2 * dm};
  for (Index t = 0; t < f; ++t) {
    NodeId xt = slice_flat(g, x, t * step, {h4 * w4, dm});
    NodeId hx = concat_cols(g, hidden, xt);
    NodeId zg = sigmoid_op(g, conv2d(g, hx, g.param(p, "motion.gru.z.w"),
                                     g.param(p, "motion.gru.z.b"), 3, 1, 1, conv_shape));
    NodeId rg = sigmoid_op(g, conv2d(g, hx, g.param(p, "motion.gru.r.w"),
                                     g.param(p, "motion.gru.r.b"), 3, 1, 1, conv_shape));
    NodeId rh = mul(g, rg, hidden);
    NodeId cand = tanh_op(g, conv2d(g, concat_cols(g, rh, xt), g.param(p, "motion.gru.h.w"),
                                    g.param(p, "motion.gru.h.b"), 3, 1, 1, conv_shape));
    // h' = (1-z) * h + z * cand
    NodeId keep = mul(g, sub(g, g.constant(Tensor<S>::full({h4 * w4, dm}, S(1))), zg), hidden);
    hidden = add(g, keep, mul(g, zg, cand));
  }
  return hidden;
}

/// Two-token conditioning embedding: MLP(sinusoidal(start index)) stacked
/// with MLP(class embedding). Output (2, d_c).
template <typename S>
NodeId embed_conditioning(Graph<S>& g, const Parameters<S>& p, const MotionConfig& cfg,
                          Index frame_index, int class_label) {
  if (frame_index < 0) throw std::domain_error("frame index must be >= 0");
  if (class_label < 0 || class_label >= cfg.num_classes)
    throw std::domain_error("class label " + std::to_string(class_label) +
                            " outside {0.." + std::to_string(cfg.num_classes - 1) + "}");
  NodeId tfeat = g.constant(
      sinusoidal_features<S>(static_cast<double>(frame_index), cfg.d_c).reshaped({1, cfg.d_c}));
  NodeId t1 = gelu(g, add_rowvec(g, matmul(g, tfeat, g.param(p, "motion.time.w1")),
                                 g.param(p, "motion.time.b1")));
  NodeId time_token = add_rowvec(g, matmul(g, t1, g.param(p, "motion.time.w2")),
                                 g.param(p, "motion.time.b2"));

  NodeId table = g.param(p, "motion.cls.table");
  NodeId cemb = slice_flat(g, table, static_cast<Index>(class_label) * cfg.d_c, {1, cfg.d_c});
  NodeId c1 = gelu(g, add_rowvec(g, matmul(g, cemb, g.param(p, "motion.cls.w1")),
                                 g.param(p, "motion.cls.b1")));
  NodeId class_token = add_rowvec(g, matmul(g, c1, g.param(p, "motion.cls.w2")),
                                  g.param(p, "motion.cls.b2"));
  return concat_flat(g, {time_token, class_token}, {2, cfg.d_c});
}

/// Cross-attention retargeting of the context motion feature to the window
/// starting at frame_index. Pre-norm blocks with residual paths; the
/// conditioning tokens serve as keys and values in every block.
template <typename S>
NodeId predict_motion(Graph<S>& g, const Parameters<S>& p, const MotionConfig& cfg,
                      NodeId m0_tokens, Index frame_index, int class_label) {
  if (g.val(m0_tokens).size() != cfg.feat_tokens() * cfg.d_m)
    throw std::invalid_argument("predict_motion: motion feature has " +
                                std::to_string(g.val(m0_tokens).size()) +
                                " values, expected " +
                                std::to_string(cfg.feat_tokens() * cfg.d_m));
  NodeId cond = embed_conditioning(g, p, cfg, frame_index, class_label);
  NodeId x = m0_tokens;
  for (int i = 0; i < cfg.blocks; ++i) {
    std::string pre = "motion.pred.block" + std::to_string(i) + ".";
    NodeId xq = mul_rowvec(g, rms_norm(g, x), g.param(p, pre + "norm1.gain"));
    NodeId q = matmul(g, xq, g.param(p, pre + "q.w"));
    NodeId k = matmul(g, cond, g.param(p, pre + "k.w"));
    NodeId v = matmul(g, cond, g.param(p, pre + "v.w"));
    NodeId att = attention(g, q, k, v, cfg.heads, 1);
    x = add(g, x, matmul(g, att, g.param(p, pre + "o.w")));

    NodeId xf = mul_rowvec(g, rms_norm(g, x), g.param(p, pre + "norm2.gain"));
    NodeId h = gelu(g, add_rowvec(g, matmul(g, xf, g.param(p, pre + "ff.w1")),
                                  g.param(p, pre + "ff.b1")));
    NodeId ff = add_rowvec(g, matmul(g, h, g.param(p, pre + "ff.w2")),
                           g.param(p, pre + "ff.b2"));
    x = add(g, x, ff);
  }
  return x;
}

/// Non-graph convenience: context frames -> predicted motion feature.
template <typename S>
MotionFeature<S> compute_motion_feature(const Parameters<S>& p, const MotionConfig& cfg,
                                        const Tensor<S>& context_frames,
                                        Index frame_index, int class_label) {
  Graph<S> g;
  NodeId m0 = extract_motion(g, p, cfg, frame_differences(g, g.constant(context_frames)));
  NodeId mn = predict_motion(g, p, cfg, m0, frame_index, class_label);
  return MotionFeature<S>{g.val(mn), cfg.d_m, cfg.feat_h(), cfg.feat_w()};
}

}  // namespace framecast
