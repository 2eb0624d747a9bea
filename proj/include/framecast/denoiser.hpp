#pragma once

#include <array>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "framecast/graph.hpp"
#include "framecast/motion.hpp"

namespace framecast {

// Hourglass transformer over video tokens. Each block runs per-frame spatial
// attention followed by joint spatio-temporal attention over the flattened
// (frame x space) token sequence; both attentions are pre-norm residual
// sublayers, each followed by a gated feed-forward. Pixel unshuffle/shuffle
// moves between resolution levels; rotary embeddings carry (row, col) in
// spatial attention and (row, col, absolute frame index) in spatio-temporal
// attention, which is how the model sees how far a future window sits from
// its context.

enum class BlockKind { kNeighborhood, kGlobal };

struct LevelSpec {
  BlockKind kind = BlockKind::kGlobal;
  int blocks = 2;
  Index width = 64;
};

struct DenoiserConfig {
  Index patch = 4;
  std::vector<LevelSpec> levels = {{BlockKind::kNeighborhood, 2, 64},
                                   {BlockKind::kGlobal, 2, 128}};
  Index neighborhood_kernel = 7;
  Index d_m = 64;
  Index context_len = 10;  // F_p
  Index future_len = 5;    // F_f
  Index channels = 1;
  Index height = 32;
  Index width = 32;
  Index cond_dim = 64;   // noise-conditioning vector width
  Index head_dim = 32;   // target attention head width
  Index ff_expand = 3;
  Index motion_feat_h = 8;  // spatial dims of the motion feature map
  Index motion_feat_w = 8;

  Index frames() const { return context_len + future_len; }
  Index in_channels() const { return channels + d_m + 1; }
  int level_count() const { return static_cast<int>(levels.size()); }
  Index grid_h(int level) const { return height / patch / (Index(1) << level); }
  Index grid_w(int level) const { return width / patch / (Index(1) << level); }
  int heads(int level) const {
    return static_cast<int>(std::max<Index>(1, levels[static_cast<size_t>(level)].width / head_dim));
  }
  Index head_width(int level) const {
    return levels[static_cast<size_t>(level)].width / heads(level);
  }

  void validate() const {
    if (levels.empty()) throw std::invalid_argument("denoiser needs at least one level");
    Index div = patch * (Index(1) << (level_count() - 1));
    if (height % div != 0 || width % div != 0)
      throw std::invalid_argument("frame size must be divisible by patch * 2^(levels-1) = " +
                                  std::to_string(div));
    if (neighborhood_kernel % 2 == 0)
      throw std::invalid_argument("neighborhood kernel must be odd");
    for (size_t l = 0; l + 1 < levels.size(); ++l)
      if (levels[l].width > levels[l + 1].width)
        throw std::invalid_argument("level widths must be nondecreasing with depth");
    for (int l = 0; l < level_count(); ++l) {
      if (head_width(l) % 4 != 0)
        throw std::invalid_argument("head width must be divisible by 4 for axial rotary");
      if (grid_h(l) < 1 || grid_w(l) < 1)
        throw std::invalid_argument("too many levels for this frame size");
    }
    if (height % motion_feat_h != 0 || width % motion_feat_w != 0)
      throw std::invalid_argument("motion feature grid must divide the frame size");
  }
};

inline double rope_base() { return 100.0; }
inline double noise_feature_scale() { return 100.0; }

// ---------------------------------------------------------------------------
// plan: precomputed index maps, masks and spatial rotary tables
// ---------------------------------------------------------------------------

template <typename S>
struct RopeTable {
  std::shared_ptr<const Tensor<S>> cos_t;
  std::shared_ptr<const Tensor<S>> sin_t;
};

/// Additive score mask restricting each token to the kernel x kernel spatial
/// window centered on it, clipped at the borders (so a corner token sees the
/// in-frame part of its window). kernel >= 2*extent-1 masks nothing.
template <typename S>
std::shared_ptr<const Tensor<S>> neighborhood_mask(Index grid_h, Index grid_w,
                                                   Index kernel) {
  if (kernel % 2 == 0) throw std::invalid_argument("neighborhood kernel must be odd");
  Index s = grid_h * grid_w;
  Index half = kernel / 2;
  auto mask = std::make_shared<Tensor<S>>(Shape{s, s});
  for (Index qy = 0; qy < grid_h; ++qy)
    for (Index qx = 0; qx < grid_w; ++qx)
      for (Index ky = 0; ky < grid_h; ++ky)
        for (Index kx = 0; kx < grid_w; ++kx) {
          bool in = std::abs(qy - ky) <= half && std::abs(qx - kx) <= half;
          mask->at(qy * grid_w + qx, ky * grid_w + kx) = in ? S(0) : S(-1e30);
        }
  return mask;
}

namespace detail {

/// Per-axis rotary fill: positions (rows) x axis dims, pairs share an angle.
template <typename S>
void fill_rope_axis(Tensor<S>& cos_t, Tensor<S>& sin_t, Index col0, Index dims,
                    Index row, double pos) {
  for (Index j = 0; j < dims / 2; ++j) {
    double freq = std::pow(rope_base(), -2.0 * static_cast<double>(j) / static_cast<double>(dims));
    double ang = pos * freq;
    cos_t.at(row, col0 + 2 * j) = static_cast<S>(std::cos(ang));
    cos_t.at(row, col0 + 2 * j + 1) = static_cast<S>(std::cos(ang));
    sin_t.at(row, col0 + 2 * j) = static_cast<S>(std::sin(ang));
    sin_t.at(row, col0 + 2 * j + 1) = static_cast<S>(std::sin(ang));
  }
}

}  // namespace detail

/// Spatial table: axial (row, col) rotary over the level's token grid,
/// repeated for every frame.
template <typename S>
RopeTable<S> spatial_rope_table(Index frames, Index grid_h, Index grid_w, Index hd) {
  Index rows = frames * grid_h * grid_w;
  auto cos_t = std::make_shared<Tensor<S>>(Shape{rows, hd});
  auto sin_t = std::make_shared<Tensor<S>>(Shape{rows, hd});
  Index da = hd / 2;
  for (Index f = 0; f < frames; ++f)
    for (Index y = 0; y < grid_h; ++y)
      for (Index x = 0; x < grid_w; ++x) {
        Index r = (f * grid_h + y) * grid_w + x;
        detail::fill_rope_axis(*cos_t, *sin_t, 0, da, r, static_cast<double>(y));
        detail::fill_rope_axis(*cos_t, *sin_t, da, da, r, static_cast<double>(x));
      }
  return {cos_t, sin_t};
}

/// Spatio-temporal table: (row, col, frame) axial rotary. Context frames
/// carry absolute positions 0..F_p-1; future frames carry
/// start_index..start_index+F_f-1. Cached: the same window starts recur on
/// every training step and every sampler step.
template <typename S>
RopeTable<S> temporal_rope_table(Index context_len, Index future_len, Index grid_h,
                                 Index grid_w, Index hd, Index start_index) {
  using Key = std::array<Index, 6>;
  static std::mutex mu;
  static std::vector<std::pair<Key, RopeTable<S>>> cache;
  Key key{context_len, future_len, grid_h, grid_w, hd, start_index};
  {
    std::lock_guard<std::mutex> lock(mu);
    for (auto& [k, t] : cache)
      if (k == key) return t;
  }
  Index frames = context_len + future_len;
  Index rows = frames * grid_h * grid_w;
  auto cos_t = std::make_shared<Tensor<S>>(Shape{rows, hd});
  auto sin_t = std::make_shared<Tensor<S>>(Shape{rows, hd});
  Index da = (hd / 4) & ~Index(1);  // even share for each spatial axis
  Index dt = hd - 2 * da;
  for (Index f = 0; f < frames; ++f) {
    double tpos = f < context_len
                      ? static_cast<double>(f)
                      : static_cast<double>(start_index + (f - context_len));
    for (Index y = 0; y < grid_h; ++y)
      for (Index x = 0; x < grid_w; ++x) {
        Index r = (f * grid_h + y) * grid_w + x;
        detail::fill_rope_axis(*cos_t, *sin_t, 0, da, r, static_cast<double>(y));
        detail::fill_rope_axis(*cos_t, *sin_t, da, da, r, static_cast<double>(x));
        detail::fill_rope_axis(*cos_t, *sin_t, 2 * da, dt, r, tpos);
      }
  }
  RopeTable<S> table{cos_t, sin_t};
  std::lock_guard<std::mutex> lock(mu);
  cache.emplace_back(key, table);
  return table;
}

/// Immutable per-config precomputation, shared by concurrent forward passes.
template <typename S>
struct DenoiserPlan {
  DenoiserConfig cfg;
  std::shared_ptr<const std::vector<Index>> assemble_map;
  std::shared_ptr<const std::vector<Index>> patch_map;
  std::vector<std::shared_ptr<const std::vector<Index>>> down_maps;  // level l -> l+1
  std::vector<std::shared_ptr<const std::vector<Index>>> up_maps;    // level l+1 -> l
  std::shared_ptr<const std::vector<Index>> unpatch_map;
  std::vector<std::shared_ptr<const Tensor<S>>> neigh_masks;  // per level, null if global
  std::vector<RopeTable<S>> spatial_rope;                     // per level
};

template <typename S>
DenoiserPlan<S> make_denoiser_plan(const DenoiserConfig& cfg) {
  cfg.validate();
  DenoiserPlan<S> plan;
  plan.cfg = cfg;
  Index f = cfg.frames(), c = cfg.channels, h = cfg.height, w = cfg.width;
  Index cin = cfg.in_channels();
  Index p = cfg.patch;
  Index mh = cfg.motion_feat_h, mw = cfg.motion_feat_w;
  Index sy = h / mh, sx = w / mw;

  // source for assembly: concat [frames (f*c*h*w) | motion tokens (mh*mw*d_m) | one]
  {
    auto map = std::make_shared<std::vector<Index>>();
    map->reserve(static_cast<size_t>(f * cin * h * w));
    Index motion_off = f * c * h * w;
    Index one_off = motion_off + mh * mw * cfg.d_m;
    for (Index fi = 0; fi < f; ++fi)
      for (Index ch = 0; ch < cin; ++ch)
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            if (ch < c) {
              map->push_back(((fi * c + ch) * h + y) * w + x);
            } else if (ch < c + cfg.d_m) {
              Index token = (y / sy) * mw + (x / sx);
              map->push_back(motion_off + token * cfg.d_m + (ch - c));
            } else {
              map->push_back(fi < cfg.context_len ? -1 : one_off);
            }
          }
    plan.assemble_map = map;
  }

  // patch embedding: (f, cin, h, w) -> (f*s0, cin*p*p), channel-major patches
  {
    Index w0 = w / p;
    auto map = std::make_shared<std::vector<Index>>();
    map->reserve(static_cast<size_t>(f * cin * h * w));
    for (Index fi = 0; fi < f; ++fi)
      for (Index ty = 0; ty < h / p; ++ty)
        for (Index tx = 0; tx < w0; ++tx)
          for (Index ch = 0; ch < cin; ++ch)
            for (Index py = 0; py < p; ++py)
              for (Index px = 0; px < p; ++px)
                map->push_back(((fi * cin + ch) * h + ty * p + py) * w + tx * p + px);
    plan.patch_map = map;
  }

  // inter-level shuffles
  for (int l = 0; l + 1 < cfg.level_count(); ++l) {
    Index gh = cfg.grid_h(l), gw = cfg.grid_w(l);
    Index wl = cfg.levels[static_cast<size_t>(l)].width;
    auto down = std::make_shared<std::vector<Index>>();
    down->reserve(static_cast<size_t>(f * gh * gw * wl));
    for (Index fi = 0; fi < f; ++fi)
      for (Index ty = 0; ty < gh / 2; ++ty)
        for (Index tx = 0; tx < gw / 2; ++tx)
          for (Index q = 0; q < 4; ++q)
            for (Index ch = 0; ch < wl; ++ch) {
              Index row = (fi * gh + 2 * ty + q / 2) * gw + 2 * tx + q % 2;
              down->push_back(row * wl + ch);
            }
    plan.down_maps.push_back(down);

    auto up = std::make_shared<std::vector<Index>>();
    up->reserve(static_cast<size_t>(f * gh * gw * wl));
    for (Index fi = 0; fi < f; ++fi)
      for (Index y = 0; y < gh; ++y)
        for (Index x = 0; x < gw; ++x) {
          Index row = (fi * gh / 2 + y / 2) * (gw / 2) + x / 2;
          Index q = (y % 2) * 2 + x % 2;
          for (Index ch = 0; ch < wl; ++ch)
            up->push_back(row * 4 * wl + q * wl + ch);
        }
    plan.up_maps.push_back(up);
  }

  // output head: future tokens (ff*s0, c*p*p) -> (ff, c, h, w)
  {
    Index w0 = w / p;
    auto map = std::make_shared<std::vector<Index>>();
    map->reserve(static_cast<size_t>(cfg.future_len * c * h * w));
    for (Index fi = 0; fi < cfg.future_len; ++fi)
      for (Index ch = 0; ch < c; ++ch)
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            Index row = (fi * (h / p) + y / p) * w0 + x / p;
            Index entry = (ch * p + y % p) * p + x % p;
            map->push_back(row * c * p * p + entry);
          }
    plan.unpatch_map = map;
  }

  for (int l = 0; l < cfg.level_count(); ++l) {
    bool neigh = cfg.levels[static_cast<size_t>(l)].kind == BlockKind::kNeighborhood;
    plan.neigh_masks.push_back(
        neigh ? neighborhood_mask<S>(cfg.grid_h(l), cfg.grid_w(l), cfg.neighborhood_kernel)
              : nullptr);
    plan.spatial_rope.push_back(
        spatial_rope_table<S>(f, cfg.grid_h(l), cfg.grid_w(l), cfg.head_width(l)));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void init_block_params(ParamBuilder<S>& b, Index width, Index cond_dim, Index ff_expand) {
  b.zeros("mod.w", {cond_dim, 2 * width});
  b.zeros("mod.b", {2 * width});
  for (const char* att : {"attn1", "attn2"}) {
    ParamBuilder<S> a = b.scoped(att);
    a.weight("qkv.w", width, 3 * width);
    a.weight("out.w", width, width);
  }
  for (const char* ff : {"ff1", "ff2"}) {
    ParamBuilder<S> f = b.scoped(ff);
    f.weight("w1", width, 2 * ff_expand * width);
    f.zeros("b1", {2 * ff_expand * width});
    f.weight("w2", ff_expand * width, width);
    f.zeros("b2", {width});
  }
}

inline int down_block_count(const LevelSpec& level) { return level.blocks / 2; }
inline int up_block_count(const LevelSpec& level) { return level.blocks - level.blocks / 2; }

}  // namespace detail

template <typename S>
void init_denoiser_params(Parameters<S>& params, const DenoiserConfig& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  ParamBuilder<S> b(params, "denoiser.", seed);
  Index w0 = cfg.levels[0].width;

  b.weight("embed.w", cfg.in_channels() * cfg.patch * cfg.patch, w0);
  b.zeros("embed.b", {w0});
  b.weight("noise.w1", cfg.cond_dim, cfg.cond_dim);
  b.zeros("noise.b1", {cfg.cond_dim});
  b.weight("noise.w2", cfg.cond_dim, cfg.cond_dim);
  b.zeros("noise.b2", {cfg.cond_dim});

  int last = cfg.level_count() - 1;
  for (int l = 0; l < cfg.level_count(); ++l) {
    const LevelSpec& level = cfg.levels[static_cast<size_t>(l)];
    std::string lp = "l" + std::to_string(l) + ".";
    if (l < last) {
      for (int i = 0; i < detail::down_block_count(level); ++i) {
        ParamBuilder<S> blk = b.scoped(lp + "down" + std::to_string(i));
        detail::init_block_params(blk, level.width, cfg.cond_dim, cfg.ff_expand);
      }
      for (int i = 0; i < detail::up_block_count(level); ++i) {
        ParamBuilder<S> blk = b.scoped(lp + "up" + std::to_string(i));
        detail::init_block_params(blk, level.width, cfg.cond_dim, cfg.ff_expand);
      }
      Index wn = cfg.levels[static_cast<size_t>(l) + 1].width;
      b.weight(lp + "down.w", 4 * level.width, wn);
      b.zeros(lp + "down.b", {wn});
      b.weight(lp + "up.w", wn, 4 * level.width);
      b.zeros(lp + "up.b", {4 * level.width});
      b.weight(lp + "merge.w", 2 * level.width, level.width);
      b.zeros(lp + "merge.b", {level.width});
    } else {
      for (int i = 0; i < level.blocks; ++i) {
        ParamBuilder<S> blk = b.scoped(lp + "mid" + std::to_string(i));
        detail::init_block_params(blk, level.width, cfg.cond_dim, cfg.ff_expand);
      }
    }
  }

  b.normal("head.norm.gain", {w0}, S(0));
  params.at("denoiser.head.norm.gain").array().setConstant(S(1));
  b.zeros("head.w", {w0, cfg.channels * cfg.patch * cfg.patch});
  b.zeros("head.b", {cfg.channels * cfg.patch * cfg.patch});
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

/// Builds the (F_p+F_f, C+d_m+1, H, W) conditioned input: clean context
/// frames then noisy future frames on the temporal axis, motion channels
/// nearest-upsampled and broadcast to every frame, and a 0/1 mask channel
/// flagging future positions.
template <typename S>
NodeId assemble_input(Graph<S>& g, const DenoiserPlan<S>& plan, NodeId context,
                      NodeId noisy_future, NodeId motion_tokens) {
  const DenoiserConfig& cfg = plan.cfg;
  Index fsz = cfg.channels * cfg.height * cfg.width;
  if (g.val(context).size() != cfg.context_len * fsz)
    throw std::invalid_argument("assemble_input: context shape mismatch, expected " +
                                std::to_string(cfg.context_len) + " frames of " +
                                std::to_string(fsz) + " values");
  if (g.val(noisy_future).size() != cfg.future_len * fsz)
    throw std::invalid_argument("assemble_input: future shape mismatch");
  if (g.val(motion_tokens).size() != cfg.motion_feat_h * cfg.motion_feat_w * cfg.d_m)
    throw std::invalid_argument("assemble_input: motion feature size mismatch");

  NodeId one = g.constant(Tensor<S>::full({1}, S(1)));
  NodeId src = concat_flat(
      g, {context, noisy_future, motion_tokens, one},
      {cfg.frames() * fsz + cfg.motion_feat_h * cfg.motion_feat_w * cfg.d_m + 1});
  return gather(g, src, plan.assemble_map,
                {cfg.frames(), cfg.in_channels(), cfg.height, cfg.width});
}

namespace detail {

template <typename S>
struct BlockContext {
  NodeId cond;  // (1, cond_dim)
  Index frames;
  const DenoiserPlan<S>* plan;
};

template <typename S>
NodeId modulated_norm(Graph<S>& g, const Parameters<S>& p, const std::string& prefix,
                      NodeId x, NodeId cond, Index width) {
  NodeId mod = add_rowvec(g, matmul(g, cond, g.param(p, prefix + "mod.w")),
                          g.param(p, prefix + "mod.b"));
  NodeId gamma = slice_cols(g, mod, 0, width);
  NodeId beta = slice_cols(g, mod, width, 2 * width);
  NodeId y = mul_rowvec(g, rms_norm(g, x), add_scalar(g, gamma, S(1)));
  return add_rowvec(g, y, beta);
}

template <typename S>
NodeId attn_sublayer(Graph<S>& g, const Parameters<S>& p, const std::string& prefix,
                     const std::string& block_prefix, NodeId x, NodeId cond,
                     Index width, int heads, int groups, const RopeTable<S>& rope,
                     std::shared_ptr<const Tensor<S>> mask) {
  NodeId xn = modulated_norm(g, p, block_prefix, x, cond, width);
  NodeId qkv = matmul(g, xn, g.param(p, prefix + "qkv.w"));
  NodeId q = pair_rotate(g, slice_cols(g, qkv, 0, width), rope.cos_t, rope.sin_t, heads);
  NodeId k = pair_rotate(g, slice_cols(g, qkv, width, 2 * width), rope.cos_t, rope.sin_t, heads);
  NodeId v = slice_cols(g, qkv, 2 * width, 3 * width);
  NodeId att = attention(g, q, k, v, heads, groups, mask);
  return add(g, x, matmul(g, att, g.param(p, prefix + "out.w")));
}

template <typename S>
NodeId ff_sublayer(Graph<S>& g, const Parameters<S>& p, const std::string& prefix,
                   const std::string& block_prefix, NodeId x, NodeId cond,
                   Index width, Index ff_expand) {
  NodeId xn = modulated_norm(g, p, block_prefix, x, cond, width);
  NodeId u = add_rowvec(g, matmul(g, xn, g.param(p, prefix + "w1")),
                        g.param(p, prefix + "b1"));
  Index hidden = ff_expand * width;
  NodeId gated = mul(g, gelu(g, slice_cols(g, u, 0, hidden)),
                     slice_cols(g, u, hidden, 2 * hidden));
  NodeId y = add_rowvec(g, matmul(g, gated, g.param(p, prefix + "w2")),
                        g.param(p, prefix + "b2"));
  return add(g, x, y);
}

template <typename S>
NodeId run_block(Graph<S>& g, const Parameters<S>& p, const DenoiserPlan<S>& plan,
                 const std::string& block_prefix, NodeId x, NodeId cond, int level,
                 const RopeTable<S>& temporal_rope) {
  const DenoiserConfig& cfg = plan.cfg;
  Index width = cfg.levels[static_cast<size_t>(level)].width;
  int heads = cfg.heads(level);
  x = attn_sublayer(g, p, block_prefix + "attn1.", block_prefix, x, cond, width, heads,
                    static_cast<int>(cfg.frames()),
                    plan.spatial_rope[static_cast<size_t>(level)],
                    plan.neigh_masks[static_cast<size_t>(level)]);
  x = ff_sublayer(g, p, block_prefix + "ff1.", block_prefix, x, cond, width, cfg.ff_expand);
  x = attn_sublayer(g, p, block_prefix + "attn2.", block_prefix, x, cond, width, heads,
                    1, temporal_rope, std::shared_ptr<const Tensor<S>>());
  x = ff_sublayer(g, p, block_prefix + "ff2.", block_prefix, x, cond, width, cfg.ff_expand);
  if (!g.val(x).array().allFinite())
    throw std::runtime_error("non-finite activations after block " + block_prefix);
  return x;
}

}  // namespace detail

/// Token-space trunk: assembled input -> denoised future frames
/// (F_f, C, H, W), in raw network units (the EDM wrapper applies
/// c_skip/c_out outside).
template <typename S>
NodeId raw_denoiser_forward(Graph<S>& g, const Parameters<S>& p,
                            const DenoiserPlan<S>& plan, NodeId assembled,
                            double c_noise, Index start_index) {
  const DenoiserConfig& cfg = plan.cfg;
  if (!std::isfinite(c_noise))
    throw std::invalid_argument("raw_denoiser_forward: non-finite c_noise");
  Index f = cfg.frames();

  // conditioning vector from the noise level
  NodeId nf = g.constant(
      sinusoidal_features<S>(c_noise * noise_feature_scale(), cfg.cond_dim)
          .reshaped({1, cfg.cond_dim}));
  NodeId cond = gelu(g, add_rowvec(g, matmul(g, nf, g.param(p, "denoiser.noise.w1")),
                                   g.param(p, "denoiser.noise.b1")));
  cond = add_rowvec(g, matmul(g, cond, g.param(p, "denoiser.noise.w2")),
                    g.param(p, "denoiser.noise.b2"));

  // per-level spatio-temporal rotary tables for this window position
  std::vector<RopeTable<S>> temporal;
  for (int l = 0; l < cfg.level_count(); ++l)
    temporal.push_back(temporal_rope_table<S>(cfg.context_len, cfg.future_len,
                                              cfg.grid_h(l), cfg.grid_w(l),
                                              cfg.head_width(l), start_index));

  // patch embedding
  NodeId tokens = gather(g, assembled, plan.patch_map,
                         {f * cfg.grid_h(0) * cfg.grid_w(0),
                          cfg.in_channels() * cfg.patch * cfg.patch});
  tokens = add_rowvec(g, matmul(g, tokens, g.param(p, "denoiser.embed.w")),
                      g.param(p, "denoiser.embed.b"));

  int last = cfg.level_count() - 1;
  std::vector<NodeId> skips;
  for (int l = 0; l < last; ++l) {
    const LevelSpec& level = cfg.levels[static_cast<size_t>(l)];
    std::string lp = "denoiser.l" + std::to_string(l) + ".";
    for (int i = 0; i < detail::down_block_count(level); ++i)
      tokens = detail::run_block(g, p, plan, lp + "down" + std::to_string(i) + ".",
                                 tokens, cond, l, temporal[static_cast<size_t>(l)]);
    skips.push_back(tokens);
    Index wl = level.width;
    tokens = gather(g, tokens, plan.down_maps[static_cast<size_t>(l)],
                    {f * cfg.grid_h(l + 1) * cfg.grid_w(l + 1), 4 * wl});
    tokens = add_rowvec(g, matmul(g, tokens, g.param(p, lp + "down.w")),
                        g.param(p, lp + "down.b"));
  }

  {
    const LevelSpec& level = cfg.levels[static_cast<size_t>(last)];
    std::string lp = "denoiser.l" + std::to_string(last) + ".";
    for (int i = 0; i < level.blocks; ++i)
      tokens = detail::run_block(g, p, plan, lp + "mid" + std::to_string(i) + ".",
                                 tokens, cond, last, temporal[static_cast<size_t>(last)]);
  }

  for (int l = last - 1; l >= 0; --l) {
    const LevelSpec& level = cfg.levels[static_cast<size_t>(l)];
    std::string lp = "denoiser.l" + std::to_string(l) + ".";
    tokens = add_rowvec(g, matmul(g, tokens, g.param(p, lp + "up.w")),
                        g.param(p, lp + "up.b"));
    tokens = gather(g, tokens, plan.up_maps[static_cast<size_t>(l)],
                    {f * cfg.grid_h(l) * cfg.grid_w(l), level.width});
    tokens = add_rowvec(
        g, matmul(g, concat_cols(g, tokens, skips[static_cast<size_t>(l)]),
                  g.param(p, lp + "merge.w")),
        g.param(p, lp + "merge.b"));
    for (int i = 0; i < detail::up_block_count(level); ++i)
      tokens = detail::run_block(g, p, plan, lp + "up" + std::to_string(i) + ".",
                                 tokens, cond, l, temporal[static_cast<size_t>(l)]);
  }

  // read future tokens only, project to pixels
  Index s0 = cfg.grid_h(0) * cfg.grid_w(0);
  NodeId future = slice_flat(g, mul_rowvec(g, rms_norm(g, tokens),
                                           g.param(p, "denoiser.head.norm.gain")),
                             cfg.context_len * s0 * cfg.levels[0].width,
                             {cfg.future_len * s0, cfg.levels[0].width});
  NodeId pixels = add_rowvec(g, matmul(g, future, g.param(p, "denoiser.head.w")),
                             g.param(p, "denoiser.head.b"));
  return gather(g, pixels, plan.unpatch_map,
                {cfg.future_len, cfg.channels, cfg.height, cfg.width});
}

}  // namespace framecast
