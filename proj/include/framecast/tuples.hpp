#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "framecast/tensor.hpp"

namespace framecast {

/// Frame-window bookkeeping. A video splits into one context window of
/// `context_len` frames at index 0 and consecutive future windows of
/// `future_len` frames each; the n-th future window (n >= 1) starts at
/// context_len + (n-1)*future_len. A shifted window moves a future window
/// forward by s in {1..future_len-1} so the two windows share future_len-s
/// absolute frame indices.
struct TupleConfig {
  Index context_len = 10;  // F_p
  Index future_len = 5;    // F_f

  void validate() const {
    if (context_len < 2)
      throw std::invalid_argument("TupleConfig: context_len must be >= 2");
    if (future_len < 2)
      throw std::invalid_argument("TupleConfig: future_len must be >= 2");
  }
};

enum class TupleRole { kContext, kFuture };

/// A contiguous frame window, frames stored (F, C, H, W) in [-1, 1].
template <typename S>
struct FrameTuple {
  Tensor<S> frames;
  Index start_index = 0;
  TupleRole role = TupleRole::kFuture;

  Index length() const { return frames.shape()[0]; }
};

struct OverlapSpec {
  Index shift = 1;
  Index overlap_len = 0;
};

inline OverlapSpec make_overlap(Index shift, const TupleConfig& cfg) {
  cfg.validate();
  if (shift < 1 || shift > cfg.future_len - 1)
    throw std::domain_error("shift " + std::to_string(shift) + " outside {1.." +
                            std::to_string(cfg.future_len - 1) + "}");
  return OverlapSpec{shift, cfg.future_len - shift};
}

/// Start index of the n-th future window (n >= 1).
inline Index initial_frame_index(Index n, const TupleConfig& cfg) {
  cfg.validate();
  if (n < 1) throw std::domain_error("tuple ordinal must be >= 1, got " + std::to_string(n));
  return cfg.context_len + (n - 1) * cfg.future_len;
}

/// Positions of the shared absolute frames within the base window and within
/// the shifted window. Both lists have length future_len - shift and refer to
/// the same absolute indices.
inline std::pair<std::vector<Index>, std::vector<Index>> overlap_positions(
    Index shift, const TupleConfig& cfg) {
  OverlapSpec ov = make_overlap(shift, cfg);
  std::vector<Index> in_base, in_shifted;
  in_base.reserve(static_cast<size_t>(ov.overlap_len));
  in_shifted.reserve(static_cast<size_t>(ov.overlap_len));
  for (Index p = shift; p < cfg.future_len; ++p) in_base.push_back(p);
  for (Index p = 0; p < cfg.future_len - shift; ++p) in_shifted.push_back(p);
  return {std::move(in_base), std::move(in_shifted)};
}

namespace detail {

template <typename S>
Tensor<S> copy_frames(const Tensor<S>& video, Index first, Index count) {
  const Shape& s = video.shape();  // (F, C, H, W)
  Index frame = s[1] * s[2] * s[3];
  Tensor<S> out({count, s[1], s[2], s[3]});
  out.array() = video.array().segment(first * frame, count * frame);
  return out;
}

inline void check_video_length(Index have, Index need, const std::string& what) {
  if (have < need)
    throw std::out_of_range(what + " requires " + std::to_string(need) +
                            " frames, video has " + std::to_string(have));
}

}  // namespace detail

template <typename S>
FrameTuple<S> slice_context_tuple(const Tensor<S>& video, const TupleConfig& cfg) {
  cfg.validate();
  detail::check_video_length(video.shape()[0], cfg.context_len, "context window");
  return FrameTuple<S>{detail::copy_frames(video, 0, cfg.context_len), 0,
                       TupleRole::kContext};
}

template <typename S>
FrameTuple<S> slice_future_tuple(const Tensor<S>& video, Index n,
                                 const TupleConfig& cfg) {
  Index k = initial_frame_index(n, cfg);
  detail::check_video_length(video.shape()[0], k + cfg.future_len,
                             "future window " + std::to_string(n));
  return FrameTuple<S>{detail::copy_frames(video, k, cfg.future_len), k,
                       TupleRole::kFuture};
}

template <typename S>
FrameTuple<S> slice_shifted_tuple(const Tensor<S>& video, Index n, Index shift,
                                  const TupleConfig& cfg) {
  make_overlap(shift, cfg);  // validates shift range
  Index k = initial_frame_index(n, cfg) + shift;
  detail::check_video_length(video.shape()[0], k + cfg.future_len,
                             "shifted window " + std::to_string(n));
  return FrameTuple<S>{detail::copy_frames(video, k, cfg.future_len), k,
                       TupleRole::kFuture};
}

}  // namespace framecast
