#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "framecast/rng.hpp"
#include "framecast/tensor.hpp"
#include "framecast/tuples.hpp"

namespace framecast {

template <typename S>
struct VideoSequence {
  Tensor<S> frames;  // (F, C, H, W) in [-1, 1]
  int class_label = 0;
  std::string source_id;

  Index length() const { return frames.shape()[0]; }
  Index channels() const { return frames.shape()[1]; }
  Index height() const { return frames.shape()[2]; }
  Index width() const { return frames.shape()[3]; }
};

// ---------------------------------------------------------------------------
// synthetic glyph videos
// ---------------------------------------------------------------------------

enum class MotionClass : int {
  kTranslateLeft = 0,
  kTranslateRight = 1,
  kTranslateDiag = 2,
  kCircular = 3,
  kBounceVertical = 4,
  kPulseStatic = 5,
};
constexpr int kMotionClassCount = 6;

constexpr Index kGlyphSize = 7;

/// One moving glyph on a black background. Every frame is a closed-form
/// function of t, so exact future frames are available as test oracles at
/// any horizon. Translate classes wrap toroidally; bounce reflects at the
/// borders; pulse modulates intensity at a fixed integer period.
struct GlyphSpec {
  MotionClass motion_class = MotionClass::kTranslateRight;
  std::array<std::uint8_t, kGlyphSize * kGlyphSize> glyph{};  // all-zero: randomize from seed
  Index x0 = 4;
  Index y0 = 4;
  double speed = 1.0;
};

struct GlyphState {
  Index x = 0;
  Index y = 0;
  double intensity = 1.0;  // in [0, 1]
  bool wrap = false;
};

inline Index pulse_period(double speed) {
  return std::max<Index>(2, std::llround(16.0 / std::max(0.125, speed)));
}

/// Closed-form glyph placement at frame t.
inline GlyphState glyph_state_at(const GlyphSpec& spec, Index t, Index height,
                                 Index width) {
  GlyphState st;
  st.x = spec.x0;
  st.y = spec.y0;
  double d = spec.speed * static_cast<double>(t);
  switch (spec.motion_class) {
    case MotionClass::kTranslateLeft:
      st.x = spec.x0 - std::llround(d);
      st.wrap = true;
      break;
    case MotionClass::kTranslateRight:
      st.x = spec.x0 + std::llround(d);
      st.wrap = true;
      break;
    case MotionClass::kTranslateDiag:
      st.x = spec.x0 + std::llround(d);
      st.y = spec.y0 + std::llround(d);
      st.wrap = true;
      break;
    case MotionClass::kCircular: {
      double cx = (static_cast<double>(width) - kGlyphSize) / 2.0;
      double cy = (static_cast<double>(height) - kGlyphSize) / 2.0;
      double rmax = std::min(cx, cy) - 1.0;
      double r = std::hypot(static_cast<double>(spec.x0) - cx,
                            static_cast<double>(spec.y0) - cy);
      r = std::min(std::max(r, 2.0), rmax);
      double theta0 = std::atan2(static_cast<double>(spec.y0) - cy,
                                 static_cast<double>(spec.x0) - cx);
      double theta = theta0 + spec.speed * static_cast<double>(t) *
                                  (2.0 * 3.14159265358979323846 / 32.0);
      st.x = std::llround(cx + r * std::cos(theta));
      st.y = std::llround(cy + r * std::sin(theta));
      break;
    }
    case MotionClass::kBounceVertical: {
      double range = static_cast<double>(height - kGlyphSize);
      double period = 2.0 * range;
      double u = std::fmod(static_cast<double>(spec.y0) + d, period);
      if (u < 0) u += period;
      st.y = std::llround(u <= range ? u : period - u);
      break;
    }
    case MotionClass::kPulseStatic: {
      Index p = pulse_period(spec.speed);
      Index phase = t % p;
      st.intensity =
          0.5 * (1.0 + std::cos(2.0 * 3.14159265358979323846 *
                                static_cast<double>(phase) / static_cast<double>(p)));
      break;
    }
  }
  return st;
}

inline std::array<std::uint8_t, kGlyphSize * kGlyphSize> random_glyph(
    std::uint64_t seed) {
  std::array<std::uint8_t, kGlyphSize * kGlyphSize> stamp{};
  RandomStream stream(derive_key(seed, 0x67lu /*'g'*/));
  for (size_t i = 0; i < stamp.size(); ++i)
    stamp[i] = stream.uniform(i) < 0.55 ? 1 : 0;
  // plus-shaped core so the stamp never degenerates to near-empty
  for (Index i = 0; i < kGlyphSize; ++i) {
    stamp[static_cast<size_t>(3 * kGlyphSize + i)] = 1;
    stamp[static_cast<size_t>(i * kGlyphSize + 3)] = 1;
  }
  return stamp;
}

template <typename S>
VideoSequence<S> generate_glyph_video(const GlyphSpec& spec, Index num_frames,
                                      Index height, Index width,
                                      std::uint64_t seed) {
  if (num_frames < 1) throw std::domain_error("num_frames must be >= 1");
  if (height < 16 || width < 16)
    throw std::domain_error("frame size must be at least 16x16");
  if (kGlyphSize > height || kGlyphSize > width)
    throw std::domain_error("glyph larger than frame");

  auto stamp = spec.glyph;
  bool empty = true;
  for (auto b : stamp) empty = empty && b == 0;
  if (empty) stamp = random_glyph(seed);

  VideoSequence<S> video;
  video.frames = Tensor<S>::full({num_frames, 1, height, width}, S(-1));
  video.class_label = static_cast<int>(spec.motion_class);
  video.source_id = "glyph-" + std::to_string(static_cast<int>(spec.motion_class)) +
                    "-" + std::to_string(seed);

  for (Index t = 0; t < num_frames; ++t) {
    GlyphState st = glyph_state_at(spec, t, height, width);
    S value = static_cast<S>(2.0 * st.intensity - 1.0);
    for (Index gy = 0; gy < kGlyphSize; ++gy) {
      for (Index gx = 0; gx < kGlyphSize; ++gx) {
        if (!stamp[static_cast<size_t>(gy * kGlyphSize + gx)]) continue;
        Index y = st.y + gy;
        Index x = st.x + gx;
        if (st.wrap) {
          y = ((y % height) + height) % height;
          x = ((x % width) + width) % width;
        } else if (y < 0 || y >= height || x < 0 || x >= width) {
          continue;  // non-wrap classes keep the glyph inside by construction
        }
        video.frames.at(t, Index(0), y, x) = value;
      }
    }
  }
  return video;
}

// ---------------------------------------------------------------------------
// packed video container (.arfv)
// ---------------------------------------------------------------------------
//
// Little-endian layout:
//   0   magic "ARFV"
//   4   version  u16 (=1)
//   6   frames   u32
//   10  channels u16
//   12  height   u16
//   14  width    u16
//   16  class    u16
//   18  reserved 6 bytes (zero)
//   24  payload  frames*channels*height*width bytes, u8,
//       row-major (frame, channel, row, col); u8 v maps to v/127.5 - 1.

constexpr Index kPackedHeaderSize = 24;

inline std::uint8_t quantize_unit(double v) {
  double q = std::llround((v + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, q)));
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& buf, std::uint16_t v) {
  buf.push_back(static_cast<std::uint8_t>(v & 0xFF));
  buf.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

template <typename S>
void write_packed_video(const VideoSequence<S>& video, const std::string& path) {
  const Shape& s = video.frames.shape();
  std::vector<std::uint8_t> buf;
  buf.reserve(static_cast<size_t>(kPackedHeaderSize + video.frames.size()));
  buf.insert(buf.end(), {'A', 'R', 'F', 'V'});
  detail::put_u16(buf, 1);
  detail::put_u32(buf, static_cast<std::uint32_t>(s[0]));
  detail::put_u16(buf, static_cast<std::uint16_t>(s[1]));
  detail::put_u16(buf, static_cast<std::uint16_t>(s[2]));
  detail::put_u16(buf, static_cast<std::uint16_t>(s[3]));
  detail::put_u16(buf, static_cast<std::uint16_t>(video.class_label));
  for (int i = 0; i < 6; ++i) buf.push_back(0);
  for (Index i = 0; i < video.frames.size(); ++i)
    buf.push_back(quantize_unit(static_cast<double>(video.frames[i])));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

template <typename S>
VideoSequence<S> load_packed_video(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());

  if (buf.size() < static_cast<size_t>(kPackedHeaderSize))
    throw std::runtime_error(path + ": truncated header at offset " +
                             std::to_string(buf.size()));
  if (!(buf[0] == 'A' && buf[1] == 'R' && buf[2] == 'F' && buf[3] == 'V'))
    throw std::runtime_error(path + ": bad magic at offset 0");
  std::uint16_t version = detail::get_u16(&buf[4]);
  if (version != 1)
    throw std::runtime_error(path + ": unsupported version " +
                             std::to_string(version) + " at offset 4");
  Index frames = detail::get_u32(&buf[6]);
  Index channels = detail::get_u16(&buf[10]);
  Index height = detail::get_u16(&buf[12]);
  Index width = detail::get_u16(&buf[14]);
  int class_label = detail::get_u16(&buf[16]);
  Index payload = frames * channels * height * width;
  if (static_cast<Index>(buf.size()) != kPackedHeaderSize + payload) {
    Index bad_offset = std::min<Index>(static_cast<Index>(buf.size()),
                                       kPackedHeaderSize + payload);
    throw std::runtime_error(path + ": payload size mismatch at offset " +
                             std::to_string(bad_offset) + " (expected " +
                             std::to_string(kPackedHeaderSize + payload) +
                             " bytes total, got " + std::to_string(buf.size()) + ")");
  }

  VideoSequence<S> video;
  video.frames = Tensor<S>({frames, channels, height, width});
  for (Index i = 0; i < payload; ++i)
    video.frames[i] =
        static_cast<S>(static_cast<double>(buf[static_cast<size_t>(kPackedHeaderSize + i)]) / 127.5 - 1.0);
  video.class_label = class_label;
  video.source_id = path;
  return video;
}

// ---------------------------------------------------------------------------
// corpus (directory of .arfv files + tab-separated index)
// ---------------------------------------------------------------------------

constexpr const char* kCorpusIndexName = "index.txt";

template <typename S>
struct Corpus {
  std::vector<VideoSequence<S>> videos;
};

template <typename S>
Corpus<S> load_corpus(const std::string& dir) {
  std::string index_path = (std::filesystem::path(dir) / kCorpusIndexName).string();
  std::ifstream in(index_path);
  if (!in) throw std::runtime_error("cannot open corpus index: " + index_path);
  Corpus<S> corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(index_path + ": malformed line: " + line);
    std::string rel = line.substr(0, tab);
    int label = std::stoi(line.substr(tab + 1));
    auto video =
        load_packed_video<S>((std::filesystem::path(dir) / rel).string());
    if (video.class_label != label)
      throw std::runtime_error(rel + ": index label " + std::to_string(label) +
                               " disagrees with header label " +
                               std::to_string(video.class_label));
    corpus.videos.push_back(std::move(video));
  }
  if (corpus.videos.empty()) throw std::runtime_error("empty corpus: " + dir);
  return corpus;
}

// ---------------------------------------------------------------------------
// training sampler
// ---------------------------------------------------------------------------

template <typename S>
struct TrainingSample {
  FrameTuple<S> context;  // V_0
  FrameTuple<S> future;   // V_n
  FrameTuple<S> shifted;  // the same window moved forward by `shift`
  Index start_index = 0;          // k_n
  Index shifted_start_index = 0;  // k_n + shift
  int class_label = 0;
  Index shift = 1;
  int video_index = 0;
};

/// Uniformly draws (video, shift, ordinal) and slices the three windows.
/// Pure function of (corpus, cfg, batch, seed): calling twice with the same
/// seed yields identical samples.
template <typename S>
std::vector<TrainingSample<S>> sample_training_batch(const Corpus<S>& corpus,
                                                     const TupleConfig& cfg,
                                                     int batch,
                                                     std::uint64_t seed) {
  cfg.validate();
  if (corpus.videos.empty()) throw std::runtime_error("sample_training_batch: empty corpus");
  Index min_len = cfg.context_len + cfg.future_len + (cfg.future_len - 1);
  for (size_t v = 0; v < corpus.videos.size(); ++v)
    if (corpus.videos[v].length() < min_len)
      throw std::runtime_error("video " + std::to_string(v) + " has " +
                               std::to_string(corpus.videos[v].length()) +
                               " frames; training needs at least " +
                               std::to_string(min_len));

  std::vector<TrainingSample<S>> out;
  out.reserve(static_cast<size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    RandomStream stream(derive_key(seed, 0x736D70lu /*'smp'*/, static_cast<std::uint64_t>(i)));
    auto vi = static_cast<int>(stream.uniform_int(0, corpus.videos.size()));
    const VideoSequence<S>& video = corpus.videos[static_cast<size_t>(vi)];
    Index shift = 1 + static_cast<Index>(stream.uniform_int(1, static_cast<std::uint64_t>(cfg.future_len - 1)));
    Index max_n = (video.length() - cfg.context_len - shift) / cfg.future_len;
    Index n = 1 + static_cast<Index>(stream.uniform_int(2, static_cast<std::uint64_t>(max_n)));

    TrainingSample<S> sample;
    sample.context = slice_context_tuple(video.frames, cfg);
    sample.future = slice_future_tuple(video.frames, n, cfg);
    sample.shifted = slice_shifted_tuple(video.frames, n, shift, cfg);
    sample.start_index = sample.future.start_index;
    sample.shifted_start_index = sample.shifted.start_index;
    sample.class_label = video.class_label;
    sample.shift = shift;
    sample.video_index = vi;
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace framecast
