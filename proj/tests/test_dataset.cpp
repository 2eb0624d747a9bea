#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "framecast/dataset.hpp"

using namespace framecast;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("framecast_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

GlyphSpec solid_spec(MotionClass mc, Index x0, Index y0, double speed) {
  GlyphSpec spec;
  spec.motion_class = mc;
  spec.glyph.fill(1);
  spec.x0 = x0;
  spec.y0 = y0;
  spec.speed = speed;
  return spec;
}

Index glyph_min_x(const Tensor<double>& frame) {
  // leftmost lit column (value > 0) of a (1,H,W) frame
  Index h = frame.shape()[1], w = frame.shape()[2];
  for (Index x = 0; x < w; ++x)
    for (Index y = 0; y < h; ++y)
      if (frame.at(Index(0), y, x) > 0) return x;
  return -1;
}

}  // namespace

TEST_CASE("translate-right moves the glyph by speed per frame") {
  auto spec = solid_spec(MotionClass::kTranslateRight, 4, 10, 1.0);
  auto video = generate_glyph_video<double>(spec, 12, 32, 32, 1);
  CHECK(video.class_label == 1);
  for (Index t = 0; t < 12; ++t) {
    Tensor<double> frame = Tensor<double>({1, 32, 32});
    frame.array() = video.frames.array().segment(t * 32 * 32, 32 * 32);
    CHECK(glyph_min_x(frame) == (4 + t) % 32);
  }
}

TEST_CASE("pulse-static repeats with its period") {
  auto spec = solid_spec(MotionClass::kPulseStatic, 10, 10, 2.0);
  Index period = pulse_period(2.0);
  auto video = generate_glyph_video<double>(spec, 3 * period, 32, 32, 2);
  Index fsz = 32 * 32;
  for (Index t = 0; t + period < video.length(); ++t)
    for (Index i = 0; i < fsz; ++i)
      CHECK(video.frames[t * fsz + i] == video.frames[(t + period) * fsz + i]);
}

TEST_CASE("bounce-vertical matches a step-by-step reflection simulation") {
  auto spec = solid_spec(MotionClass::kBounceVertical, 12, 3, 2.0);
  auto video = generate_glyph_video<double>(spec, 40, 32, 32, 3);

  // independent simulator: reflect velocity at [0, H-7]
  double pos = 3.0, vel = 2.0;
  const double range = 32 - kGlyphSize;
  for (Index t = 0; t < 40; ++t) {
    // glyph top row should sit at round(pos)
    Index expect_y = std::llround(pos);
    Index got_y = -1;
    for (Index y = 0; y < 32 && got_y < 0; ++y)
      if (video.frames.at(t, Index(0), y, Index(12)) > 0) got_y = y;
    CHECK(got_y == expect_y);
    pos += vel;
    if (pos > range) {
      pos = 2 * range - pos;
      vel = -vel;
    } else if (pos < 0) {
      pos = -pos;
      vel = -vel;
    }
  }
}

TEST_CASE("glyph generator is deterministic and validates input") {
  GlyphSpec spec;  // all-zero stamp: randomized from seed
  spec.motion_class = MotionClass::kCircular;
  auto a = generate_glyph_video<double>(spec, 8, 32, 32, 9);
  auto b = generate_glyph_video<double>(spec, 8, 32, 32, 9);
  auto c = generate_glyph_video<double>(spec, 8, 32, 32, 10);
  CHECK(max_abs_diff(a.frames, b.frames) == 0.0);
  CHECK(max_abs_diff(a.frames, c.frames) > 0.0);
  CHECK_THROWS_AS(generate_glyph_video<double>(spec, 8, 8, 8, 1), std::domain_error);
  CHECK_THROWS_AS(generate_glyph_video<double>(spec, 0, 32, 32, 1), std::domain_error);
}

TEST_CASE("closed-form oracle matches every generated frame") {
  // exhaustive per-class check against an independently rendered frame
  for (int mc = 0; mc < kMotionClassCount; ++mc) {
    GlyphSpec spec;
    spec.motion_class = static_cast<MotionClass>(mc);
    spec.glyph = random_glyph(100 + static_cast<std::uint64_t>(mc));
    spec.x0 = 9;
    spec.y0 = 6;
    spec.speed = 1.0;
    auto video = generate_glyph_video<double>(spec, 63, 32, 32, 4);
    for (Index t = 0; t < 63; ++t) {
      GlyphState st = glyph_state_at(spec, t, 32, 32);
      Tensor<double> expect = Tensor<double>::full({1, 32, 32}, -1.0);
      for (Index gy = 0; gy < kGlyphSize; ++gy)
        for (Index gx = 0; gx < kGlyphSize; ++gx) {
          if (!spec.glyph[static_cast<size_t>(gy * kGlyphSize + gx)]) continue;
          Index y = st.y + gy, x = st.x + gx;
          if (st.wrap) {
            y = ((y % 32) + 32) % 32;
            x = ((x % 32) + 32) % 32;
          } else if (y < 0 || y >= 32 || x < 0 || x >= 32) {
            continue;
          }
          expect.at(Index(0), y, x) = 2.0 * st.intensity - 1.0;
        }
      for (Index i = 0; i < 32 * 32; ++i)
        CHECK(video.frames[t * 32 * 32 + i] == expect[i]);
    }
  }
}

TEST_CASE("packed video round trip") {
  TempDir tmp;
  RandomStream s(derive_key(55));
  VideoSequence<double> video;
  video.frames = Tensor<double>({3, 1, 8, 8});
  for (Index i = 0; i < video.frames.size(); ++i)
    video.frames[i] = std::clamp(s.normal(static_cast<std::uint64_t>(i)) * 0.5, -1.0, 1.0);
  video.class_label = 4;

  std::string path = (tmp.path / "v.arfv").string();
  write_packed_video(video, path);
  auto loaded = load_packed_video<double>(path);

  CHECK(loaded.frames.shape() == video.frames.shape());
  CHECK(loaded.class_label == 4);
  CHECK(max_abs_diff(loaded.frames, video.frames) <= 1.0 / 127.5 + 1e-12);

  // write-back of the quantized video is bit-identical
  std::string path2 = (tmp.path / "v2.arfv").string();
  write_packed_video(loaded, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
}

TEST_CASE("u8 endpoint mapping") {
  TempDir tmp;
  VideoSequence<double> video;
  video.frames = Tensor<double>({1, 1, 1, 2});
  video.frames[0] = 1.0;
  video.frames[1] = -1.0;
  std::string path = (tmp.path / "e.arfv").string();
  write_packed_video(video, path);
  auto loaded = load_packed_video<double>(path);
  CHECK(loaded.frames[0] == 1.0);
  CHECK(loaded.frames[1] == -1.0);
  CHECK(quantize_unit(1.0) == 255);
  CHECK(quantize_unit(-1.0) == 0);
}

TEST_CASE("packed video error reporting") {
  TempDir tmp;
  std::string path = (tmp.path / "bad.arfv").string();

  SUBCASE("bad magic") {
    std::ofstream out(path, std::ios::binary);
    out << "NOPExxxxxxxxxxxxxxxxxxxxxxxxxxx";
    out.close();
    CHECK_THROWS_WITH_AS(load_packed_video<double>(path),
                         doctest::Contains("bad magic"), std::runtime_error);
  }
  SUBCASE("truncated payload reports the byte offset") {
    VideoSequence<double> video;
    video.frames = Tensor<double>({2, 1, 4, 4});
    write_packed_video(video, path);
    std::filesystem::resize_file(path, kPackedHeaderSize + 31);  // one byte short
    CHECK_THROWS_WITH_AS(load_packed_video<double>(path),
                         doctest::Contains(std::to_string(kPackedHeaderSize + 31).c_str()),
                         std::runtime_error);
  }
  SUBCASE("unsupported version") {
    VideoSequence<double> video;
    video.frames = Tensor<double>({1, 1, 4, 4});
    write_packed_video(video, path);
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    char v2[2] = {2, 0};
    f.write(v2, 2);
    f.close();
    CHECK_THROWS_WITH_AS(load_packed_video<double>(path),
                         doctest::Contains("version"), std::runtime_error);
  }
}

TEST_CASE("training sampler") {
  TempDir tmp;
  // small corpus of 3 videos, 40 frames each
  std::ofstream index((tmp.path / kCorpusIndexName).string());
  for (int v = 0; v < 3; ++v) {
    auto spec = solid_spec(static_cast<MotionClass>(v), 4 + v, 8, 1.0);
    auto video = generate_glyph_video<double>(spec, 40, 32, 32, static_cast<std::uint64_t>(v));
    std::string rel = "v" + std::to_string(v) + ".arfv";
    write_packed_video(video, (tmp.path / rel).string());
    index << rel << "\t" << video.class_label << "\n";
  }
  index.close();
  auto corpus = load_corpus<double>(tmp.path.string());
  REQUIRE(corpus.videos.size() == 3);

  TupleConfig cfg{10, 5};

  SUBCASE("deterministic given seed") {
    auto a = sample_training_batch(corpus, cfg, 16, 77);
    auto b = sample_training_batch(corpus, cfg, 16, 77);
    REQUIRE(a.size() == 16);
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].video_index == b[i].video_index);
      CHECK(a[i].shift == b[i].shift);
      CHECK(a[i].start_index == b[i].start_index);
      CHECK(max_abs_diff(a[i].future.frames, b[i].future.frames) == 0.0);
    }
  }
  SUBCASE("structural invariants hold for every sample") {
    auto batch = sample_training_batch(corpus, cfg, 200, 13);
    for (const auto& s : batch) {
      CHECK(s.shifted_start_index == s.start_index + s.shift);
      CHECK(s.shift >= 1);
      CHECK(s.shift <= cfg.future_len - 1);
      CHECK(s.context.start_index == 0);
      // windows stay inside the video
      CHECK(s.shifted_start_index + cfg.future_len <= 40);
      // overlap frames agree between the two windows (same source video)
      Index ov = cfg.future_len - s.shift;
      Index fsz = 1 * 32 * 32;
      for (Index i = 0; i < ov * fsz; ++i)
        CHECK(s.future.frames[s.shift * fsz + i] == s.shifted.frames[i]);
    }
  }
  SUBCASE("shift law is uniform") {
    int counts[5] = {0, 0, 0, 0, 0};
    const int n = 10000;
    for (int rep = 0; rep < n / 100; ++rep) {
      auto batch = sample_training_batch(corpus, cfg, 100,
                                         derive_key(1000, static_cast<std::uint64_t>(rep)));
      for (const auto& s : batch) counts[s.shift]++;
    }
    for (Index s = 1; s <= 4; ++s)
      CHECK(std::abs(counts[s] / static_cast<double>(n) - 0.25) < 0.02);
  }
  SUBCASE("sampler never exceeds video length on ragged corpora") {
    // property over random corpora with assorted lengths
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
      Corpus<double> ragged;
      RandomStream lens(derive_key(500, trial));
      for (int v = 0; v < 4; ++v) {
        Index extra = static_cast<Index>(lens.uniform_int(static_cast<std::uint64_t>(v), 20));
        auto spec = solid_spec(MotionClass::kTranslateLeft, 10, 10, 1.0);
        ragged.videos.push_back(generate_glyph_video<double>(
            spec, 19 + extra, 32, 32, trial * 10 + static_cast<std::uint64_t>(v)));
      }
      auto batch = sample_training_batch(ragged, cfg, 64, derive_key(trial));
      for (const auto& s : batch) {
        Index len = ragged.videos[static_cast<size_t>(s.video_index)].length();
        CHECK(s.shifted_start_index + cfg.future_len <= len);
      }
    }
  }
  SUBCASE("empty corpus is an error") {
    Corpus<double> empty;
    CHECK_THROWS(sample_training_batch(empty, cfg, 4, 1));
  }
  SUBCASE("too-short video is an error") {
    Corpus<double> shorty;
    auto spec = solid_spec(MotionClass::kTranslateLeft, 10, 10, 1.0);
    shorty.videos.push_back(generate_glyph_video<double>(spec, 18, 32, 32, 0));
    CHECK_THROWS(sample_training_batch(shorty, cfg, 4, 1));
  }
}

TEST_CASE("corpus index label mismatch is detected") {
  TempDir tmp;
  auto spec = solid_spec(MotionClass::kTranslateLeft, 4, 8, 1.0);
  auto video = generate_glyph_video<double>(spec, 20, 32, 32, 1);
  write_packed_video(video, (tmp.path / "v.arfv").string());
  std::ofstream index((tmp.path / kCorpusIndexName).string());
  index << "v.arfv\t3\n";  // wrong label
  index.close();
  CHECK_THROWS_WITH_AS(load_corpus<double>(tmp.path.string()),
                       doctest::Contains("disagrees"), std::runtime_error);
}
