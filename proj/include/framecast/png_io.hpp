#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "framecast/tensor.hpp"

namespace framecast {

namespace detail {

inline void png_put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& payload) {
  png_put_u32(out, static_cast<std::uint32_t>(payload.size()));
  size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  png_put_u32(out, crc);
}

}  // namespace detail

/// Writes an 8-bit PNG. data is row-major, interleaved when channels == 3.
inline void write_png(const std::string& path, const std::uint8_t* data, Index width,
                      Index height, int channels) {
  if (channels != 1 && channels != 3)
    throw std::invalid_argument("write_png: channels must be 1 (gray) or 3 (rgb)");

  // filter byte 0 in front of every scanline
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<size_t>(height * (width * channels + 1)));
  for (Index y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), data + y * width * channels,
               data + (y + 1) * width * channels);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("write_png: deflate failed");
  compressed.resize(bound);

  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  std::vector<std::uint8_t> ihdr;
  detail::png_put_u32(ihdr, static_cast<std::uint32_t>(width));
  detail::png_put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);                                  // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);              // gray / rgb
  ihdr.push_back(0);                                  // deflate
  ihdr.push_back(0);                                  // filter method
  ihdr.push_back(0);                                  // no interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", compressed);
  detail::png_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

/// One video frame (C, H, W) in [-1, 1] -> PNG (u8, planar to interleaved).
template <typename S>
void write_frame_png(const std::string& path, const Tensor<S>& frame) {
  const Shape& s = frame.shape();
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3))
    throw std::invalid_argument("write_frame_png: expected (1|3, H, W), got " + shape_str(s));
  Index c = s[0], h = s[1], w = s[2];
  std::vector<std::uint8_t> bytes(static_cast<size_t>(c * h * w));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index ch = 0; ch < c; ++ch) {
        double v = static_cast<double>(frame.at(ch, y, x));
        double q = std::llround((std::min(1.0, std::max(-1.0, v)) + 1.0) * 127.5);
        bytes[static_cast<size_t>((y * w + x) * c + ch)] =
            static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, q)));
      }
  write_png(path, bytes.data(), w, h, static_cast<int>(c));
}

}  // namespace framecast
