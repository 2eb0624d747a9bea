#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "framecast/dataset.hpp"
#include "framecast/tensor.hpp"

namespace framecast {

// Frames are stored in [-1, 1]; both metrics work on the [0, 1] scale.
// Predictions are compared after the same u8 quantization round trip the
// storage format applies, so on-disk and in-memory evaluations agree.

constexpr double kPsnrCap = 100.0;

template <typename S>
double psnr(const Tensor<S>& pred, const Tensor<S>& truth) {
  if (!same_shape(pred, truth)) throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    double d = (static_cast<double>(pred[i]) - static_cast<double>(truth[i])) / 2.0;
    mse += d * d;
  }
  mse /= static_cast<double>(pred.size());
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

namespace detail {

inline const std::vector<double>& ssim_window() {
  // 11x11 gaussian, sigma 1.5, normalized
  static std::vector<double> w = [] {
    std::vector<double> out(121);
    double total = 0;
    for (int dy = -5; dy <= 5; ++dy)
      for (int dx = -5; dx <= 5; ++dx) {
        double v = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
        out[static_cast<size_t>((dy + 5) * 11 + dx + 5)] = v;
        total += v;
      }
    for (double& v : out) v /= total;
    return out;
  }();
  return w;
}

/// Single-channel SSIM with an 11x11 gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over positions where the
/// window fits entirely inside the image.
template <typename S>
double ssim_channel(const S* a, const S* b, Index h, Index w) {
  if (h < 11 || w < 11)
    throw std::invalid_argument("ssim: frames must be at least 11x11");
  const std::vector<double>& win = ssim_window();
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  double total = 0;
  Index count = 0;
  for (Index y = 5; y < h - 5; ++y) {
    for (Index x = 5; x < w - 5; ++x) {
      double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
      for (int dy = -5; dy <= 5; ++dy)
        for (int dx = -5; dx <= 5; ++dx) {
          double wv = win[static_cast<size_t>((dy + 5) * 11 + dx + 5)];
          double va = (static_cast<double>(a[(y + dy) * w + x + dx]) + 1.0) / 2.0;
          double vb = (static_cast<double>(b[(y + dy) * w + x + dx]) + 1.0) / 2.0;
          mu_a += wv * va;
          mu_b += wv * vb;
          aa += wv * va * va;
          bb += wv * vb * vb;
          ab += wv * va * vb;
        }
      double var_a = aa - mu_a * mu_a;
      double var_b = bb - mu_b * mu_b;
      double cov = ab - mu_a * mu_b;
      double value = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                     ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
      total += value;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace detail

/// Mean SSIM over channels of a (C, H, W) frame pair.
template <typename S>
double ssim(const Tensor<S>& pred, const Tensor<S>& truth) {
  if (!same_shape(pred, truth)) throw std::invalid_argument("ssim: shape mismatch");
  const Shape& s = pred.shape();
  if (s.size() != 3) throw std::invalid_argument("ssim: expected (C, H, W)");
  double total = 0;
  for (Index c = 0; c < s[0]; ++c)
    total += detail::ssim_channel(pred.data() + c * s[1] * s[2],
                                  truth.data() + c * s[1] * s[2], s[1], s[2]);
  return total / static_cast<double>(s[0]);
}

/// u8 storage round trip, matching how predictions land on disk.
template <typename S>
Tensor<S> quantized_unit(const Tensor<S>& frames) {
  Tensor<S> out(frames.shape());
  for (Index i = 0; i < frames.size(); ++i)
    out[i] = static_cast<S>(
        static_cast<double>(quantize_unit(static_cast<double>(frames[i]))) / 127.5 - 1.0);
  return out;
}

struct FrameMetrics {
  Index frame_index = 0;
  double psnr = 0;
  double ssim = 0;
};

/// Accumulates per-frame metrics over an evaluation set: feed one
/// (predicted future, true future) pair per video, then read the averaged
/// degradation curve. Rows are indexed by absolute frame number starting at
/// the first predicted frame.
template <typename S>
class FrameCurveAccumulator {
 public:
  explicit FrameCurveAccumulator(Index first_frame_index)
      : first_frame_(first_frame_index) {}

  void add(const Tensor<S>& pred_future, const Tensor<S>& true_future) {
    if (!same_shape(pred_future, true_future))
      throw std::invalid_argument("frame curves: shape mismatch");
    const Shape& s = pred_future.shape();
    if (sums_.empty()) {
      sums_.resize(static_cast<size_t>(s[0]));
    } else if (sums_.size() != static_cast<size_t>(s[0])) {
      throw std::invalid_argument("frame curves: inconsistent frame count");
    }
    Index fsz = s[1] * s[2] * s[3];
    for (Index f = 0; f < s[0]; ++f) {
      Tensor<S> pf({s[1], s[2], s[3]}), tf({s[1], s[2], s[3]});
      pf.array() = pred_future.array().segment(f * fsz, fsz);
      tf.array() = true_future.array().segment(f * fsz, fsz);
      sums_[static_cast<size_t>(f)].psnr += psnr(pf, tf);
      sums_[static_cast<size_t>(f)].ssim += ssim(pf, tf);
    }
    ++videos_;
  }

  std::vector<FrameMetrics> rows() const {
    if (videos_ == 0) throw std::runtime_error("frame curves: no videos accumulated");
    std::vector<FrameMetrics> out;
    out.reserve(sums_.size());
    for (size_t f = 0; f < sums_.size(); ++f)
      out.push_back({first_frame_ + static_cast<Index>(f),
                     sums_[f].psnr / static_cast<double>(videos_),
                     sums_[f].ssim / static_cast<double>(videos_)});
    return out;
  }

  int video_count() const { return videos_; }

 private:
  struct Sums {
    double psnr = 0;
    double ssim = 0;
  };
  Index first_frame_;
  std::vector<Sums> sums_;
  int videos_ = 0;
};

inline void write_curve_csv(const std::string& path, const std::vector<FrameMetrics>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "frame_index,psnr,ssim\n";
  for (const FrameMetrics& r : rows)
    out << r.frame_index << "," << r.psnr << "," << r.ssim << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace framecast
