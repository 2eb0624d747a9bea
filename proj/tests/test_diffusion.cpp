#include <doctest.h>

#include <cmath>
#include <vector>

#include "framecast/diffusion.hpp"

using namespace framecast;

namespace {

/// Tiny model for end-to-end checks: one global block at width 16 over
/// 8x8 frames, 2 context + 2 future frames.
VideoModel<double> tiny_model(double lambda_cst = 0.1) {
  MotionConfig mcfg;
  mcfg.d_m = 4;
  mcfg.d_c = 8;
  mcfg.heads = 2;
  mcfg.blocks = 1;
  mcfg.height = 8;
  mcfg.width = 8;
  DenoiserConfig dcfg;
  dcfg.patch = 4;
  dcfg.levels = {{BlockKind::kGlobal, 1, 16}};
  dcfg.d_m = 4;
  dcfg.context_len = 2;
  dcfg.future_len = 2;
  dcfg.height = 8;
  dcfg.width = 8;
  dcfg.cond_dim = 8;
  dcfg.motion_feat_h = 2;
  dcfg.motion_feat_w = 2;
  EdmConfig edm;
  edm.lambda_cst = lambda_cst;
  return make_video_model<double>(mcfg, dcfg, edm);
}

TrainingSample<double> make_sample(std::uint64_t key, const TupleConfig& tuples) {
  RandomStream s(derive_key(key));
  Tensor<double> video = s.normal_tensor<double>({8, 1, 8, 8});
  video.array() = video.array().tanh();  // keep values in [-1, 1]
  TrainingSample<double> sample;
  sample.context = slice_context_tuple(video, tuples);
  sample.future = slice_future_tuple(video, 1, tuples);
  sample.shifted = slice_shifted_tuple(video, 1, 1, tuples);
  sample.start_index = sample.future.start_index;
  sample.shifted_start_index = sample.shifted.start_index;
  sample.class_label = 3;
  sample.shift = 1;
  return sample;
}

}  // namespace

TEST_CASE("precondition coefficients") {
  EdmConfig cfg;
  SUBCASE("c_skip at sigma_data is one half") {
    CHECK(precondition_coeffs(cfg.sigma_data, cfg).c_skip == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("small sigma limit: identity") {
    auto c = precondition_coeffs(1e-9, cfg);
    CHECK(c.c_skip == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(c.c_out) < 1e-8);
  }
  SUBCASE("c_in^2 (sigma^2 + sigma_data^2) = 1 over random sigmas") {
    RandomStream s(derive_key(1));
    for (int i = 0; i < 100; ++i) {
      double sigma = std::exp(4.0 * s.normal(static_cast<std::uint64_t>(i)));
      auto c = precondition_coeffs(sigma, cfg);
      double lhs = c.c_in * c.c_in * (sigma * sigma + cfg.sigma_data * cfg.sigma_data);
      CHECK(std::abs(lhs - 1.0) <= 1e-12);
    }
  }
  SUBCASE("nonpositive sigma rejected") {
    CHECK_THROWS_AS(precondition_coeffs(0.0, cfg), std::domain_error);
    CHECK_THROWS_AS(precondition_coeffs(-1.0, cfg), std::domain_error);
  }
}

TEST_CASE("add_noise") {
  RandomStream s(derive_key(2));
  Tensor<double> frames = s.normal_tensor<double>({2, 1, 4, 4});
  SUBCASE("zero noise is identity") {
    Tensor<double> eps({2, 1, 4, 4});
    CHECK(max_abs_diff(add_noise(frames, 1.3, eps), frames) == 0.0);
  }
  SUBCASE("unit noise shifts by sigma") {
    Tensor<double> eps = Tensor<double>::full({2, 1, 4, 4}, 1.0);
    Tensor<double> noisy = add_noise(frames, 2.0, eps);
    for (Index i = 0; i < frames.size(); ++i)
      CHECK(noisy[i] == doctest::Approx(frames[i] + 2.0).epsilon(1e-15));
  }
  SUBCASE("empirical noise std matches sigma") {
    // 10^6 standard normal draws scaled by 0.7
    RandomStream n(derive_key(3));
    double sum = 0, sumsq = 0;
    const int cnt = 1000000;
    for (int i = 0; i < cnt; ++i) {
      double z = 0.7 * n.normal(static_cast<std::uint64_t>(i));
      sum += z;
      sumsq += z * z;
    }
    double var = sumsq / cnt - (sum / cnt) * (sum / cnt);
    CHECK(std::abs(std::sqrt(var) - 0.7) < 0.007);
  }
  SUBCASE("shape mismatch and bad sigma") {
    Tensor<double> eps({1, 1, 4, 4});
    CHECK_THROWS_AS(add_noise(frames, 1.0, eps), std::invalid_argument);
    Tensor<double> ok({2, 1, 4, 4});
    CHECK_THROWS_AS(add_noise(frames, 0.0, ok), std::domain_error);
  }
}

TEST_CASE("training sigma law") {
  EdmConfig cfg;
  RandomStream s(derive_key(4));
  std::vector<double> draws;
  const int n = 100000;
  draws.reserve(n);
  for (int i = 0; i < n; ++i)
    draws.push_back(sample_training_sigma(s, static_cast<std::uint64_t>(i), cfg));
  for (double d : draws) {
    CHECK(d >= cfg.sigma_min);
    CHECK(d <= cfg.sigma_max);
  }
  std::nth_element(draws.begin(), draws.begin() + n / 2, draws.end());
  double median = draws[n / 2];
  CHECK(std::abs(median - std::exp(-1.2)) / std::exp(-1.2) < 0.05);
}

TEST_CASE("denoise with the zero-initialized network is c_skip * x") {
  VideoModel<double> m = tiny_model();
  Parameters<double> p;
  init_model_params(p, m, 7);  // head projection starts at zero: raw output is 0

  RandomStream s(derive_key(8));
  Tensor<double> ctx = s.normal_tensor<double>({2, 1, 8, 8});
  Tensor<double> noisy = s.normal_tensor<double>({2, 1, 8, 8}, 1000);

  SUBCASE("generic sigma") {
    double sigma = 1.7;
    Graph<double> g;
    NodeId out = denoise(g, p, m, g.constant(noisy), g.constant(ctx), 2, 1, sigma);
    CHECK(g.val(out).shape() == Shape{2, 1, 8, 8});
    double c_skip = precondition_coeffs(sigma, m.edm).c_skip;
    for (Index i = 0; i < noisy.size(); ++i)
      CHECK(g.val(out)[i] == doctest::Approx(c_skip * noisy[i]).epsilon(1e-14));
  }
  SUBCASE("sigma = sigma_data halves the input") {
    Graph<double> g;
    NodeId out = denoise(g, p, m, g.constant(noisy), g.constant(ctx), 2, 1, m.edm.sigma_data);
    for (Index i = 0; i < noisy.size(); ++i)
      CHECK(g.val(out)[i] == doctest::Approx(0.5 * noisy[i]).epsilon(1e-14));
  }
}

TEST_CASE("preconditioning consistency against external recomposition") {
  VideoModel<double> m = tiny_model();
  Parameters<double> p;
  init_model_params(p, m, 9);
  RandomStream s(derive_key(10));
  for (int i = 0; i < p.count(); ++i) {
    if (p.name(i).find("head.w") != std::string::npos)
      for (Index e = 0; e < p[i].size(); ++e)
        p[i][e] = 0.3 * s.normal(static_cast<std::uint64_t>(e));
  }

  Tensor<double> ctx = s.normal_tensor<double>({2, 1, 8, 8}, 5000);
  Tensor<double> noisy = s.normal_tensor<double>({2, 1, 8, 8}, 9000);
  Tensor<double> motion = s.normal_tensor<double>({4, 4}, 13000);
  double sigma = 0.9;
  PreconditionCoeffs c = precondition_coeffs(sigma, m.edm);

  Graph<double> g;
  NodeId den = denoise_with_motion(g, p, m, g.constant(noisy), g.constant(ctx),
                                   g.constant(motion), sigma, 2);
  // external route: raw network on the scaled input, then recombine
  Tensor<double> scaled(noisy.shape());
  scaled.array() = noisy.array() * c.c_in;
  NodeId assembled = assemble_input(g, m.plan, g.constant(ctx), g.constant(scaled),
                                    g.constant(motion));
  NodeId raw = raw_denoiser_forward(g, p, m.plan, assembled, c.c_noise, 2);
  Tensor<double> skip_part(noisy.shape()), out_part(noisy.shape()), expect(noisy.shape());
  skip_part.array() = noisy.array() * c.c_skip;
  out_part.array() = g.val(raw).array() * c.c_out;
  expect.array() = skip_part.array() + out_part.array();
  CHECK(max_abs_diff(g.val(den), expect) == 0.0);
}

TEST_CASE("loss_diff") {
  EdmConfig edm;
  Graph<double> g;
  RandomStream s(derive_key(11));
  Tensor<double> v = s.normal_tensor<double>({5, 1, 6, 6});

  SUBCASE("zero at equality, positive otherwise, quadratic scaling") {
    NodeId zero = loss_diff(g, g.constant(v), g.constant(v), 0.5, edm);
    CHECK(g.val(zero)[0] == 0.0);

    Tensor<double> off1(v.shape()), off2(v.shape());
    off1.array() = v.array() + 0.1;
    off2.array() = v.array() + 0.2;
    double l1 = g.val(loss_diff(g, g.constant(v), g.constant(off1), 0.5, edm))[0];
    double l2 = g.val(loss_diff(g, g.constant(v), g.constant(off2), 0.5, edm))[0];
    CHECK(l1 > 0.0);
    CHECK(l2 == doctest::Approx(4.0 * l1).epsilon(1e-12));
  }
  SUBCASE("hand-computed weight at sigma = sigma_data = 0.5") {
    // lambda = (0.25 + 0.25) / (0.25 * 0.25) = 8; unit error on every pixel
    Tensor<double> ones_off(v.shape());
    ones_off.array() = v.array() + 1.0;
    double loss = g.val(loss_diff(g, g.constant(v), g.constant(ones_off), 0.5, edm))[0];
    CHECK(loss == doctest::Approx(8.0 * 1 * 6 * 6).epsilon(1e-12));
  }
}

TEST_CASE("loss_cst") {
  EdmConfig edm;
  TupleConfig tuples{4, 5};
  Graph<double> g;
  RandomStream s(derive_key(12));

  SUBCASE("identical overlap gives zero") {
    // build B so that B[0..2] == A[2..4] with shift 2
    Tensor<double> a = s.normal_tensor<double>({5, 1, 3, 3});
    Tensor<double> b = s.normal_tensor<double>({5, 1, 3, 3}, 777);
    b.array().segment(0, 3 * 9) = a.array().segment(2 * 9, 3 * 9);
    NodeId loss = loss_cst(g, g.constant(a), g.constant(b), 2, 0.7, edm, tuples);
    CHECK(g.val(loss)[0] == 0.0);
  }
  SUBCASE("maximal shift compares exactly one frame pair") {
    Tensor<double> a = s.normal_tensor<double>({5, 1, 3, 3}, 1);
    Tensor<double> b = s.normal_tensor<double>({5, 1, 3, 3}, 2);
    double loss = g.val(loss_cst(g, g.constant(a), g.constant(b), 4, 0.7, edm, tuples))[0];
    double manual = 0;
    for (Index i = 0; i < 9; ++i) {
      double d = a[4 * 9 + i] - b[i];
      manual += d * d;
    }
    manual *= loss_weight(0.7, edm);  // overlap length 1
    CHECK(loss == doctest::Approx(manual).epsilon(1e-12));
  }
  SUBCASE("orientation symmetry on random windows") {
    Tensor<double> a = s.normal_tensor<double>({5, 1, 3, 3}, 3);
    Tensor<double> b = s.normal_tensor<double>({5, 1, 3, 3}, 4);
    for (Index shift = 1; shift <= 4; ++shift) {
      double fwd = g.val(loss_cst(g, g.constant(a), g.constant(b), shift, 1.1, edm, tuples))[0];
      // mirrored evaluation: sum over the same absolute positions, roles swapped
      auto [in_a, in_b] = overlap_positions(shift, tuples);
      double mirrored = 0;
      for (size_t j = 0; j < in_a.size(); ++j)
        for (Index i = 0; i < 9; ++i) {
          double d = b[in_b[j] * 9 + i] - a[in_a[j] * 9 + i];
          mirrored += d * d;
        }
      mirrored *= loss_weight(1.1, edm) / static_cast<double>(in_a.size());
      CHECK(fwd == doctest::Approx(mirrored).epsilon(1e-12));
    }
  }
  SUBCASE("shift out of range") {
    Tensor<double> a({5, 1, 3, 3});
    CHECK_THROWS_AS(loss_cst(g, g.constant(a), g.constant(a), 5, 1.0, edm, tuples),
                    std::domain_error);
  }
}

TEST_CASE("loss_total composition") {
  TupleConfig tuples{2, 2};
  TrainingSample<double> sample = make_sample(20, tuples);

  SUBCASE("lambda 0 reduces to the averaged difference loss") {
    VideoModel<double> m0 = tiny_model(0.0);
    Parameters<double> p;
    init_model_params(p, m0, 21);
    RandomStream s(derive_key(22));
    Tensor<double> eps = s.normal_tensor<double>({2, 1, 8, 8});
    Tensor<double> eps2 = s.normal_tensor<double>({2, 1, 8, 8}, 4000);
    double sigma = 0.8;

    Graph<double> g;
    double total = g.val(loss_total(g, p, m0, sample, sigma, eps, eps2))[0];

    // manual recomposition (zero-init head: denoised = c_skip * noisy)
    double c_skip = precondition_coeffs(sigma, m0.edm).c_skip;
    auto part = [&](const Tensor<double>& truth, const Tensor<double>& noise) {
      Tensor<double> noisy = add_noise(truth, sigma, noise);
      double sumsq = 0;
      for (Index i = 0; i < truth.size(); ++i) {
        double d = truth[i] - c_skip * noisy[i];
        sumsq += d * d;
      }
      return loss_weight(sigma, m0.edm) / 2.0 * sumsq;
    };
    double manual = 0.5 * (part(sample.future.frames, eps) + part(sample.shifted.frames, eps2));
    CHECK(total == doctest::Approx(manual).epsilon(1e-12));
  }
  SUBCASE("ground-truth denoiser output zeroes every term") {
    // both difference terms vanish at equality, and the windows agree on
    // their shared absolute frames because they came from one video
    VideoModel<double> m = tiny_model(0.1);
    Graph<double> g;
    NodeId ld1 = loss_diff(g, g.constant(sample.future.frames),
                           g.constant(sample.future.frames), 0.9, m.edm);
    NodeId ld2 = loss_diff(g, g.constant(sample.shifted.frames),
                           g.constant(sample.shifted.frames), 0.9, m.edm);
    NodeId cst = loss_cst(g, g.constant(sample.future.frames),
                          g.constant(sample.shifted.frames), sample.shift, 0.9, m.edm,
                          m.tuples);
    CHECK(g.val(ld1)[0] == 0.0);
    CHECK(g.val(ld2)[0] == 0.0);
    CHECK(g.val(cst)[0] == 0.0);
  }
}

TEST_CASE("loss_total gradients match finite differences") {
  TupleConfig tuples{2, 2};
  TrainingSample<double> sample = make_sample(30, tuples);
  VideoModel<double> m = tiny_model(0.1);
  Parameters<double> p;
  init_model_params(p, m, 31);
  RandomStream s(derive_key(32));
  Tensor<double> eps = s.normal_tensor<double>({2, 1, 8, 8});
  Tensor<double> eps2 = s.normal_tensor<double>({2, 1, 8, 8}, 4000);
  double sigma = 0.6;

  auto build = [&](Graph<double>& g) {
    return loss_total(g, p, m, sample, sigma, eps, eps2);
  };
  Parameters<double> grads = p.zeros_like();
  {
    Graph<double> g;
    NodeId root = build(g);
    g.backward(root);
    g.add_param_grads(p, grads);
  }
  auto loss = [&]() {
    Graph<double> g;
    return g.val(build(g))[0];
  };
  std::vector<std::pair<int, Index>> entries;
  for (int pi = 0; pi < p.count(); ++pi) {
    Index n = p[pi].size();
    for (Index e = 0; e < n; e += std::max<Index>(1, n / 4)) entries.emplace_back(pi, e);
  }
  double err = gradcheck_entries(
      p, entries, loss, [&](int pi, Index e) { return grads[pi][e]; }, 1e-5);
  CHECK(err < 1e-3);
}

TEST_CASE("sampler schedule") {
  EdmConfig cfg;
  std::vector<double> s = sampler_schedule(cfg);
  REQUIRE(s.size() == 51);
  CHECK(s.front() == doctest::Approx(80.0).epsilon(1e-15));
  CHECK(s[49] == doctest::Approx(0.002).epsilon(1e-15));
  CHECK(s.back() == 0.0);
  for (size_t i = 0; i + 1 < s.size(); ++i) CHECK(s[i] > s[i + 1]);

  // independent high-precision evaluation at i = 25
  long double hi = std::pow(80.0L, 1.0L / 7.0L);
  long double lo = std::pow(0.002L, 1.0L / 7.0L);
  long double expect = std::pow(hi + 25.0L / 49.0L * (lo - hi), 7.0L);
  CHECK(s[25] == doctest::Approx(static_cast<double>(expect)).epsilon(1e-12));

  EdmConfig bad = cfg;
  bad.steps = 1;
  CHECK_THROWS_AS(sampler_schedule(bad), std::invalid_argument);
}

TEST_CASE("mixed noise moments") {
  Shape frame{1, 2, 2};
  SUBCASE("alpha 0: independent across frames") {
    NoiseStreams streams = make_noise_streams(50);
    double dot = 0, n = 0;
    for (int trial = 0; trial < 20000; ++trial) {
      NoiseStreams tr{derive_key(streams.shared_key, static_cast<std::uint64_t>(trial)),
                      derive_key(streams.frame_key, static_cast<std::uint64_t>(trial))};
      Tensor<double> eps = mixed_noise<double>(2, frame, 0.0, tr, 0);
      for (Index i = 0; i < 4; ++i) {
        dot += eps[i] * eps[4 + i];
        n += 1;
      }
    }
    CHECK(std::abs(dot / n) < 0.02);
  }
  SUBCASE("huge alpha: frames share one noise field") {
    NoiseStreams streams = make_noise_streams(51);
    Tensor<double> eps = mixed_noise<double>(3, frame, 1e9, streams, 7);
    for (Index f = 1; f < 3; ++f)
      for (Index i = 0; i < 4; ++i)
        CHECK(eps[f * 4 + i] == doctest::Approx(eps[i]).epsilon(1e-6));
  }
  SUBCASE("alpha 1: unit variance, correlation one half") {
    NoiseStreams base = make_noise_streams(52);
    const int trials = 100000;
    double var = 0, covar = 0, mean_a = 0, mean_b = 0;
    for (int t = 0; t < trials; ++t) {
      NoiseStreams tr{derive_key(base.shared_key, static_cast<std::uint64_t>(t)),
                      derive_key(base.frame_key, static_cast<std::uint64_t>(t))};
      Tensor<double> eps = mixed_noise<double>(2, Shape{1, 1, 1}, 1.0, tr, 3);
      mean_a += eps[0];
      mean_b += eps[1];
      var += eps[0] * eps[0];
      covar += eps[0] * eps[1];
    }
    mean_a /= trials;
    mean_b /= trials;
    double v = var / trials - mean_a * mean_a;
    double c = covar / trials - mean_a * mean_b;
    CHECK(std::abs(v - 1.0) < 0.02);
    CHECK(std::abs(c - 0.5) < 0.05);
  }
  SUBCASE("same absolute frame index regenerates identical noise") {
    NoiseStreams streams = make_noise_streams(53);
    Tensor<double> a = mixed_noise<double>(3, frame, 1.0, streams, 10);
    Tensor<double> b = mixed_noise<double>(2, frame, 1.0, streams, 12);
    // frame 12 appears in both windows at different offsets
    for (Index i = 0; i < 4; ++i) CHECK(a[2 * 4 + i] == b[i]);
  }
}

TEST_CASE("lms_sample with a constant-target oracle recovers the target") {
  EdmConfig cfg;  // T = 50, order 4
  RandomStream s(derive_key(60));
  Tensor<double> target = s.normal_tensor<double>({2, 1, 4, 4});
  DenoiseFn<double> oracle = [&](const Tensor<double>&, double) { return target; };
  Tensor<double> init = s.normal_tensor<double>({2, 1, 4, 4}, 8000);

  Tensor<double> out = lms_sample(oracle, init, cfg);
  CHECK(rel_l2_diff(out, target) < 1e-3);

  // determinism: identical inputs, identical outputs
  Tensor<double> out2 = lms_sample(oracle, init, cfg);
  CHECK(max_abs_diff(out, out2) == 0.0);
}

TEST_CASE("lms_sample warm-up: first step is explicit Euler") {
  EdmConfig cfg;
  cfg.steps = 2;
  std::vector<double> sigmas = sampler_schedule(cfg);
  RandomStream s(derive_key(61));
  Tensor<double> target = s.normal_tensor<double>({1, 1, 2, 2});
  Tensor<double> init = s.normal_tensor<double>({1, 1, 2, 2}, 100);

  std::vector<Tensor<double>> seen_x;
  DenoiseFn<double> oracle = [&](const Tensor<double>& x, double) {
    seen_x.push_back(x);
    return target;
  };
  lms_sample(oracle, init, cfg);
  REQUIRE(seen_x.size() == 2);

  // state at the second call must equal x0 + (sigma_1 - sigma_0) * d(x0)
  Tensor<double> x0 = seen_x[0];
  Tensor<double> expect(x0.shape());
  expect.array() =
      x0.array() + (sigmas[1] - sigmas[0]) * (x0.array() - target.array()) / sigmas[0];
  CHECK(max_abs_diff(seen_x[1], expect) < 1e-12);
}

TEST_CASE("order-4 at T=50 agrees with Euler at T=400 on a frozen tiny model") {
  VideoModel<double> m = tiny_model();
  Parameters<double> p;
  init_model_params(p, m, 70);
  RandomStream s(derive_key(71));
  for (int i = 0; i < p.count(); ++i)
    if (p.name(i).find("head.w") != std::string::npos)
      for (Index e = 0; e < p[i].size(); ++e)
        p[i][e] = 0.2 * s.normal(static_cast<std::uint64_t>(e));

  Tensor<double> ctx = s.normal_tensor<double>({2, 1, 8, 8}, 300);
  Tensor<double> motion = s.normal_tensor<double>({4, 4}, 400);
  DenoiseFn<double> fn = [&](const Tensor<double>& x, double sigma) {
    Graph<double> g;
    g.set_inference(true);
    NodeId out = denoise_with_motion(g, p, m, g.constant(x), g.constant(ctx),
                                     g.constant(motion), sigma, 2);
    return g.val(out);
  };
  Tensor<double> init = s.normal_tensor<double>({2, 1, 8, 8}, 500);

  EdmConfig lms4 = m.edm;  // T=50, order 4
  EdmConfig euler = m.edm;
  euler.steps = 400;
  euler.lms_order = 1;
  Tensor<double> a = lms_sample(fn, init, lms4);
  Tensor<double> b = lms_sample(fn, init, euler);
  CHECK(rel_l2_diff(a, b) < 1e-2);
}

TEST_CASE("adams-bashforth coefficients integrate exactly") {
  // order 1 is the plain Euler step length
  auto c1 = detail::adams_bashforth_coeffs({2.0}, 2.0, 1.5);
  REQUIRE(c1.size() == 1);
  CHECK(c1[0] == doctest::Approx(-0.5).epsilon(1e-15));

  // order 2: integrating the linear interpolant of f(s) = s over [2, 1.5]
  // must equal the exact integral of s
  auto c2 = detail::adams_bashforth_coeffs({2.0, 3.0}, 2.0, 1.5);
  double integral = c2[0] * 2.0 + c2[1] * 3.0;
  CHECK(integral == doctest::Approx((1.5 * 1.5 - 2.0 * 2.0) / 2.0).epsilon(1e-12));
}
