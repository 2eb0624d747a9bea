#include <doctest.h>

#include <cmath>
#include <vector>

#include "framecast/graph.hpp"
#include "framecast/params.hpp"
#include "framecast/rng.hpp"
#include "framecast/tensor.hpp"

using namespace framecast;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t key) {
  RandomStream stream(key);
  return stream.normal_tensor<double>(std::move(shape));
}

/// Finite-difference check of d(build(params))/d(params) over every entry.
template <typename BuildFn>
double full_gradcheck(Parameters<double>& params, BuildFn build) {
  Parameters<double> grads = params.zeros_like();
  {
    Graph<double> g;
    NodeId root = build(g);
    g.backward(root);
    g.add_param_grads(params, grads);
  }
  auto loss = [&]() {
    Graph<double> g;
    return g.val(build(g))[0];
  };
  std::vector<std::pair<int, Index>> entries;
  for (int p = 0; p < params.count(); ++p)
    for (Index e = 0; e < params[p].size(); ++e) entries.emplace_back(p, e);
  return gradcheck_entries(
      params, entries, loss, [&](int p, Index e) { return grads[p][e]; }, 1e-5);
}

}  // namespace

TEST_CASE("tensor shape and views") {
  Tensor<double> t({2, 3, 4});
  CHECK(t.size() == 24);
  t.at(1, 2, 3) = 7.0;
  CHECK(t[23] == 7.0);
  auto r = t.reshaped({6, 4});
  CHECK(r.shape() == Shape{6, 4});
  CHECK(r[23] == 7.0);
  CHECK_THROWS(t.reshaped({5, 5}));
  CHECK(t.mat2d().rows() == 6);
  CHECK(t.mat2d().cols() == 4);
}

TEST_CASE("counter rng is a pure function of key and index") {
  RandomStream a(derive_key(42, 7));
  RandomStream b(derive_key(42, 7));
  RandomStream c(derive_key(42, 8));
  for (std::uint64_t i = 0; i < 64; ++i) {
    CHECK(a.bits(i) == b.bits(i));
  }
  int diff = 0;
  for (std::uint64_t i = 0; i < 64; ++i) diff += a.bits(i) != c.bits(i);
  CHECK(diff > 60);
}

TEST_CASE("normal stream moments") {
  RandomStream s(derive_key(123));
  const int n = 200000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    double z = s.normal(static_cast<std::uint64_t>(i));
    sum += z;
    sumsq += z * z;
  }
  double mean = sum / n;
  double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("uniform_int stays in range and covers values") {
  RandomStream s(derive_key(5));
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i)
    counts[static_cast<size_t>(s.uniform_int(static_cast<std::uint64_t>(i), 7))]++;
  for (int c : counts) CHECK(c > 800);
}

TEST_CASE("backward accumulates through shared subexpressions") {
  Parameters<double> params;
  params.add("x", random_tensor({3}, 1));
  Graph<double> g;
  NodeId x = g.param(params, 0);
  NodeId y = sum(g, mul(g, x, x));  // d/dx sum(x*x) = 2x
  g.backward(y);
  Parameters<double> grads = params.zeros_like();
  g.add_param_grads(params, grads);
  for (Index i = 0; i < 3; ++i)
    CHECK(grads[0][i] == doctest::Approx(2 * params[0][i]).epsilon(1e-12));
}

TEST_CASE("op gradients match finite differences") {
  SUBCASE("matmul + add_rowvec + gelu") {
    Parameters<double> params;
    params.add("x", random_tensor({4, 3}, 2));
    params.add("w", random_tensor({3, 5}, 3));
    params.add("b", random_tensor({5}, 4));
    double err = full_gradcheck(params, [&](Graph<double>& g) {
      NodeId y = matmul(g, g.param(params, 0), g.param(params, 1));
      y = add_rowvec(g, y, g.param(params, 2));
      return sum_sq(g, gelu(g, y));
    });
    CHECK(err < 1e-5);
  }
  SUBCASE("mul, sub, scale, add_scalar, sigmoid, tanh") {
    Parameters<double> params;
    params.add("a", random_tensor({6}, 5));
    params.add("b", random_tensor({6}, 6));
    double err = full_gradcheck(params, [&](Graph<double>& g) {
      NodeId a = g.param(params, 0);
      NodeId b = g.param(params, 1);
      NodeId y = mul(g, sigmoid_op(g, a), tanh_op(g, b));
      y = sub(g, y, scale(g, add(g, a, b), 0.3));
      y = add_scalar(g, y, 0.1);
      return sum_sq(g, y);
    });
    CHECK(err < 1e-5);
  }
  SUBCASE("rms_norm and mul_rowvec") {
    Parameters<double> params;
    params.add("x", random_tensor({5, 8}, 7));
    params.add("gain", random_tensor({8}, 8));
    double err = full_gradcheck(params, [&](Graph<double>& g) {
      NodeId y = rms_norm(g, g.param(params, 0));
      y = mul_rowvec(g, y, g.param(params, 1));
      return sum_sq(g, y);
    });
    CHECK(err < 1e-5);
  }
  SUBCASE("slice and concat") {
    Parameters<double> params;
    params.add("x", random_tensor({4, 6}, 9));
    params.add("y", random_tensor({4, 2}, 10));
    double err = full_gradcheck(params, [&](Graph<double>& g) {
      NodeId x = g.param(params, 0);
      NodeId a = slice_cols(g, x, 0, 3);
      NodeId b = slice_cols(g, x, 3, 6);
      NodeId c = concat_cols(g, mul(g, a, b), g.param(params, 1));
      NodeId d = slice_flat(g, c, 4, {8});
      return sum_sq(g, concat_flat(g, {c, d}, {28}));
    });
    CHECK(err < 1e-5);
  }
  SUBCASE("gather with padding entries") {
    Parameters<double> params;
    params.add("x", random_tensor({10}, 11));
    auto map = std::make_shared<std::vector<Index>>(
        std::vector<Index>{0, 3, 3, -1, 9, 2});
    double err = full_gradcheck(params, [&](Graph<double>& g) {
      return sum_sq(g, gather(g, g.param(params, 0), map, {6}));
    });
    CHECK(err < 1e-5);
  }
  SUBCASE("attention, grouped and masked") {
    Parameters<double> params;
    params.add("q", random_tensor({8, 8}, 12));  // 2 groups x 4 tokens, 2 heads x hd 4
    params.add("k", random_tensor({8, 8}, 13));
    params.add("v", random_tensor({8, 8}, 14));
    auto mask = std::make_shared<Tensor<double>>(Tensor<double>({4, 4}));
    mask->at(0, 3) = -1e30;  // token 0 cannot see token 3
    mask->at(3, 0) = -1e30;
    double err = full_gradcheck(params, [&](Graph<double>& g) {
      NodeId o = attention(g, g.param(params, 0), g.param(params, 1),
                           g.param(params, 2), 2, 2, mask);
      return sum_sq(g, o);
    });
    CHECK(err < 1e-5);
  }
  SUBCASE("pair_rotate") {
    Parameters<double> params;
    params.add("x", random_tensor({6, 8}, 15));  // 2 heads, head_dim 4
    auto cos_t = std::make_shared<Tensor<double>>(Tensor<double>({6, 4}));
    auto sin_t = std::make_shared<Tensor<double>>(Tensor<double>({6, 4}));
    for (Index i = 0; i < 6; ++i)
      for (Index j = 0; j < 4; j += 2) {
        double ang = 0.3 * static_cast<double>(i) + 0.1 * static_cast<double>(j);
        cos_t->at(i, j) = cos_t->at(i, j + 1) = std::cos(ang);
        sin_t->at(i, j) = sin_t->at(i, j + 1) = std::sin(ang);
      }
    double err = full_gradcheck(params, [&](Graph<double>& g) {
      return sum_sq(g, pair_rotate(g, g.param(params, 0), cos_t, sin_t, 2));
    });
    CHECK(err < 1e-5);
  }
  SUBCASE("conv2d stride 2 with padding") {
    Parameters<double> params;
    params.add("x", random_tensor({2, 6, 6, 3}, 16));
    params.add("w", random_tensor({3 * 3 * 3, 4}, 17));
    params.add("b", random_tensor({4}, 18));
    double err = full_gradcheck(params, [&](Graph<double>& g) {
      NodeId y = conv2d(g, g.param(params, 0), g.param(params, 1),
                        g.param(params, 2), 3, 2, 1);
      return sum_sq(g, y);
    });
    CHECK(err < 1e-5);
  }
}

TEST_CASE("pair_rotate preserves token norms") {
  RandomStream s(derive_key(77));
  Tensor<double> x = s.normal_tensor<double>({10, 16});
  auto cos_t = std::make_shared<Tensor<double>>(Tensor<double>({10, 8}));
  auto sin_t = std::make_shared<Tensor<double>>(Tensor<double>({10, 8}));
  for (Index i = 0; i < 10; ++i)
    for (Index j = 0; j < 8; j += 2) {
      double ang = 1.7 * static_cast<double>(i + j);
      cos_t->at(i, j) = cos_t->at(i, j + 1) = std::cos(ang);
      sin_t->at(i, j) = sin_t->at(i, j + 1) = std::sin(ang);
    }
  Graph<double> g;
  NodeId out = pair_rotate(g, g.constant(x), cos_t, sin_t, 2);
  for (Index r = 0; r < 10; ++r) {
    double before = x.mat2d().row(r).norm();
    double after = g.val(out).mat2d().row(r).norm();
    CHECK(after == doctest::Approx(before).epsilon(1e-12));
  }
}

TEST_CASE("attention with identical tokens returns the shared value row") {
  // softmax over identical scores is uniform; averaging identical value rows
  // returns that row.
  Tensor<double> q = Tensor<double>::full({5, 4}, 0.7);
  Tensor<double> k = q;
  Tensor<double> v = q;
  RandomStream s(derive_key(9));
  Tensor<double> row = s.normal_tensor<double>({1, 4});
  for (Index r = 0; r < 5; ++r) v.mat2d().row(r) = row.mat2d().row(0);
  Graph<double> g;
  NodeId o = attention(g, g.constant(q), g.constant(k), g.constant(v), 1, 1);
  for (Index r = 0; r < 5; ++r)
    for (Index c = 0; c < 4; ++c)
      CHECK(g.val(o).at(r, c) == doctest::Approx(row.at(Index(0), c)).epsilon(1e-12));
}

TEST_CASE("parameters tree structure") {
  Parameters<double> p;
  ParamBuilder<double> b(p, "m.", 11);
  b.weight("w", 4, 3);
  b.zeros("z", {2, 2});
  CHECK(p.count() == 2);
  CHECK(p.find("m.w") == 0);
  CHECK(p.find("nope") == -1);
  CHECK(p.total_size() == 16);
  auto zeros = p.zeros_like();
  CHECK(zeros.same_structure(p));
  CHECK(max_abs(zeros[0]) == 0.0);

  // same name+seed reproduces the same init regardless of order
  Parameters<double> p2;
  ParamBuilder<double> b2(p2, "m.", 11);
  b2.zeros("z", {2, 2});
  b2.weight("w", 4, 3);
  CHECK(max_abs_diff(p.at("m.w"), p2.at("m.w")) == 0.0);
}
