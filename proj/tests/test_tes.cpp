#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "stnet/gradcheck.hpp"
#include "stnet/rng.hpp"
#include "stnet/tes.hpp"

using namespace stnet;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Row-stochastic positive matrices standing in for attention adjacency.
Tensor<double> random_adjacency(std::size_t B, std::size_t T, std::size_t V, Rng& rng) {
  Tensor<double> a({B, T, V, V});
  for (std::size_t r = 0; r < B * T * V; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      const double v = rng.uniform(0.05, 1.0);
      a.data[r * V + j] = v;
      sum += v;
    }
    for (std::size_t j = 0; j < V; ++j) a.data[r * V + j] /= sum;
  }
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// layer-normalized LSTM branch
// ---------------------------------------------------------------------------

TEST_CASE("lstm branch matches a per-channel unrolled reference") {
  Rng rng(301);
  const std::size_t B = 2, T = 3, V = 2, FS = 3, FL = 2;
  ParamSet<double> ps;
  auto p = make_ln_lstm_params<double>(FS, FL, ps, rng);
  Tensor<double> fv = random_tensor({B, T, V, FS}, rng);
  auto out = layernorm_lstm(constant(fv), p)->value;
  REQUIRE(out.shape == Shape{B, V, FL});

  // reference: run each (subject, channel) sequence alone through the same
  // cells; the folded version must route identically
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t v = 0; v < V; ++v) {
      Var<double> h1 = constant(Tensor<double>({1, FL}));
      Var<double> c1 = constant(Tensor<double>({1, FL}));
      Var<double> h2 = constant(Tensor<double>({1, FL}));
      Var<double> c2 = constant(Tensor<double>({1, FL}));
      for (std::size_t t = 0; t < T; ++t) {
        Tensor<double> xt({1, FS});
        for (std::size_t k = 0; k < FS; ++k) xt.data[k] = fv.at({b, t, v, k});
        auto s1 = lstm_cell(constant(xt), h1, c1, p.l1);
        h1 = s1.h;
        c1 = s1.c;
        auto s2 = lstm_cell(layernorm(h1, p.ln_gamma, p.ln_beta), h2, c2, p.l2);
        h2 = s2.h;
        c2 = s2.c;
      }
      auto ref = relu(h2)->value;
      for (std::size_t k = 0; k < FL; ++k)
        CHECK(out.at({b, v, k}) == doctest::Approx(ref.data[k]).epsilon(1e-12));
    }
}

TEST_CASE("lstm branch output is rectified") {
  Rng rng(302);
  ParamSet<double> ps;
  auto p = make_ln_lstm_params<double>(4, 3, ps, rng);
  auto out = layernorm_lstm(constant(random_tensor({2, 4, 3, 4}, rng, -3, 3)), p)->value;
  for (double v : out.data) CHECK(v >= 0.0);
}

TEST_CASE("lstm branch treats channels independently") {
  Rng rng(303);
  const std::size_t V = 3;
  ParamSet<double> ps;
  auto p = make_ln_lstm_params<double>(3, 2, ps, rng);
  Tensor<double> base = random_tensor({1, 3, V, 3}, rng);
  Tensor<double> mod = base;
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t k = 0; k < 3; ++k) mod.at({0, t, 2, k}) += 0.7;
  auto y0 = layernorm_lstm(constant(base), p)->value;
  auto y1 = layernorm_lstm(constant(mod), p)->value;
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t k = 0; k < 2; ++k)
      CHECK(y0.at({0, v, k}) == doctest::Approx(y1.at({0, v, k})));
}

TEST_CASE("window order matters to the lstm branch") {
  Rng rng(304);
  ParamSet<double> ps;
  auto p = make_ln_lstm_params<double>(3, 2, ps, rng);
  Tensor<double> fv = random_tensor({1, 4, 1, 3}, rng);
  Tensor<double> rev({1, 4, 1, 3});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < 3; ++k) rev.at({0, t, 0, k}) = fv.at({0, 3 - t, 0, k});
  auto a = layernorm_lstm(constant(fv), p)->value;
  auto b = layernorm_lstm(constant(rev), p)->value;
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff += std::abs(a.data[i] - b.data[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("lstm branch gradients match central differences") {
  Rng rng(305);
  ParamSet<double> ps;
  auto p = make_ln_lstm_params<double>(3, 2, ps, rng);
  Tensor<double> fv = random_tensor({2, 3, 2, 3}, rng);
  auto rep = check_gradients<double>(
      [&] { return sum_all(layernorm_lstm(constant(fv), p)); }, ps);
  CAPTURE(rep.worst_name);
  CHECK(rep.max_rel_err <= 1e-4);
}

// ---------------------------------------------------------------------------
// window mixing
// ---------------------------------------------------------------------------

TEST_CASE("zero-logit kernels average the windows") {
  Rng rng(311);
  Tensor<double> xv = random_tensor({2, 4, 3, 2}, rng);
  auto bank = constant(Tensor<double>({3, 4}));  // uniform softmax rows
  auto y = mix_windows(constant(xv), bank)->value;
  REQUIRE(y.shape == Shape{2, 3, 3, 2});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < 3; ++v)
        for (std::size_t k = 0; k < 2; ++k) {
          double mean = 0.0;
          for (std::size_t t = 0; t < 4; ++t) mean += xv.at({b, t, v, k});
          mean /= 4.0;
          CHECK(y.at({b, c, v, k}) == doctest::Approx(mean).epsilon(1e-12));
        }
}

TEST_CASE("a saturated kernel row selects a single window") {
  Rng rng(312);
  Tensor<double> xv = random_tensor({1, 3, 2, 2}, rng);
  Tensor<double> bank({1, 3});
  bank.data = {0.0, 60.0, 0.0};  // softmax ~ [0, 1, 0]
  auto y = mix_windows(constant(xv), constant(bank))->value;
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t k = 0; k < 2; ++k)
      CHECK(y.at({0, 0, v, k}) == doctest::Approx(xv.at({0, 1, v, k})).epsilon(1e-9));
}

TEST_CASE("mixing a window-constant series returns the constant") {
  Rng rng(313);
  Tensor<double> slice = random_tensor({2, 2}, rng);
  Tensor<double> xv({1, 5, 2, 2});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 4; ++i) xv.data[t * 4 + i] = slice.data[i];
  auto bank = constant(random_tensor({4, 5}, rng, -2, 2));  // arbitrary mixtures
  auto y = mix_windows(constant(xv), bank)->value;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(y.data[c * 4 + i] == doctest::Approx(slice.data[i]).epsilon(1e-12));
}

TEST_CASE("mix_windows validates the kernel bank") {
  Rng rng(314);
  auto x = constant(random_tensor({1, 3, 2}, rng));
  CHECK_THROWS_AS(mix_windows(x, constant(Tensor<double>({2, 4}))), std::invalid_argument);
  CHECK_THROWS_AS(mix_windows(constant(Tensor<double>({3, 2})), constant(Tensor<double>({2, 2}))),
                  std::invalid_argument);
}

// ---------------------------------------------------------------------------
// metapaths
// ---------------------------------------------------------------------------

TEST_CASE("metapath rows sum to one") {
  Rng rng(321);
  const std::size_t B = 2, T = 4, V = 3, C = 2, GL = 2;
  ParamSet<double> ps;
  auto p = make_gtn_params<double>(GL, C, T, 3, 2, ps, rng);
  auto mp = gt_metapaths(constant(random_adjacency(B, T, V, rng)), p)->value;
  REQUIRE(mp.shape == Shape{B, C, V, V});
  for (std::size_t r = 0; r < B * C * V; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) sum += mp.data[r * V + j];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("identity adjacencies compose to the identity metapath") {
  Rng rng(322);
  const std::size_t B = 1, T = 3, V = 3, C = 2, GL = 2;
  ParamSet<double> ps;
  auto p = make_gtn_params<double>(GL, C, T, 3, 2, ps, rng);
  Tensor<double> adj({B, T, V, V});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t v = 0; v < V; ++v) adj.at({0, t, v, v}) = 1.0;
  auto mp = gt_metapaths(constant(adj), p)->value;
  // the row-normalization guard term keeps values ~1e-8 off the exact identity
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < V; ++i)
      for (std::size_t j = 0; j < V; ++j)
        CHECK(std::abs(mp.at({0, c, i, j}) - (i == j ? 1.0 : 0.0)) < 1e-6);
}

TEST_CASE("metapath depth uses all kernel banks") {
  Rng rng(323);
  const std::size_t GL = 3;
  ParamSet<double> ps;
  auto p = make_gtn_params<double>(GL, 2, 3, 3, 2, ps, rng);
  CHECK(p.kern.size() == GL + 1);
  CHECK(p.alpha->value.shape == Shape{GL + 1});
  for (double v : p.alpha->value.data) CHECK(v == doctest::Approx(0.25));

  Tensor<double> adj = random_adjacency(1, 3, 3, rng);
  auto mp0 = gt_metapaths(constant(adj), p)->value;
  // perturbing the last bank must change the result: it enters at depth GL
  p.kern[GL]->value.data[0] += 2.0;
  auto mp1 = gt_metapaths(constant(adj), p)->value;
  double diff = 0.0;
  for (std::size_t i = 0; i < mp0.numel(); ++i) diff += std::abs(mp0.data[i] - mp1.data[i]);
  CHECK(diff > 1e-9);
}

// ---------------------------------------------------------------------------
// full graph-transform branch
// ---------------------------------------------------------------------------

TEST_CASE("graph-transform branch shape and rectification") {
  Rng rng(331);
  const std::size_t B = 2, T = 3, V = 4, FS = 3, FG = 5, C = 2, GL = 2;
  ParamSet<double> ps;
  auto p = make_gtn_params<double>(GL, C, T, FS, FG, ps, rng);
  auto out = gtn_forward(constant(random_adjacency(B, T, V, rng)),
                         constant(random_tensor({B, T, V, FS}, rng)), p)->value;
  REQUIRE(out.shape == Shape{B, V, FG});
  for (double v : out.data) CHECK(v >= 0.0);
}

TEST_CASE("graph-transform gradients match central differences") {
  // Seed chosen so every rectifier in the branch is safely away from its
  // kink; a pre-activation within the differencing step of zero would make
  // the numeric gradient meaningless. The REQUIRE below guards that choice.
  Rng rng(352);
  const std::size_t B = 1, T = 3, V = 3, FS = 3, FG = 2, C = 2, GL = 2;
  ParamSet<double> ps;
  auto p = make_gtn_params<double>(GL, C, T, FS, FG, ps, rng);
  auto f = ps.create("f", random_tensor({B, T, V, FS}, rng));
  Tensor<double> adj = random_adjacency(B, T, V, rng);
  auto probe = gtn_forward(constant(adj), f, p)->value;
  for (double v : probe.data) REQUIRE(std::abs(v) > 1e-2);
  auto rep = check_gradients<double>(
      [&] { return sum_all(gtn_forward(constant(adj), f, p)); }, ps);
  CAPTURE(rep.worst_name);
  CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("gradient reaches every kernel bank and the mixture weights") {
  Rng rng(333);
  const std::size_t GL = 2;
  ParamSet<double> ps;
  auto p = make_gtn_params<double>(GL, 2, 3, 3, 2, ps, rng);
  auto f = constant(random_tensor({1, 3, 3, 3}, rng));
  auto adj = constant(random_adjacency(1, 3, 3, rng));
  ps.zero_grads();
  backward(sum_all(gtn_forward(adj, f, p)));
  for (std::size_t i = 0; i <= GL; ++i) {
    double mag = 0.0;
    for (double g : p.kern[i]->grad.data) mag += std::abs(g);
    CAPTURE(i);
    CHECK(mag > 0.0);
  }
  double amag = 0.0;
  for (double g : p.alpha->grad.data) amag += std::abs(g);
  CHECK(amag > 0.0);
}

TEST_CASE("graph-transform validation") {
  Rng rng(334);
  ParamSet<double> ps;
  CHECK_THROWS_AS(make_gtn_params<double>(0, 2, 3, 3, 2, ps, rng), ConfigError);
  CHECK_THROWS_AS(make_gtn_params<double>(2, 0, 3, 3, 2, ps, rng, "g2"), ConfigError);
}

// ---------------------------------------------------------------------------
// branch fusion
// ---------------------------------------------------------------------------

TEST_CASE("temporal fusion concatenates per channel") {
  Rng rng(341);
  auto lstm = constant(random_tensor({2, 3, 4}, rng));
  auto gtn = constant(random_tensor({2, 3, 5}, rng));
  auto both = fuse_temporal(&lstm, &gtn);
  REQUIRE(both->value.shape == Shape{2, 3, 9});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t v = 0; v < 3; ++v) {
      for (std::size_t k = 0; k < 4; ++k)
        CHECK(both->value.at({b, v, k}) == lstm->value.at({b, v, k}));
      for (std::size_t k = 0; k < 5; ++k)
        CHECK(both->value.at({b, v, 4 + k}) == gtn->value.at({b, v, k}));
    }

  CHECK(fuse_temporal<double>(&lstm, nullptr)->value.shape == Shape{2, 3, 4});
  CHECK(fuse_temporal<double>(nullptr, &gtn)->value.shape == Shape{2, 3, 5});
  CHECK_THROWS_AS(fuse_temporal<double>(nullptr, nullptr), ConfigError);
}
