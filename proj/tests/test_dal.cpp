#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "stnet/dal.hpp"
#include "stnet/gradcheck.hpp"
#include "stnet/rng.hpp"

using namespace stnet;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// subject classifier
// ---------------------------------------------------------------------------

TEST_CASE("classifier emits one probability row per subject") {
  Rng rng(401);
  ParamSet<double> ps;
  auto p = make_classifier_params<double>(3 * 4, 8, ps, rng);
  Rng fwd(1);
  auto probs = classify(constant(random_tensor({5, 3, 4}, rng)), p, RunMode::eval, fwd)->value;
  REQUIRE(probs.shape == Shape{5, 2});
  for (std::size_t b = 0; b < 5; ++b) {
    CHECK(probs.at({b, 0}) + probs.at({b, 1}) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(probs.at({b, 0}) >= 0.0);
    CHECK(probs.at({b, 1}) >= 0.0);
  }
}

TEST_CASE("classifier dropout is active in training mode only") {
  Rng rng(402);
  ParamSet<double> ps;
  auto p = make_classifier_params<double>(6, 64, ps, rng);
  Tensor<double> fv = random_tensor({3, 2, 3}, rng);

  Rng r1(7);
  auto e1 = classify(constant(fv), p, RunMode::eval, r1)->value;
  auto e2 = classify(constant(fv), p, RunMode::eval, r1)->value;
  CHECK(e1.data == e2.data);  // eval consumes no randomness

  Rng r2(7);
  auto t1 = classify(constant(fv), p, RunMode::train, r2)->value;
  auto t2 = classify(constant(fv), p, RunMode::train, r2)->value;
  CHECK(t1.data != t2.data);  // successive masks differ

  Rng r3(7);
  auto t3 = classify(constant(fv), p, RunMode::train, r3)->value;
  CHECK(t1.data == t3.data);  // same rng state, same mask
}

TEST_CASE("classifier gradients match central differences") {
  Rng rng(403);
  ParamSet<double> ps;
  auto p = make_classifier_params<double>(6, 5, ps, rng);
  auto f = ps.create("f", random_tensor({4, 2, 3}, rng));
  const std::vector<std::size_t> labels{0, 1, 1, 0};
  Rng fwd(1);
  auto rep = check_gradients<double>(
      [&] { return class_loss(classify(f, p, RunMode::gradcheck, fwd), labels); }, ps);
  CAPTURE(rep.worst_name);
  CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("classifier validates widths") {
  Rng rng(404);
  ParamSet<double> ps;
  auto p = make_classifier_params<double>(6, 5, ps, rng);
  Rng fwd(1);
  CHECK_THROWS_AS(classify(constant(Tensor<double>({2, 2, 4})), p, RunMode::eval, fwd),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_classifier_params<double>(0, 5, ps, rng, "c2"), ConfigError);
}

// ---------------------------------------------------------------------------
// domain discriminator
// ---------------------------------------------------------------------------

TEST_CASE("domain head emits one probability row per window") {
  Rng rng(411);
  ParamSet<double> ps;
  auto p = make_domain_params<double>(3 * 4, 8, ps, rng);
  auto probs =
      domain_classify(constant(random_tensor({2, 5, 3, 4}, rng)), p, RunMode::gradcheck)->value;
  REQUIRE(probs.shape == Shape{10, 2});
  for (std::size_t r = 0; r < 10; ++r)
    CHECK(probs.at({r, 0}) + probs.at({r, 1}) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("domain head batch statistics update in training mode only") {
  Rng rng(412);
  ParamSet<double> ps;
  auto p = make_domain_params<double>(4, 6, ps, rng);
  auto x = constant(random_tensor({2, 3, 2, 2}, rng));
  const auto before = p.bn->running_mean.data;
  domain_classify(x, p, RunMode::gradcheck);
  CHECK(p.bn->running_mean.data == before);
  domain_classify(x, p, RunMode::eval);
  CHECK(p.bn->running_mean.data == before);
  domain_classify(x, p, RunMode::train);
  CHECK(p.bn->running_mean.data != before);
}

TEST_CASE("domain head gradients match central differences") {
  Rng rng(413);
  ParamSet<double> ps;
  auto p = make_domain_params<double>(6, 5, ps, rng);
  auto f = ps.create("f", random_tensor({2, 2, 2, 3}, rng));
  const std::vector<std::size_t> subject_domains{0, 1};
  auto rep = check_gradients<double>(
      [&] {
        return domain_loss(domain_classify(f, p, RunMode::gradcheck), subject_domains, 2);
      },
      ps);
  CAPTURE(rep.worst_name);
  CHECK(rep.max_rel_err <= 1e-4);
}

// ---------------------------------------------------------------------------
// adversarial wiring
// ---------------------------------------------------------------------------

TEST_CASE("gradient reversal flips the upstream gradient, not the head's") {
  Rng rng(421);
  ParamSet<double> ps;
  auto p = make_domain_params<double>(6, 5, ps, rng);
  auto f = ps.create("f", random_tensor({2, 2, 2, 3}, rng));
  const std::vector<std::size_t> dom_labels{0, 1};

  ps.zero_grads();
  backward(domain_loss(domain_classify(f, p, RunMode::gradcheck), dom_labels, 2));
  const auto plain_f = f->grad.data;
  const auto plain_w1 = p.w1->grad.data;

  ps.zero_grads();
  backward(domain_loss(domain_classify(grl(f, 1.0), p, RunMode::gradcheck), dom_labels, 2));
  for (std::size_t i = 0; i < plain_f.size(); ++i)
    CHECK(f->grad.data[i] == doctest::Approx(-plain_f[i]));
  for (std::size_t i = 0; i < plain_w1.size(); ++i)
    CHECK(p.w1->grad.data[i] == doctest::Approx(plain_w1[i]));
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

TEST_CASE("class loss hand values") {
  auto probs = constant(Tensor<double>({1, 2}, {0.9, 0.1}));
  CHECK(value_of(class_loss(probs, {0})) == doctest::Approx(0.105360516));
  CHECK(value_of(class_loss(probs, {1})) == doctest::Approx(2.302585093));

  auto two = constant(Tensor<double>({2, 2}, {0.9, 0.1, 0.2, 0.8}));
  CHECK(value_of(class_loss(two, {0, 1})) ==
        doctest::Approx(0.5 * (-std::log(0.9) - std::log(0.8))));
}

TEST_CASE("domain labels repeat once per window") {
  CHECK(repeat_per_window({0, 1}, 3) == std::vector<std::size_t>{0, 0, 0, 1, 1, 1});
  CHECK(repeat_per_window({1}, 2) == std::vector<std::size_t>{1, 1});

  auto probs = constant(Tensor<double>({4, 2}, {0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.4, 0.6}));
  const double expect =
      0.25 * (-std::log(0.9) - std::log(0.8) - std::log(0.7) - std::log(0.6));
  CHECK(value_of(domain_loss(probs, {0, 1}, 2)) == doctest::Approx(expect));
}
