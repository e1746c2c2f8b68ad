#include "oracles.hpp"
#include "rlscale/optim.hpp"

#include <doctest.h>

#include <cmath>

using namespace rlscale;
using namespace rlscale::optim;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

CentralView view(Vector& theta, Vector& m, Vector& v) {
  return {{theta.data(), static_cast<std::size_t>(theta.size())},
          {m.data(), static_cast<std::size_t>(m.size())},
          {v.data(), static_cast<std::size_t>(v.size())}};
}

Vector random_vec(std::size_t n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Vector v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("adam_step") {
  SUBCASE("zero gradient leaves params and moments at zero") {
    AdamState s(3, {});
    ParamVector p = vec({1, 2, 3});
    const auto step = adam_step(s, p, Vector::Zero(3));
    CHECK(p == vec({1, 2, 3}));
    CHECK(s.m.isZero());
    CHECK(s.v.isZero());
    CHECK(step.isZero());
    CHECK(s.t == 1);
  }
  SUBCASE("one-dimensional hand arithmetic") {
    AdamState s(1, {0.1, 0.9, 0.999, 1e-8});
    ParamVector p = vec({0.0});
    const auto step = adam_step(s, p, vec({1.0}));
    const double a = 0.1 * std::sqrt(1.0 - 0.999) / (1.0 - 0.9);
    CHECK(std::abs(a - 0.1 * 0.031622776601683794 / 0.1) < 1e-15);
    CHECK(s.m[0] == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(s.v[0] == doctest::Approx(0.001).epsilon(1e-14));
    const double expect = a * 0.1 / (std::sqrt(0.001) + 1e-8);
    CHECK(std::abs(step[0] - expect) < 1e-15);
    CHECK(std::abs(p[0] + expect) < 1e-15);
    CHECK(step[0] == doctest::Approx(0.1).epsilon(1e-6));
  }
  SUBCASE("constant gradient matches an independent implementation and approaches r sign(g)") {
    AdamState s(2, {0.01, 0.9, 0.999, 1e-8});
    ParamVector p = vec({0.5, -0.5});
    oracle::Adam1 ref{0.01, 0.9, 0.999, 1e-8, {}, {}};
    std::vector<double> q{0.5, -0.5};
    Vector step;
    for (int i = 0; i < 500; ++i) {
      step = adam_step(s, p, vec({3.0, -0.2}));
      const auto rs = ref.step(q, {3.0, -0.2});
      CHECK(std::abs(step[0] - rs[0]) < 1e-15);
      CHECK(std::abs(p[1] - q[1]) < 1e-13);
    }
    CHECK(step[0] == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(step[1] == doctest::Approx(-0.01).epsilon(1e-6));
  }
  SUBCASE("length mismatch") {
    AdamState s(2, {});
    ParamVector p = vec({1, 2, 3});
    CHECK_THROWS_AS(adam_step(s, p, Vector::Zero(3)), ShapeError);
  }
}

TEST_CASE("rmsprop_step") {
  SUBCASE("zero gradient") {
    RmsPropState s(2, {});
    ParamVector p = vec({1, 1});
    CHECK(rmsprop_step(s, p, Vector::Zero(2)).isZero());
    CHECK(p == vec({1, 1}));
  }
  SUBCASE("hand arithmetic g=2") {
    RmsPropState s(1, {0.1, 0.99, 1e-6});
    ParamVector p = vec({0.0});
    const auto step = rmsprop_step(s, p, vec({2.0}));
    CHECK(s.v[0] == doctest::Approx(0.04).epsilon(1e-14));
    CHECK(std::abs(step[0] - 0.1 * 2.0 / (0.2 + 1e-6)) < 1e-15);
    CHECK(step[0] == doctest::Approx(1.0).epsilon(1e-5));
  }
  SUBCASE("fixed point under constant gradient") {
    RmsPropState s(1, {0.1, 0.99, 1e-6});
    ParamVector p = vec({0.0});
    Vector step;
    for (int i = 0; i < 5000; ++i) step = rmsprop_step(s, p, vec({-3.0}));
    CHECK(s.v[0] == doctest::Approx(9.0).epsilon(1e-9));
    CHECK(step[0] == doctest::Approx(-0.1).epsilon(1e-6));
  }
  SUBCASE("length mismatch") {
    RmsPropState s(1, {});
    ParamVector p = vec({0.0, 1.0});
    CHECK_THROWS_AS(rmsprop_step(s, p, vec({1.0, 1.0})), ShapeError);
  }
}

TEST_CASE("async_accumulate") {
  AsyncAccumulators acc(2);
  SUBCASE("one step from zero") {
    async_accumulate(acc, vec({1, -2}), vec({0.1, 0.2}), 0.9, 0.999);
    CHECK(acc.a_g == vec({1, -2}));
    CHECK(acc.a_g2 == vec({1, 4}));
    CHECK(acc.a_s == vec({0.1, 0.2}));
    CHECK(acc.n == 1);
  }
  SUBCASE("two steps") {
    async_accumulate(acc, vec({1, -2}), vec({0.1, 0.2}), 0.9, 0.999);
    async_accumulate(acc, vec({3, 5}), vec({0.3, 0.4}), 0.9, 0.999);
    CHECK(acc.a_g[0] == doctest::Approx(0.9 * 1 + 3));
    CHECK(acc.a_g[1] == doctest::Approx(0.9 * -2 + 5));
    CHECK(acc.a_g2[1] == doctest::Approx(0.999 * 4 + 25));
    CHECK(acc.a_s[0] == doctest::Approx(0.4));
    CHECK(acc.n == 2);
  }
  SUBCASE("zero gradients and steps stay zero") {
    for (int i = 0; i < 3; ++i) async_accumulate(acc, Vector::Zero(2), Vector::Zero(2), 0.9, 0.999);
    CHECK(acc.a_g.isZero());
    CHECK(acc.a_g2.isZero());
    CHECK(acc.a_s.isZero());
    CHECK(acc.n == 3);
  }
  SUBCASE("reset") {
    async_accumulate(acc, vec({1, 1}), vec({1, 1}), 0.9, 0.999);
    acc.reset();
    CHECK(acc.n == 0);
    CHECK(acc.a_s.isZero());
  }
}

TEST_CASE("async_central_apply") {
  SUBCASE("single learner with n=1 reduces to Adam over 100 steps") {
    const std::size_t n = 6;
    Rng rng(21);
    Vector ct = random_vec(n, rng), cm = Vector::Zero(6), cv = Vector::Zero(6);
    AdamState local(n, {1e-2, 0.9, 0.999, 1e-8});
    ParamVector lt = ct;
    AsyncAccumulators acc(n);
    oracle::Adam1 ref{1e-2, 0.9, 0.999, 1e-8, {}, {}};
    std::vector<double> q(ct.data(), ct.data() + n);
    double worst = 0.0;
    for (int i = 0; i < 150; ++i) {
      const Vector g = random_vec(n, rng);
      const Vector s = adam_step(local, lt, g);
      async_accumulate(acc, g, s, 0.9, 0.999);
      async_central_apply(view(ct, cm, cv), view(lt, local.m, local.v), acc, 0.9, 0.999);
      ref.step(q, std::vector<double>(g.data(), g.data() + n));
      for (std::size_t k = 0; k < n; ++k) worst = std::max(worst, std::abs(ct[static_cast<Eigen::Index>(k)] - q[k]));
      CHECK(acc.n == 0);
      CHECK(lt == ct);
    }
    CHECK(worst <= 1e-12);
  }
  SUBCASE("zero accumulators only decay the moments") {
    Vector ct = vec({1, 2}), cm = vec({0.5, -0.5}), cv = vec({0.2, 0.4});
    Vector lt(2), lm(2), lv(2);
    AsyncAccumulators acc(2);
    acc.n = 3;
    async_central_apply(view(ct, cm, cv), view(lt, lm, lv), acc, 0.9, 0.999);
    CHECK(ct == vec({1, 2}));
    CHECK(cm[0] == doctest::Approx(0.5 * std::pow(0.9, 3)));
    CHECK(cv[1] == doctest::Approx(0.4 * std::pow(0.999, 3)));
    CHECK(lm == cm);
  }
  SUBCASE("n=2 hand expansion") {
    Vector ct = vec({0.0}), cm = vec({0.3}), cv = vec({0.05});
    Vector lt(1), lm(1), lv(1);
    AsyncAccumulators acc(1);
    const double g1 = 0.7, g2 = -1.1;
    async_accumulate(acc, vec({g1}), vec({0.01}), 0.9, 0.999);
    async_accumulate(acc, vec({g2}), vec({0.02}), 0.9, 0.999);
    async_central_apply(view(ct, cm, cv), view(lt, lm, lv), acc, 0.9, 0.999);
    CHECK(cm[0] == doctest::Approx(0.81 * 0.3 + 0.1 * (0.9 * g1 + g2)).epsilon(1e-14));
    CHECK(cv[0] == doctest::Approx(0.999 * 0.999 * 0.05 + 0.001 * (0.999 * g1 * g1 + g2 * g2)).epsilon(1e-14));
    CHECK(ct[0] == doctest::Approx(-0.03));
    CHECK(lt[0] == ct[0]);
  }
  SUBCASE("n = 0 is an error") {
    Vector ct = vec({0.0}), cm = vec({0.0}), cv = vec({0.0});
    Vector lt(1), lm(1), lv(1);
    AsyncAccumulators acc(1);
    CHECK_THROWS_AS(async_central_apply(view(ct, cm, cv), view(lt, lm, lv), acc, 0.9, 0.999), RuntimeError);
  }
}

TEST_CASE("property: second moments stay nonnegative") {
  Rng rng(31);
  AdamState a(8, {});
  RmsPropState r(8, {});
  AsyncAccumulators acc(8);
  ParamVector p = Vector::Zero(8), q = Vector::Zero(8);
  for (int i = 0; i < 200; ++i) {
    const Vector g = random_vec(8, rng, std::pow(10.0, i % 7 - 3));
    const Vector s = adam_step(a, p, g);
    rmsprop_step(r, q, g);
    async_accumulate(acc, g, s, 0.9, 0.999);
    CHECK(a.v.minCoeff() >= 0.0);
    CHECK(r.v.minCoeff() >= 0.0);
    CHECK(acc.a_g2.minCoeff() >= 0.0);
  }
}

TEST_CASE("property: update rules are pure functions of state and gradient") {
  Rng rng(32);
  AdamState a(5, {});
  ParamVector p = random_vec(5, rng);
  for (int i = 0; i < 10; ++i) adam_step(a, p, random_vec(5, rng));
  const Vector g = random_vec(5, rng);
  AdamState a2 = a;
  ParamVector p2 = p;
  CHECK(adam_step(a, p, g) == adam_step(a2, p2, g));
  CHECK(p == p2);
}

TEST_CASE("learning-rate and epsilon rules") {
  CHECK(scale_lr_sqrt(7e-4, 16, 16) == 7e-4);
  CHECK(scale_lr_sqrt(7e-4, 16, 512) == doctest::Approx(7e-4 * std::sqrt(32.0)));
  CHECK(scale_lr_sqrt(7e-4, 16, 512) == doctest::Approx(3.96e-3).epsilon(1e-3));
  CHECK(scale_lr_sqrt(1e-3, 32, 128) == 2e-3);
  CHECK_THROWS_AS(scale_lr_sqrt(1e-3, 0, 4), ConfigError);
  CHECK(adam_eps_for_batch(0.01, 2048) == 4.8828125e-6);
  CHECK(adam_eps_for_batch(0.005, 512) == doctest::Approx(0.005 / 512));
  CHECK_THROWS_AS(adam_eps_for_batch(0.01, 0), ConfigError);
}

TEST_CASE("gradient clipping and optimizer dispatch") {
  GradVector g = vec({3, 4});
  CHECK(clip_grad_norm(g, 10.0) == 5.0);
  CHECK(g == vec({3, 4}));
  CHECK(clip_grad_norm(g, 1.0) == 5.0);
  CHECK(g.norm() == doctest::Approx(1.0));
  GradVector h = vec({3, 4});
  clip_grad_norm(h, 0.0);
  CHECK(h == vec({3, 4}));

  auto adam = Optimizer::make("adam", 2, 0.1, 1e-8);
  CHECK(adam.is_adam());
  ParamVector p = Vector::Zero(2);
  adam.step(p, vec({1, 1}));
  CHECK(adam.adam().t == 1);
  CHECK(!Optimizer::make("rmsprop", 2, 0.1, 1e-6).is_adam());
  CHECK_THROWS_AS(Optimizer::make("sgd", 2, 0.1, 1e-8), ConfigError);
}
