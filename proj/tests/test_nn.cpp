#include "oracles.hpp"
#include "rlscale/nn.hpp"

#include <doctest.h>

#include <cmath>

using namespace rlscale;
using namespace rlscale::nn;

namespace {

NetSpec small_spec(HeadKind head, std::size_t in, std::vector<HiddenLayer> hidden, std::size_t actions,
                   std::size_t atoms = 1) {
  NetSpec s;
  s.input_dim = in;
  s.hidden = std::move(hidden);
  s.head = head;
  s.actions = actions;
  s.atoms = atoms;
  return s;
}

Matrix random_obs(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::vector<double> to_std(const Eigen::Ref<const Eigen::RowVectorXd>& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

TEST_CASE("init is deterministic and zeroes biases") {
  Network net(small_spec(HeadKind::PolicyValue, 3, {{5, Activation::Tanh}}, 2));
  const auto a = net.init(7), b = net.init(7);
  CHECK(a == b);
  CHECK(net.init(8) != a);
  for (const auto& l : net.layers()) {
    for (std::size_t i = 0; i < l.out; ++i) CHECK(a[static_cast<Eigen::Index>(l.bias_offset + i)] == 0.0);
    const double bound = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
    for (std::size_t i = 0; i < l.in * l.out; ++i) CHECK(std::abs(a[static_cast<Eigen::Index>(l.weight_offset + i)]) <= bound);
  }
}

TEST_CASE("parameter count by layout enumeration") {
  Network pv(small_spec(HeadKind::PolicyValue, 16, {{64, Activation::Tanh}}, 4));
  CHECK(pv.num_params() == 16 * 64 + 64 + (64 * 5 + 5));
  Network q(small_spec(HeadKind::Q, 16, {{64, Activation::Tanh}, {64, Activation::Relu}}, 3));
  CHECK(q.num_params() == 16 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3);
  Network qd(small_spec(HeadKind::QDist, 16, {{64, Activation::Tanh}}, 3, 51));
  CHECK(qd.num_params() == 16 * 64 + 64 + 64 * 153 + 153);
}

TEST_CASE("invalid specs are configuration errors") {
  CHECK_THROWS_AS(Network(small_spec(HeadKind::Q, 0, {{4, Activation::Tanh}}, 2)), ConfigError);
  CHECK_THROWS_AS(Network(small_spec(HeadKind::Q, 2, {}, 2)), ConfigError);
  CHECK_THROWS_AS(Network(small_spec(HeadKind::Q, 2, {{0, Activation::Tanh}}, 2)), ConfigError);
  CHECK_THROWS_AS(Network(small_spec(HeadKind::Q, 2, {{4, Activation::Tanh}}, 0)), ConfigError);
  CHECK_THROWS_AS(Network(small_spec(HeadKind::QDist, 2, {{4, Activation::Tanh}}, 2, 0)), ConfigError);
  CHECK_THROWS_AS(activation_from_string("sigmoid"), ConfigError);
  CHECK_THROWS_AS(head_from_string("v"), ConfigError);
}

TEST_CASE("forward_policy_value") {
  Network net(small_spec(HeadKind::PolicyValue, 3, {{4, Activation::Tanh}}, 2));
  SUBCASE("zero params give uniform policy and zero value") {
    const ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(net.num_params()));
    Rng rng(1);
    const auto pv = net.forward_policy_value(p, random_obs(5, 3, rng));
    for (Eigen::Index r = 0; r < 5; ++r) {
      CHECK(pv.probs(r, 0) == doctest::Approx(0.5).epsilon(1e-15));
      CHECK(pv.values[r] == 0.0);
    }
  }
  SUBCASE("logits (ln 3, 0) give (0.75, 0.25)") {
    ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(net.num_params()));
    const auto& head = net.layers().back();
    p[static_cast<Eigen::Index>(head.bias_offset)] = std::log(3.0);
    const auto pv = net.forward_policy_value(p, Matrix::Ones(1, 3));
    CHECK(std::abs(pv.probs(0, 0) - 0.75) < 1e-12);
    CHECK(std::abs(pv.probs(0, 1) - 0.25) < 1e-12);
  }
  SUBCASE("matches straight-line recomputation") {
    Network deep(small_spec(HeadKind::PolicyValue, 4, {{6, Activation::Tanh}, {5, Activation::Relu}}, 3));
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const auto p = deep.init(static_cast<std::uint64_t>(trial));
      const Matrix obs = random_obs(3, 4, rng);
      const auto pv = deep.forward_policy_value(p, obs);
      const std::vector<double> flat(p.data(), p.data() + p.size());
      for (Eigen::Index r = 0; r < obs.rows(); ++r) {
        const auto raw = oracle::dense_forward(flat, to_std(obs.row(r)), {6, 5}, {0, 1}, 4);
        const auto probs = oracle::softmax({raw[0], raw[1], raw[2]});
        double sum = 0.0;
        for (int a = 0; a < 3; ++a) {
          CHECK(std::abs(pv.probs(r, a) - probs[static_cast<std::size_t>(a)]) < 1e-13);
          CHECK(pv.probs(r, a) > 0.0);
          sum += pv.probs(r, a);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
        CHECK(std::abs(pv.values[r] - raw[3]) < 1e-13);
      }
    }
  }
  SUBCASE("shape errors") {
    const auto p = net.init(1);
    CHECK_THROWS_AS(net.forward_policy_value(p, Matrix::Zero(1, 4)), ShapeError);
    CHECK_THROWS_AS(net.forward_policy_value(p, Matrix::Zero(0, 3)), ShapeError);
    CHECK_THROWS_AS(net.forward_policy_value(ParamVector::Zero(3), Matrix::Zero(1, 3)), ShapeError);
  }
}

TEST_CASE("forward_q") {
  Network net(small_spec(HeadKind::Q, 2, {{2, Activation::Relu}}, 2));
  ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(net.num_params()));
  CHECK(net.forward_q(p, Matrix::Ones(3, 2)).isZero());
  // Identity hidden layer, head W = [[1, 2], [3, 4]], b = (0.5, -0.5); obs (1, 2) -> relu (1, 2)
  // -> q = (1 + 4 + 0.5, 3 + 8 - 0.5) = (5.5, 10.5).
  p << 1, 0, 0, 1, 0, 0, 1, 2, 3, 4, 0.5, -0.5;
  Matrix obs(2, 2);
  obs << 1, 2, 1, 2;
  const Matrix q = net.forward_q(p, obs);
  CHECK(q(0, 0) == doctest::Approx(5.5));
  CHECK(q(0, 1) == doctest::Approx(10.5));
  CHECK(q.row(0) == q.row(1));
  // Negative input is clipped by relu: obs (-1, 2) -> (0, 2) -> (4.5, 7.5).
  Matrix neg(1, 2);
  neg << -1, 2;
  const Matrix qn = net.forward_q(p, neg);
  CHECK(qn(0, 0) == doctest::Approx(4.5));
  CHECK(qn(0, 1) == doctest::Approx(7.5));
}

TEST_CASE("forward_q_dist") {
  Rng rng(5);
  SUBCASE("zero params give uniform atoms") {
    Network net(small_spec(HeadKind::QDist, 3, {{4, Activation::Tanh}}, 2, 5));
    const auto d = net.forward_q_dist(ParamVector::Zero(static_cast<Eigen::Index>(net.num_params())), random_obs(2, 3, rng));
    CHECK(d.cols() == 10);
    for (Eigen::Index i = 0; i < d.size(); ++i) CHECK(d.data()[i] == doctest::Approx(0.2));
  }
  SUBCASE("single atom holds all mass") {
    Network net(small_spec(HeadKind::QDist, 3, {{4, Activation::Tanh}}, 3, 1));
    const auto d = net.forward_q_dist(net.init(2), random_obs(4, 3, rng));
    for (Eigen::Index i = 0; i < d.size(); ++i) CHECK(d.data()[i] == 1.0);
  }
  SUBCASE("blocks are distributions and expectations match a dot-product oracle") {
    Network net(small_spec(HeadKind::QDist, 3, {{8, Activation::Tanh}}, 2, 7));
    const auto p = net.init(9);
    const Matrix obs = random_obs(6, 3, rng);
    const Matrix d = net.forward_q_dist(p, obs);
    const std::vector<double> flat(p.data(), p.data() + p.size());
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
      const auto raw = oracle::dense_forward(flat, to_std(obs.row(r)), {8}, {0}, 14);
      for (int a = 0; a < 2; ++a) {
        const auto ref = oracle::softmax({raw.begin() + a * 7, raw.begin() + a * 7 + 7});
        double sum = 0.0, ev = 0.0, ev_ref = 0.0;
        for (int k = 0; k < 7; ++k) {
          const double z = -1.0 + k / 3.0;
          sum += d(r, a * 7 + k);
          ev += z * d(r, a * 7 + k);
          ev_ref += z * ref[static_cast<std::size_t>(k)];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
        CHECK(std::abs(ev - ev_ref) < 1e-12);
      }
    }
  }
}

TEST_CASE("backward") {
  SUBCASE("zero head gradient gives zero gradient") {
    Network net(small_spec(HeadKind::Q, 3, {{4, Activation::Tanh}}, 2));
    CHECK(net.backward(net.init(1), Matrix::Ones(2, 3), Matrix::Zero(2, 2)).isZero());
  }
  SUBCASE("single weight chain rule") {
    // x=3 through an identity relu unit, y = w * h: dy/dw = 3.
    Network net(small_spec(HeadKind::Q, 1, {{1, Activation::Relu}}, 1));
    ParamVector p(4);
    p << 1, 0, 2, 0;
    const auto g = net.backward(p, Matrix::Constant(1, 1, 3.0), Matrix::Ones(1, 1));
    CHECK(g[2] == doctest::Approx(3.0));
    CHECK(g[3] == doctest::Approx(1.0));
    CHECK(g[0] == doctest::Approx(6.0));
  }
  SUBCASE("shape mismatch") {
    Network net(small_spec(HeadKind::Q, 3, {{4, Activation::Tanh}}, 2));
    CHECK_THROWS_AS(net.backward(net.init(1), Matrix::Ones(2, 3), Matrix::Zero(2, 3)), ShapeError);
  }
}

TEST_CASE("finite_diff_grad") {
  const auto zero = finite_diff_grad(ParamVector::Ones(3), [](const ParamVector&) { return 4.0; });
  CHECK(zero.isZero());
  ParamVector t(2);
  t << 1, 2;
  const auto g = finite_diff_grad(t, [](const ParamVector& x) { return 0.5 * x.squaredNorm(); });
  CHECK(std::abs(g[0] - 1.0) < 1e-8);
  CHECK(std::abs(g[1] - 2.0) < 1e-8);
}

TEST_CASE("property: backward agrees with finite differences on random instances") {
  Rng rng(11);
  std::uniform_int_distribution<int> dim(1, 5), layers(1, 3), head(0, 2), act(0, 1);
  std::normal_distribution<double> n(0.0, 1.0);
  int checked = 0;
  for (int trial = 0; trial < 120; ++trial) {
    std::vector<HiddenLayer> hidden;
    for (int l = layers(rng); l > 0; --l) hidden.push_back({static_cast<std::size_t>(dim(rng)), Activation::Tanh});
    const auto hk = static_cast<HeadKind>(head(rng));
    Network net(small_spec(hk, static_cast<std::size_t>(dim(rng)), hidden, static_cast<std::size_t>(dim(rng) + 1),
                           hk == HeadKind::QDist ? 3 : 1));
    const auto p = net.init(static_cast<std::uint64_t>(trial));
    const Matrix obs = random_obs(3, net.spec().input_dim, rng);
    const Matrix w = random_obs(3, net.spec().output_dim(), rng);
    auto loss = [&](const ParamVector& q) { return (net.forward(q, obs).array() * w.array()).sum(); };
    const auto g = net.backward(p, obs, w);
    const auto fd = finite_diff_grad(p, loss, 1e-6);
    const double rel = (g - fd).norm() / std::max(1e-8, g.norm());
    CHECK(rel <= 1e-4);
    ++checked;
  }
  CHECK(checked >= 100);
}

TEST_CASE("property: relu nets agree with finite differences away from kinks") {
  Network net(small_spec(HeadKind::PolicyValue, 4, {{6, Activation::Relu}, {5, Activation::Relu}}, 3));
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    ParamVector p = net.init(100 + static_cast<std::uint64_t>(trial));
    // Nonzero biases keep pre-activations off the kink even when a whole layer is dead.
    std::uniform_real_distribution<double> b(0.05, 0.2);
    for (const auto& l : net.layers())
      for (std::size_t i = 0; i < l.out; ++i) p[static_cast<Eigen::Index>(l.bias_offset + i)] = b(rng);
    const Matrix obs = random_obs(2, 4, rng);
    const Matrix w = random_obs(2, 4, rng);
    const auto g = net.backward(p, obs, w);
    const auto fd = finite_diff_grad(p, [&](const ParamVector& q) { return (net.forward(q, obs).array() * w.array()).sum(); });
    CHECK((g - fd).norm() / std::max(1e-8, g.norm()) <= 1e-4);
  }
}

TEST_CASE("property: softmax rows sum to one and forward is bitwise deterministic") {
  Network net(small_spec(HeadKind::QDist, 3, {{8, Activation::Tanh}}, 4, 11));
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    ParamVector p = net.init(static_cast<std::uint64_t>(trial)) * 20.0;
    const Matrix obs = random_obs(4, 3, rng) * 10.0;
    const Matrix d = net.forward_q_dist(p, obs);
    for (Eigen::Index r = 0; r < d.rows(); ++r)
      for (Eigen::Index a = 0; a < 4; ++a) CHECK(std::abs(d.row(r).segment(a * 11, 11).sum() - 1.0) <= 1e-12);
    CHECK(d == net.forward_q_dist(p, obs));
    const Matrix w = random_obs(4, 44, rng);
    CHECK(net.backward(p, obs, w) == net.backward(p, obs, w));
  }
}

TEST_CASE("spec canonical form and hash") {
  auto a = small_spec(HeadKind::Q, 3, {{4, Activation::Tanh}}, 2);
  auto b = a;
  CHECK(a.hash() == b.hash());
  b.hidden[0].activation = Activation::Relu;
  CHECK(a.hash() != b.hash());
  CHECK(a.output_dim() == 2);
  CHECK(small_spec(HeadKind::PolicyValue, 3, {{4, Activation::Tanh}}, 2).output_dim() == 3);
  CHECK(small_spec(HeadKind::QDist, 3, {{4, Activation::Tanh}}, 2, 5).output_dim() == 10);
}
