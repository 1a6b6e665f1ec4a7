#include <doctest.h>

#include <cmath>

#include "lglab/errors.hpp"
#include "lglab/gradcheck.hpp"
#include "lglab/optimizer.hpp"
#include "lglab/rng.hpp"
#include "lglab/tape.hpp"

using namespace lglab;
using namespace lglab::ad;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor<double> t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t[5] == 1.5);
  CHECK_THROWS_AS(Tensor<double>({2, 0}), ValidationError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ValidationError);
  const auto f = t.cast<float>();
  CHECK(f[0] == 1.5f);
}

TEST_CASE("param store is name-ordered and rejects duplicates") {
  ParamStore<double> p;
  p.add("b", Tensor<double>({1}));
  p.add("a", Tensor<double>({2}));
  CHECK(p.names() == std::vector<std::string>{"a", "b"});
  CHECK_THROWS_AS(p.add("a", Tensor<double>({1})), ValidationError);
  CHECK(p.scalar_count() == 3);
}

TEST_CASE("dense with identity weights is the identity") {
  Tape<double> tape;
  const auto x = random_tensor({3, 4}, 1);
  Tensor<double> w({4, 4});
  for (int i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
  const Var y = tape.dense(tape.constant(x), tape.constant(w), tape.constant(Tensor<double>({4})));
  CHECK(tape.value(y) == x);
}

TEST_CASE("1x1 unit kernel conv is the identity") {
  Tape<double> tape;
  const auto x = random_tensor({2, 1, 5, 5}, 2);
  const Var y = tape.conv2d(tape.constant(x), tape.constant(Tensor<double>({1, 1, 1, 1}, 1.0)),
                            tape.constant(Tensor<double>({1})), 1, 0);
  CHECK(tape.value(y) == x);
}

TEST_CASE("conv2d matches a direct loop") {
  const auto x = random_tensor({2, 3, 6, 6}, 3);
  const auto w = random_tensor({4, 3, 4, 4}, 4);
  const auto b = random_tensor({4}, 5);
  Tape<double> tape;
  const auto y = tape.value(tape.conv2d(tape.constant(x), tape.constant(w), tape.constant(b), 2, 1));
  REQUIRE(y.shape() == Shape{2, 4, 3, 3});
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double s = b[o];
          for (int c = 0; c < 3; ++c)
            for (int ki = 0; ki < 4; ++ki)
              for (int kj = 0; kj < 4; ++kj) {
                const int r = i * 2 - 1 + ki, q = j * 2 - 1 + kj;
                if (r < 0 || r >= 6 || q < 0 || q >= 6) continue;
                s += w[((o * 3 + c) * 4 + ki) * 4 + kj] * x[((n * 3 + c) * 6 + r) * 6 + q];
              }
          CHECK(y[((n * 4 + o) * 3 + i) * 3 + j] == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("conv2d_transpose is the adjoint of conv2d") {
  // <conv(x), y> == <x, conv_t(y)> with shared weights and zero bias.
  const auto x = random_tensor({1, 2, 8, 8}, 6);
  const auto y = random_tensor({1, 3, 4, 4}, 7);
  const auto w = random_tensor({3, 2, 4, 4}, 8);
  Tape<double> tape;
  const auto cx = tape.value(tape.conv2d(tape.constant(x), tape.constant(w), tape.constant(Tensor<double>({3})), 2, 1));
  const auto ty = tape.value(tape.conv2d_transpose(tape.constant(y), tape.constant(w), tape.constant(Tensor<double>({2})), 2, 1));
  REQUIRE(ty.shape() == x.shape());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("gaussian_sample with standard posterior passes noise through") {
  Tape<double> tape;
  const auto n = random_tensor({2, 5}, 9);
  const Var z = tape.gaussian_sample(tape.constant(Tensor<double>({2, 5})), tape.constant(Tensor<double>({2, 5})), n);
  CHECK(tape.value(z) == n);
}

TEST_CASE("elementary gradients") {
  Tape<double> tape;
  const Var x = tape.variable(Tensor<double>({1}, std::vector<double>{3.0}));
  tape.backward(tape.sum(tape.square(x)));
  CHECK(tape.grad(x)[0] == 6.0);

  Tape<double> t2;
  const Var y = t2.variable(random_tensor({2, 3}, 10));
  t2.backward(t2.sum(y));
  const auto gy = t2.grad(y);
  for (double g : gy.values()) CHECK(g == 1.0);
}

TEST_CASE("backward requires a scalar loss and zero-fills unreachable params") {
  ParamStore<double> p;
  p.add("used", random_tensor({3}, 11));
  p.add("unused", random_tensor({2}, 12));
  Tape<double> tape;
  const Var u = tape.param(p, "used");
  CHECK_THROWS_AS(tape.backward(u), ValidationError);
  const auto grads = tape.backward(tape.sum(tape.square(u)));
  REQUIRE(grads.size() == 2);
  for (double g : grads.at("unused").values()) CHECK(g == 0.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(grads.at("used")[i] == 2.0 * p.at("used")[i]);
}

TEST_CASE("shape mismatches and overflow are reported") {
  Tape<double> tape;
  const Var a = tape.constant(Tensor<double>({2}));
  const Var b = tape.constant(Tensor<double>({3}));
  CHECK_THROWS_AS(tape.add(a, b), ValidationError);
  const Var big = tape.constant(Tensor<double>({1}, 1000.0));
  CHECK_THROWS_AS(tape.exp(big), OverflowError);
  CHECK(tape.value(tape.log(tape.constant(Tensor<double>({1}, 0.0)), 1e-7))[0] == doctest::Approx(std::log(1e-7)));
}

TEST_CASE("tape is deterministic") {
  auto run = [] {
    ParamStore<double> p;
    p.add("w", random_tensor({4, 6}, 13));
    p.add("b", random_tensor({4}, 14));
    Tape<double> tape;
    const Var h = tape.tanh(tape.dense(tape.constant(random_tensor({5, 6}, 15)), tape.param(p, "w"), tape.param(p, "b")));
    const Var loss = tape.mean(tape.square(h));
    return std::pair{tape.value(loss)[0], tape.backward(loss)};
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second.at("w") == b.second.at("w"));
}

TEST_CASE("grad_check: quadratic loss is exact") {
  ParamStore<double> p;
  p.add("theta", random_tensor({7}, 16));
  const auto report = grad_check(
      [](Tape<double>& t, const ParamStore<double>& s) {
        return t.sum(t.square(t.affine(t.param(s, "theta"), 2.0, -0.3)));
      },
      p, 1e-4);
  CHECK(report.max_relative_error < 1e-9);
  CHECK(report.probes == 7);
}

TEST_CASE("grad_check: small conv net with log loss") {
  ParamStore<double> p;
  p.add("c1.w", random_tensor({4, 1, 4, 4}, 17, -0.5, 0.5));
  p.add("c1.b", random_tensor({4}, 18, -0.1, 0.1));
  p.add("c2.w", random_tensor({6, 4, 4, 4}, 19, -0.3, 0.3));
  p.add("c2.b", random_tensor({6}, 20, -0.1, 0.1));
  p.add("d.w", random_tensor({1, 6 * 2 * 2}, 21, -0.3, 0.3));
  p.add("d.b", random_tensor({1}, 22, -0.1, 0.1));
  const auto x = random_tensor({3, 1, 8, 8}, 23, 0, 1);
  const auto report = grad_check(
      [&](Tape<double>& t, const ParamStore<double>& s) {
        Var h = t.leaky_relu(t.conv2d(t.constant(x), t.param(s, "c1.w"), t.param(s, "c1.b"), 2, 1), 0.2);
        h = t.leaky_relu(t.conv2d(h, t.param(s, "c2.w"), t.param(s, "c2.b"), 2, 1), 0.2);
        const Var prob = t.sigmoid(t.dense(t.reshape(h, {3, 24}), t.param(s, "d.w"), t.param(s, "d.b")));
        return t.affine(t.sum(t.log(prob, 1e-7)), -1.0 / 3, 0.0);
      },
      p, 1e-5);
  CHECK(report.max_relative_error < 1e-5);
  CHECK(report.probes + report.kink_skipped > 0);
}

TEST_CASE("grad_check: leaky_relu away from the kink") {
  ParamStore<double> p;
  Tensor<double> x({20});
  Rng rng(24);
  for (double& v : x.values()) {
    const double mag = rng.uniform(0.1, 2.0);  // |x| >> 10h
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  p.add("x", x);
  const auto report = grad_check(
      [](Tape<double>& t, const ParamStore<double>& s) {
        return t.sum(t.square(t.leaky_relu(t.param(s, "x"), 0.2)));
      },
      p, 1e-5);
  CHECK(report.max_relative_error < 1e-6);
  CHECK(report.kink_skipped == 0);
  CHECK(report.reduced_step == 0);
}

TEST_CASE("grad_check: rejects bad step and non-finite losses") {
  ParamStore<double> p;
  p.add("x", Tensor<double>({1}, 1.0));
  auto build = [](Tape<double>& t, const ParamStore<double>& s) { return t.sum(t.param(s, "x")); };
  CHECK_THROWS_AS(grad_check(build, p, 1e-2), ValidationError);
  CHECK_THROWS_AS(grad_check(build, p, 1e-8), ValidationError);
  ParamStore<double> q;
  q.add("x", Tensor<double>({1}, 709.782));
  CHECK_THROWS_AS(grad_check([](Tape<double>& t, const ParamStore<double>& s) { return t.sum(t.exp(t.param(s, "x"))); }, q, 1e-3),
                  OverflowError);
}

TEST_CASE("reparameterization derivatives by finite differences") {
  ParamStore<double> p;
  p.add("mu", random_tensor({1, 4}, 25));
  p.add("lv", random_tensor({1, 4}, 26));
  const auto noise = random_tensor({1, 4}, 27);
  const auto c = random_tensor({1, 4}, 28);
  // Projecting z onto c exercises dz/dmu = I and dz/dlogvar = exp(lv/2) * noise / 2.
  auto build = [&](Tape<double>& t, const ParamStore<double>& s) {
    return t.sum(t.mul(t.gaussian_sample(t.param(s, "mu"), t.param(s, "lv"), noise), t.constant(c)));
  };
  CHECK(grad_check(build, p, 1e-5).max_relative_error < 1e-8);
  Tape<double> tape;
  const auto g = tape.backward(build(tape, p));
  for (int i = 0; i < 4; ++i) {
    CHECK(g.at("mu")[i] == doctest::Approx(c[i]).epsilon(1e-14));
    CHECK(g.at("lv")[i] == doctest::Approx(0.5 * std::exp(0.5 * p.at("lv")[i]) * noise[i] * c[i]).epsilon(1e-14));
  }
}

TEST_CASE("optimizer: zero gradient leaves parameters and counts the step") {
  ParamStore<double> p;
  p.add("w", random_tensor({3}, 29));
  const auto before = p.at("w");
  OptimizerState<double> s;
  GradMap<double> g;
  g.emplace("w", Tensor<double>({3}));
  optimizer_step(p, g, s);
  CHECK(p.at("w") == before);
  CHECK(s.step == 1);
}

TEST_CASE("optimizer: constant gradient moves against its sign") {
  ParamStore<double> p;
  p.add("w", Tensor<double>({2}, std::vector<double>{0.0, 0.0}));
  OptimizerState<double> s;
  GradMap<double> g;
  g.emplace("w", Tensor<double>({2}, std::vector<double>{0.7, -2.0}));
  for (int i = 0; i < 100; ++i) optimizer_step(p, g, s);
  CHECK(p.at("w")[0] < 0);
  CHECK(p.at("w")[1] > 0);
}

TEST_CASE("optimizer: Adam on a 1-D quadratic matches its scalar recurrence") {
  OptimizerState<double> s;
  s.config.learning_rate = 0.1;
  ParamStore<double> p;
  p.add("theta", Tensor<double>({1}, 0.0));
  // Independent scalar recurrence.
  double theta = 0, m = 0, v = 0;
  const double b1 = s.config.beta1, b2 = s.config.beta2, eps = s.config.epsilon;
  for (int t = 1; t <= 500; ++t) {
    GradMap<double> g;
    g.emplace("theta", Tensor<double>({1}, p.at("theta")[0] - 5.0));
    optimizer_step(p, g, s);
    const double grad = theta - 5.0;
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    theta -= 0.1 * mh / (std::sqrt(vh) + eps);
  }
  CHECK(p.at("theta")[0] == doctest::Approx(theta).epsilon(1e-12));
  CHECK(std::abs(p.at("theta")[0] - 5.0) < 1e-3);
}

TEST_CASE("optimizer: non-finite gradient names the parameter and changes nothing") {
  ParamStore<double> p;
  p.add("ok", Tensor<double>({1}, 1.0));
  p.add("bad", Tensor<double>({1}, 1.0));
  OptimizerState<double> s;
  GradMap<double> g;
  g.emplace("ok", Tensor<double>({1}, 0.5));
  g.emplace("bad", Tensor<double>({1}, std::nan("")));
  try {
    optimizer_step(p, g, s);
    FAIL("expected overflow");
  } catch (const OverflowError& e) {
    CHECK(std::string(e.what()).find("bad") != std::string::npos);
  }
  CHECK(p.at("ok")[0] == 1.0);
  CHECK(s.step == 0);
}
