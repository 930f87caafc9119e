#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "rotar/kernels.hpp"
#include "rotar/ops.hpp"
#include "rotar/optim.hpp"

using namespace rotar;
using oracle::random_tensor;

TEST_CASE("tensor rejects mismatched data and zero dims") {
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor<float>({0, 2}), DimensionError);
  CHECK_THROWS_AS(Tensor<float>::vector({1, 2}).item(), DimensionError);
}

TEST_CASE("debug checks catch non-finite values") {
  Tensor<float> t = Tensor<float>::vector({1.0f, std::nanf("")});
  CHECK_THROWS_AS(check_finite(t, "test"), NumericError);
  set_debug_checks(true);
  {
    Tape<float> tape;
    Var<float> x = tape.constant(Tensor<float>::vector({1e30f}));
    CHECK_THROWS_AS(ops::mul(x, ops::scale(x, 1e30f)), NumericError);
  }
  set_debug_checks(false);
}

TEST_CASE("matmul examples") {
  Tape<double> tape;
  auto eye = tape.constant(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}));
  auto m = tape.constant(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  const Tensor<double> prod = ops::matmul(eye, m).value();
  CHECK(prod == m.value());
  auto r = ops::matmul(tape.constant(Tensor<double>::matrix(1, 2, {1, 2})),
                       tape.constant(Tensor<double>::matrix(2, 1, {3, 4})));
  CHECK(r.value().item() == 11.0);

  std::mt19937_64 rng(3);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  auto c = ops::matmul(tape.constant(a), tape.constant(b)).value();
  auto ref = oracle::naive_matmul(a, b);
  for (std::size_t i = 0; i < c.numel(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  CHECK_THROWS_AS(ops::matmul(tape.constant(a), tape.constant(a)), DimensionError);
  try {
    ops::matmul(tape.constant(a), tape.constant(a));
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("[3x4]") != std::string::npos);
  }
}

TEST_CASE("softmax examples and properties") {
  Tape<double> tape;
  auto s = [&](std::vector<double> v) { return ops::softmax(tape.constant(Tensor<double>::vector(v)), 0).value(); };
  auto a = s({0, 0});
  CHECK(a[0] == doctest::Approx(0.5));
  auto b = s({0, std::log(3.0)});
  CHECK(b[0] == doctest::Approx(0.25));
  CHECK(b[1] == doctest::Approx(0.75));
  auto c = s({1000, 1000});
  CHECK(c[0] == 0.5);
  CHECK(c[1] == 0.5);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({3, 5}, rng, -5, 5);
    auto y = ops::softmax(tape.constant(x), 1).value();
    Tensor<double> shifted = x;
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t k = 0; k < 5; ++k) shifted.at(r, k) += 7.0 * static_cast<double>(r + 1);
    auto ys = ops::softmax(tape.constant(shifted), 1).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double sum = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        CHECK(y.at(r, k) >= 0);
        CHECK(ys.at(r, k) == doctest::Approx(y.at(r, k)).epsilon(1e-12));
        sum += y.at(r, k);
      }
      CHECK(std::fabs(sum - 1) <= 1e-6);
    }
    auto y0 = ops::softmax(tape.constant(x), 0).value();
    for (std::size_t k = 0; k < 5; ++k) {
      double sum = 0;
      for (std::size_t r = 0; r < 3; ++r) sum += y0.at(r, k);
      CHECK(std::fabs(sum - 1) <= 1e-6);
    }
  }
}

TEST_CASE("layer_norm examples") {
  Tape<double> tape;
  auto gain = tape.constant(Tensor<double>::vector({1, 1}));
  auto bias = tape.constant(Tensor<double>::vector({0, 0}));
  auto y = ops::layer_norm(tape.constant(Tensor<double>::vector({1, -1})), gain, bias, 1e-5).value();
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-4));
  auto g3 = tape.constant(Tensor<double>::vector({1, 1, 1}));
  auto b3 = tape.constant(Tensor<double>::vector({0, 0, 0}));
  auto z = ops::layer_norm(tape.constant(Tensor<double>::vector({5, 5, 5})), g3, b3, 1e-5).value();
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("leaky_relu examples") {
  Tape<double> tape;
  auto f = [&](double v) { return ops::leaky_relu(tape.constant(Tensor<double>::vector({v})), 0.01).value()[0]; };
  CHECK(f(2) == 2);
  CHECK(f(-2) == doctest::Approx(-0.02));
  CHECK(f(0) == 0);
}

TEST_CASE("cross_entropy examples and analytic gradient") {
  Tape<double> tape;
  const std::size_t zero[] = {0};
  auto l1 = ops::cross_entropy(tape.constant(Tensor<double>::vector({0, 0})), std::span<const std::size_t>(zero));
  CHECK(l1.value().item() == doctest::Approx(std::numbers::ln2));
  auto l2 = ops::cross_entropy(tape.constant(Tensor<double>::vector({10, -10})), std::span<const std::size_t>(zero));
  CHECK(l2.value().item() == doctest::Approx(0.0).epsilon(1e-8));
  const std::size_t bad[] = {2};
  CHECK_THROWS(ops::cross_entropy(tape.constant(Tensor<double>::vector({0, 0})), std::span<const std::size_t>(bad)));

  // dL/dz = (softmax(z) - onehot) / B
  Tape<double> t2;
  auto z = t2.leaf(Tensor<double>::matrix(2, 3, {0.1, 0.5, -0.3, 1.0, -1.0, 0.2}));
  const std::size_t labels[] = {2, 0};
  auto loss = ops::cross_entropy(z, std::span<const std::size_t>(labels));
  t2.backward(loss);
  auto g = t2.grad(z);
  for (std::size_t r = 0; r < 2; ++r) {
    double denom = 0;
    for (std::size_t k = 0; k < 3; ++k) denom += std::exp(z.value().at(r, k));
    for (std::size_t k = 0; k < 3; ++k) {
      const double p = std::exp(z.value().at(r, k)) / denom;
      CHECK(g.at(r, k) == doctest::Approx((p - (k == labels[r] ? 1.0 : 0.0)) / 2.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("mse examples") {
  Tape<double> tape;
  auto m = [&](std::vector<double> a, std::vector<double> b) {
    return ops::mse(tape.constant(Tensor<double>::vector(a)), tape.constant(Tensor<double>::vector(b))).value().item();
  };
  CHECK(m({1, 2}, {1, 2}) == 0);
  CHECK(m({0, 0}, {2, 0}) == 2);
  CHECK(m({1, 2, 3}, {2, 4, 6}) == doctest::Approx(14.0 / 3.0));
  CHECK_THROWS_AS(m({1, 2}, {1, 2, 3}), DimensionError);
}

TEST_CASE("backward examples") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::vector({3}));
  tape.backward(ops::sum(ops::mul(x, x)));
  CHECK(tape.grad(x)[0] == 6);

  Tape<double> t2;
  auto a = t2.leaf(Tensor<double>::vector({1, 2, 3}));
  auto b = t2.leaf(Tensor<double>::vector({4, 5, 6}));
  t2.backward(ops::sum(ops::mul(a, b)));
  CHECK(t2.grad(a) == b.value());

  Tape<double> t3;
  auto v = t3.leaf(Tensor<double>::vector({1, 2}));
  CHECK_THROWS(t3.backward(ops::scale(v, 2.0)));
}

TEST_CASE("reusing a value sums its gradients exactly") {
  std::mt19937_64 rng(11);
  auto xv = random_tensor({4}, rng), w1 = random_tensor({4}, rng), w2 = random_tensor({4}, rng);
  auto grad_of = [&](bool first, bool second) {
    Tape<double> tape;
    auto x = tape.leaf(xv);
    std::vector<Var<double>> terms;
    if (first) terms.push_back(ops::sum(ops::mul(ops::gelu(x), tape.constant(w1))));
    if (second) terms.push_back(ops::sum(ops::mul(ops::gelu(x), tape.constant(w2))));
    auto loss = terms.size() == 2 ? ops::add(terms[0], terms[1]) : terms[0];
    tape.backward(loss);
    return tape.grad(x);
  };
  auto both = grad_of(true, true), g1 = grad_of(true, false), g2 = grad_of(false, true);
  for (std::size_t i = 0; i < 4; ++i) CHECK(both[i] == g1[i] + g2[i]);
}

TEST_CASE("backward visits each recorded node once") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::vector({1, 2}));
  auto y = ops::gelu(x);
  auto z = ops::add(y, y);
  tape.backward(ops::sum(z));
  CHECK(tape.backward_visits() == 3);
}

TEST_CASE("no-grad guard records constants") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::vector({1, 2}));
  Var<double> y;
  {
    NoGradGuard<double> guard(tape);
    y = ops::scale(x, 2.0);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(tape.grad_enabled());
}

TEST_CASE("dropout is the identity in eval mode and scales kept units") {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  auto x = tape.constant(Tensor<double>({1000}, 1.0));
  const Tensor<double> same = ops::dropout(x, 0.5, Mode::eval, rng).value();
  CHECK(same == x.value());
  auto y = ops::dropout(x, 0.5, Mode::train, rng).value();
  std::size_t kept = 0;
  for (double v : y.data()) {
    CHECK((v == 0.0 || v == 2.0));
    kept += v != 0.0;
  }
  CHECK(kept > 400);
  CHECK(kept < 600);
}

TEST_CASE("adamw examples") {
  auto run = [](double theta, double g, double lr, double wd, double eps) {
    Parameter<double> p("p", Tensor<double>::vector({theta}));
    AdamWConfig cfg;
    cfg.lr = lr;
    cfg.weight_decay = wd;
    cfg.eps = eps;
    AdamW<double> opt({&p}, cfg);
    p.grad[0] = g;
    opt.step();
    CHECK(opt.steps() == 1);
    return p.value[0];
  };
  CHECK(run(1.0, 0.0, 0.1, 0.0, 1e-8) == 1.0);
  CHECK(run(1.0, 0.5, 0.1, 0.0, 1e-12) == doctest::Approx(0.9).epsilon(1e-9));
  CHECK(run(2.0, 0.0, 0.1, 0.1, 1e-8) == doctest::Approx(2.0 * (1 - 0.01)).epsilon(1e-12));

  AdamWConfig bad;
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adamw is deterministic and keeps moment shapes") {
  std::mt19937_64 rng(9);
  auto init = random_tensor({3, 2}, rng);
  auto grads = random_tensor({3, 2}, rng);
  auto run = [&] {
    Parameter<double> p("p", init);
    AdamW<double> opt({&p}, AdamWConfig{});
    for (int s = 0; s < 5; ++s) {
      p.grad = grads;
      opt.step(1e-2);
    }
    CHECK(opt.first_moments()[0].shape() == p.value.shape());
    CHECK(opt.second_moments()[0].shape() == p.value.shape());
    CHECK(opt.steps() == 5);
    return p.value;
  };
  CHECK(run() == run());
}

TEST_CASE("cosine_lr examples") {
  CHECK(cosine_lr(10, 10, 110, 1.0, 0.1) == doctest::Approx(1.0));
  CHECK(cosine_lr(110, 10, 110, 1.0, 0.1) == doctest::Approx(0.1));
  CHECK(cosine_lr(60, 10, 110, 1.0, 0.1) == doctest::Approx(0.55));
  CHECK(cosine_lr(0, 10, 110, 1.0, 0.0) == 0.0);
  CHECK(cosine_lr(5, 10, 110, 1.0, 0.0) == doctest::Approx(0.5));
}

TEST_CASE("gemm kernels agree with the naive reference") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    kernels::GemmArgs g;
    g.m = 1 + rng() % 70;
    g.n = 1 + rng() % 70;
    g.k = 1 + rng() % 70;
    g.trans_a = rng() % 2;
    g.trans_b = rng() % 2;
    g.accumulate = rng() % 2;
    std::vector<float> a(g.m * g.k), b(g.k * g.n), c0(g.m * g.n);
    std::uniform_real_distribution<float> u(-1, 1);
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    for (auto& v : c0) v = u(rng);
    auto ref = c0, ser = c0, par = c0, dispatch = c0;
    kernels::gemm_reference<float>(g, a, b, ref);
    kernels::gemm_serial<float>(g, a, b, ser);
    kernels::gemm_parallel<float>(g, a, b, par);
    kernels::gemm<float>(g, a, b, dispatch);
    CHECK(ser == par);
    CHECK(ser == dispatch);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(ser[i] == doctest::Approx(ref[i]).epsilon(1e-4));
  }
  CHECK(kernels::max_threads() >= 1);
}
