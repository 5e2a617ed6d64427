#include <cmath>
#include <cstring>
#include <functional>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "xdk/errors.hpp"
#include "xdk/gradcheck.hpp"
#include "xdk/ops.hpp"

using namespace xdk;
using T = Tensor<double>;
using xdk::test::random_dim;
using xdk::test::random_tensor;

namespace {

// Random weighted sum so every output element gets a distinct upstream grad.
T weighted_sum(const T& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  T w = random_tensor<double>(y.shape(), rng, 1.0, false);
  return sum(mul(y, w));
}

}  // namespace

TEST_CASE("tensor invariants") {
  T t(Shape{2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK_FALSE(t.has_grad());
  t.grad_matrix()(1, 2) = 1.0;
  CHECK(t.grad().size() == 6);
  CHECK_THROWS_AS(T(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);

  T lattice(Shape{2, 3, 4});
  CHECK(lattice.rows() == 6);
  CHECK(lattice.cols() == 4);

  T bad(Shape{2});
  bad.data()[0] = std::nan("");
  CHECK_FALSE(bad.is_finite());
}

TEST_CASE("relu and layer_norm examples") {
  T x(Shape{3}, {-1.0, 0.0, 2.0});
  T y = relu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 2.0);

  T c(Shape{1, 3}, {0.7, 0.7, 0.7});
  T gain(Shape{3}, {2.0, -1.0, 0.5});
  T bias(Shape{3}, {0.1, 0.2, 0.3});
  T out = layer_norm(c, gain, bias, 1e-5);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(out.data()[i] - bias.data()[i]) < 1e-6);

  CHECK_THROWS_AS(layer_norm(c, gain, bias, 0.0), DomainError);
  CHECK_THROWS_AS(layer_norm(c, gain, bias, -1e-5), DomainError);
}

TEST_CASE("logsumexp of normalized inputs is zero") {
  T x(Shape{2}, {std::log(0.3), std::log(0.7)});
  T y = logsumexp(x);
  CHECK(y.rank() == 0);
  CHECK(std::abs(y.item()) < 1e-12);
}

TEST_CASE("shape mismatches name both shapes") {
  T a(Shape{2, 3});
  T b(Shape{2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, T(Shape{2})), DimensionError);
  CHECK_THROWS_AS(add(a, T(Shape{3, 2})), DimensionError);
  CHECK_NOTHROW(add(a, T(Shape{3})));
  CHECK_THROWS_AS(mul(a, T(Shape{3})), DimensionError);
  CHECK_THROWS_AS(log_softmax(a, 0), DimensionError);
  CHECK_THROWS_AS(slice(a, -1, 2, 2), DimensionError);
  CHECK_THROWS_AS(causal_mask(a), DimensionError);
}

TEST_CASE("backward examples") {
  Graph<double> graph;
  T x(Shape{2}, {1.0, 2.0}, true);
  {
    GraphScope<double> scope(graph);
    T loss = sum(mul(x, x));
    graph.backward(loss);
  }
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));

  T z(Shape{2}, {0.0, 0.0}, true);
  {
    GraphScope<double> scope(graph);
    graph.backward(logsumexp(z));
  }
  CHECK(z.grad()[0] == doctest::Approx(0.5));
  CHECK(z.grad()[1] == doctest::Approx(0.5));
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph<double> graph;
  T x(Shape{2}, {1.0, 2.0}, true);
  GraphScope<double> scope(graph);
  T y = relu(x);
  CHECK_THROWS_AS(graph.backward(y), ContractError);
}

TEST_CASE("no recording without an active graph") {
  Graph<double> graph;
  T x(Shape{2}, {1.0, 2.0}, true);
  T y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
  {
    GraphScope<double> scope(graph);
    NoGradScope<double> no_grad;
    T z = sum(mul(x, x));
    CHECK_FALSE(z.requires_grad());
  }
  CHECK(graph.size() == 0);
}

TEST_CASE("gradients accumulate across consumers") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    // Small integers keep every product exact, so the comparison is
    // insensitive to accumulation order.
    const Index n = random_dim(rng, 1, 5);
    T x(Shape{n}, true);
    T w(Shape{n});
    for (Index i = 0; i < n; ++i) {
      x.data()[i] = static_cast<double>(random_dim(rng, -4, 4));
      w.data()[i] = static_cast<double>(random_dim(rng, -4, 4));
    }
    // x used by three consumers vs. independent copies.
    Graph<double> g1;
    {
      GraphScope<double> s(g1);
      g1.backward(sum(add(mul(x, w), mul(x, x))));
    }
    T x1 = x.clone();
    T x2 = x.clone();
    x1.zero_grad();
    x2.zero_grad();
    Graph<double> g2;
    {
      GraphScope<double> s(g2);
      g2.backward(sum(add(mul(x1, w), mul(x2, x2))));
    }
    for (Index i = 0; i < n; ++i) {
      const double expected = x1.grad()[i] + x2.grad()[i];
      CHECK(expected == w.data()[i] + 2 * x.data()[i]);
      CHECK(std::memcmp(&x.grad()[i], &expected, sizeof(double)) == 0);
    }
  }
}

TEST_CASE("log_softmax rows normalize") {
  std::mt19937_64 rng(3);
  T x = random_tensor<double>(Shape{4, 7}, rng, 5.0);
  T y = logsumexp(log_softmax(x));
  for (double v : y.data()) CHECK(std::abs(v) < 1e-6);
}

TEST_CASE("finite_difference_check examples") {
  std::mt19937_64 rng(11);
  T x = random_tensor<double>(Shape{5}, rng);
  std::function<T(const T&)> linear = [](const T& v) { return sum(v); };
  CHECK(finite_difference_check<double>(linear, x, 1e-4) < 1e-10);

  T half(Shape{1}, std::vector<double>{0.5});
  std::function<T(const T&)> th = [](const T& v) { return sum(tanh(v)); };
  CHECK(finite_difference_check<double>(th, half, 1e-4) < 1e-8);
  // closed form 1 - tanh^2
  Graph<double> g;
  {
    GraphScope<double> s(g);
    half.set_requires_grad(true);
    g.backward(sum(tanh(half)));
  }
  const double t = std::tanh(0.5);
  CHECK(std::abs(half.grad()[0] - (1 - t * t)) < 1e-15);

  int calls = 0;
  std::function<T(const T&)> flaky = [&calls](const T& v) { return scale(sum(v), 1.0 + (calls++ % 2)); };
  CHECK_THROWS_AS(finite_difference_check<double>(flaky, x, 1e-4), OracleError);
  CHECK_THROWS_AS(finite_difference_check<double>(linear, x, 0.0), DomainError);
}

// Every primitive against central differences on 100 seeded random shapes.
TEST_CASE("primitive gradients match finite differences") {
  std::mt19937_64 rng(2024);
  using Fn = std::function<T()>;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index r = random_dim(rng, 1, 4);
    const Index c = random_dim(rng, 1, 5);
    const Index k = random_dim(rng, 1, 4);
    const std::uint64_t ws = rng();
    T a = random_tensor<double>(Shape{r, c}, rng);
    T b = random_tensor<double>(Shape{r, c}, rng);
    T m = random_tensor<double>(Shape{c, k}, rng);
    T bias = random_tensor<double>(Shape{c}, rng);
    T gain = random_tensor<double>(Shape{c}, rng);
    // keep relu inputs away from the kink
    T away = random_tensor<double>(Shape{r, c}, rng);
    for (auto& v : away.data()) v += (v >= 0 ? 0.1 : -0.1);
    T sq = random_tensor<double>(Shape{r, r}, rng);
    std::vector<Index> ids;
    for (int i = 0; i < 6; ++i) ids.push_back(random_dim(rng, 0, r - 1));
    std::vector<Index> flat;
    for (int i = 0; i < 5; ++i) flat.push_back(random_dim(rng, 0, r * c - 1));

    std::vector<std::pair<Fn, std::vector<T>>> cases = {
        {[&] { return weighted_sum(matmul(a, m), ws); }, {a, m}},
        {[&] { return weighted_sum(add(a, b), ws); }, {a, b}},
        {[&] { return weighted_sum(add(a, bias), ws); }, {a, bias}},
        {[&] { return weighted_sum(mul(a, b), ws); }, {a, b}},
        {[&] { return weighted_sum(scale(a, -1.7), ws); }, {a}},
        {[&] { return weighted_sum(relu(away), ws); }, {away}},
        {[&] { return weighted_sum(tanh(a), ws); }, {a}},
        {[&] { return weighted_sum(sigmoid(a), ws); }, {a}},
        {[&] { return weighted_sum(exp(a), ws); }, {a}},
        {[&] { return weighted_sum(log_softmax(a), ws); }, {a}},
        {[&] { return weighted_sum(logsumexp(a), ws); }, {a}},
        {[&] { return weighted_sum(concat<double>({a, b}, -1), ws); }, {a, b}},
        {[&] { return weighted_sum(concat<double>({a, b}, 0), ws); }, {a, b}},
        {[&] { return weighted_sum(slice(a, -1, c - 1, 1), ws); }, {a}},
        {[&] { return weighted_sum(slice(a, 0, 0, r), ws); }, {a}},
        {[&] { return weighted_sum(embedding_lookup<double>(a, ids), ws); }, {a}},
        {[&] { return weighted_sum(gather<double>(a, flat), ws); }, {a}},
        {[&] { return weighted_sum(transpose(a), ws); }, {a}},
        {[&] { return weighted_sum(log_softmax(causal_mask(sq)), ws); }, {sq}},
        {[&] { return sum(a); }, {a}},
        {[&] { return weighted_sum(reshape(a, Shape{r * c}), ws); }, {a}},
    };
    // Two-wide rows normalize to +-1 regardless of input; the Jacobian is
    // O(eps) there and the relative metric only measures difference noise.
    if (c >= 3) {
      cases.push_back({[&] { return weighted_sum(layer_norm(a, gain, bias, 1e-5), ws); }, {a, gain, bias}});
    }
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
      auto& [fn, inputs] = cases[ci];
      const double err = finite_difference_check<double>(fn, inputs, 1e-5);
      worst = std::max(worst, err);
      CAPTURE(ci);
      CAPTURE(c);
      CHECK(err < 1e-6);
    }
  }
  MESSAGE("worst primitive relative error: " << worst);
}

TEST_CASE("deterministic buffers under a fixed seed") {
  auto run = [] {
    std::mt19937_64 rng(99);
    T a = random_tensor<double>(Shape{3, 4}, rng);
    T m = random_tensor<double>(Shape{4, 2}, rng);
    return log_softmax(tanh(matmul(a, m)));
  };
  T y1 = run();
  T y2 = run();
  CHECK(std::memcmp(y1.data().data(), y2.data().data(), sizeof(double) * y1.size()) == 0);
}
