#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "xdk/errors.hpp"
#include "xdk/gradcheck.hpp"
#include "xdk/ops.hpp"
#include "xdk/rnnt_loss.hpp"

using namespace xdk;
using T = Tensor<double>;
using L = LogitLattice<double>;

namespace {

L random_lattice(Index frames, Index length, Index vocab, std::mt19937_64& rng, double spread = 2.0) {
  T logits = test::random_tensor<double>(Shape{frames, length + 1, vocab + 1}, rng, spread, false);
  return L{log_softmax(logits)};
}

std::vector<Index> random_labels(Index length, Index vocab, std::mt19937_64& rng) {
  std::vector<Index> y;
  for (Index i = 0; i < length; ++i) y.push_back(test::random_dim(rng, 0, vocab - 1));
  return y;
}

long binomial(long n, long k) {
  long r = 1;
  for (long i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace

TEST_CASE("single frame, empty labels is one forced blank") {
  std::mt19937_64 rng(1);
  L lat = random_lattice(1, 0, 3, rng);
  std::vector<Index> none;
  const double loss = rnnt_loss<double>(lat, none).item();
  CHECK(loss == doctest::Approx(-lat.at(0, 0, 3)).epsilon(1e-14));
  auto bf = brute_force_loss<double>(lat, none);
  CHECK(bf.paths == 1);
  CHECK(bf.loss == doctest::Approx(loss).epsilon(1e-14));
}

TEST_CASE("uniform lattice T=2 U=1 V=2") {
  T lp(Shape{2, 2, 3});
  for (auto& v : lp.data()) v = -std::log(3.0);
  L lat{lp};
  std::vector<Index> y{1};
  const double loss = rnnt_loss<double>(lat, y).item();
  CHECK(std::abs(loss - (-std::log(2.0 / 27.0))) < 1e-12);
  CHECK(loss == doctest::Approx(2.6027).epsilon(1e-4));
  CHECK(brute_force_loss<double>(lat, y).paths == 2);
}

TEST_CASE("forward variables") {
  std::mt19937_64 rng(5);
  L lat = random_lattice(3, 2, 3, rng);
  std::vector<Index> y{0, 2};
  AlphaLattice<double> alpha;
  const double loss = rnnt_loss<double>(lat, y, &alpha).item();
  CHECK(alpha.at(0, 0) == 0.0);
  CHECK(alpha.at(1, 0) == doctest::Approx(lat.at(0, 0, 3)));
  CHECK(alpha.at(0, 1) == doctest::Approx(lat.at(0, 0, 0)));
  CHECK(alpha.loss == loss);
  CHECK(loss >= 0.0);
}

TEST_CASE("random T=3 U=2 V=3 matches brute force") {
  std::mt19937_64 rng(17);
  L lat = random_lattice(3, 2, 3, rng);
  std::vector<Index> y = random_labels(2, 3, rng);
  CHECK(std::abs(rnnt_loss<double>(lat, y).item() - brute_force_loss<double>(lat, y).loss) < 1e-10);
}

TEST_CASE("oracle equivalence sweep and path counts") {
  std::mt19937_64 rng(2025);
  double worst = 0.0;
  for (int seed = 0; seed < 200; ++seed) {
    const Index frames = test::random_dim(rng, 1, 4);
    const Index length = test::random_dim(rng, 0, 3);
    const Index vocab = test::random_dim(rng, 1, 3);
    L lat = random_lattice(frames, length, vocab, rng);
    std::vector<Index> y = random_labels(length, vocab, rng);
    auto bf = brute_force_loss<double>(lat, y);
    const double dp = rnnt_loss<double>(lat, y).item();
    worst = std::max(worst, std::abs(dp - bf.loss));
    CHECK(bf.paths == binomial(frames - 1 + length, length));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("contract errors") {
  std::mt19937_64 rng(3);
  L lat = random_lattice(2, 1, 2, rng);
  std::vector<Index> blank{2};
  CHECK_THROWS_AS(rnnt_loss<double>(lat, blank), ContractError);
  std::vector<Index> wrong_len{0, 1};
  CHECK_THROWS_AS(rnnt_loss<double>(lat, wrong_len), DimensionError);
  L empty{T(Shape{0, 1, 3})};
  std::vector<Index> none;
  CHECK_THROWS_AS(rnnt_loss<double>(empty, none), ContractError);
  L big = random_lattice(10, 5, 2, rng);
  std::vector<Index> y5{0, 1, 0, 1, 0};
  CHECK_THROWS_AS(brute_force_loss<double>(big, y5), OracleError);
}

TEST_CASE("loss gradient matches finite differences") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const Index frames = test::random_dim(rng, 1, 4);
    const Index length = test::random_dim(rng, 0, 3);
    L lat = random_lattice(frames, length, 3, rng);
    T lp = lat.log_probs;
    std::vector<Index> y = random_labels(length, 3, rng);
    std::function<T(const T&)> f = [&y](const T& x) { return rnnt_loss<double>(L{x}, y); };
    CHECK(finite_difference_check<double>(f, lp, 1e-5) < 1e-6);
  }
}

TEST_CASE("loss is non-increasing in path log-probs") {
  // d loss / d lp[t,u,k] is minus the posterior of that transition, so
  // raising a used log-prob (unnormalized) can never raise the loss.
  std::mt19937_64 rng(31);
  int renormalized_increases = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index frames = test::random_dim(rng, 1, 4);
    const Index length = test::random_dim(rng, 1, 3);
    T logits = test::random_tensor<double>(Shape{frames, length + 1, 4}, rng, 2.0, false);
    std::vector<Index> y = random_labels(length, 3, rng);
    const Index t = test::random_dim(rng, 0, frames - 1);
    const Index u = test::random_dim(rng, 0, length - 1);
    L base{log_softmax(logits)};
    const double before = rnnt_loss<double>(base, y).item();

    T raised = base.log_probs.clone();
    raised.data()[base.flat(t, u, y[u])] += 1e-3;
    CHECK(rnnt_loss<double>(L{raised}, y).item() <= before);

    T bumped = logits.clone();
    bumped.data()[base.flat(t, u, y[u])] += 1e-3;
    if (rnnt_loss<double>(L{log_softmax(bumped)}, y).item() > before) ++renormalized_increases;
  }
  MESSAGE("renormalized bumps that increased the loss: " << renormalized_increases << "/50");
}

TEST_CASE("loss is sensitive to label order") {
  std::mt19937_64 rng(41);
  int changed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    L lat = random_lattice(4, 3, 3, rng);
    std::vector<Index> y{0, 1, 2};
    std::vector<Index> shuffled{2, 0, 1};
    if (std::abs(rnnt_loss<double>(lat, y).item() - rnnt_loss<double>(lat, shuffled).item()) > 1e-9) ++changed;
  }
  CHECK(changed == 20);
}

TEST_CASE("mean reduction") {
  std::mt19937_64 rng(43);
  std::vector<L> lats{random_lattice(2, 1, 3, rng), random_lattice(3, 2, 3, rng)};
  std::vector<std::vector<Index>> ys{{1}, {0, 2}};
  const double mean = rnnt_loss_mean<double>(lats, ys).item();
  const double expected = (rnnt_loss<double>(lats[0], ys[0]).item() + rnnt_loss<double>(lats[1], ys[1]).item()) / 2;
  CHECK(mean == doctest::Approx(expected).epsilon(1e-14));
}
