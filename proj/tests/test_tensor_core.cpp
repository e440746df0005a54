#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "dsmoe/matrix.hpp"
#include "dsmoe/rng.hpp"
#include "oracles.hpp"

using dsmoe::Matrix;

TEST_CASE("matmul 2x2 hand values") {
  Matrix<double> a(2, 2);
  a.data = {1, 2, 3, 4};
  Matrix<double> b(2, 2);
  b.data = {5, 6, 7, 8};
  Matrix<double> c = dsmoe::matmul(a, b);
  CHECK(c.data == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  Matrix<double> a(2, 3), b(2, 2);
  CHECK_THROWS_WITH_AS(dsmoe::matmul(a, b),
                       doctest::Contains("a is 2x3"), dsmoe::Error);
}

TEST_CASE("matmul bit-equal to ijk reference, both widths") {
  dsmoe::Xoshiro256pp rng(42);
  auto fill = [&rng](auto& m) {
    for (auto& v : m.data) v = static_cast<std::decay_t<decltype(v)>>(rng.next_gaussian());
  };
  Matrix<double> a(17, 31), b(31, 13);
  fill(a);
  fill(b);
  CHECK(dsmoe::bit_equal(dsmoe::matmul(a, b), oracle::matmul_ijk(a, b)));

  Matrix<float> af(9, 24), bf(24, 7);
  fill(af);
  fill(bf);
  CHECK(dsmoe::bit_equal(dsmoe::matmul(af, bf), oracle::matmul_ijk(af, bf)));
}

TEST_CASE("softmax hand values and properties") {
  std::vector<double> v{0.0, std::log(3.0)};
  std::vector<double> s = dsmoe::softmax(std::span<const double>(v));
  CHECK(s[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(s[1] == doctest::Approx(0.75).epsilon(1e-14));

  // shift invariance: softmax(x + c) == softmax(x) up to rounding
  std::vector<double> big{1000.0, 1000.0 + std::log(3.0)};
  std::vector<double> sb = dsmoe::softmax(std::span<const double>(big));
  CHECK(sb[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(sb[1] == doctest::Approx(0.75).epsilon(1e-12));

  dsmoe::Xoshiro256pp rng(7);
  std::vector<double> r(16);
  for (auto& x : r) x = rng.next_gaussian() * 3.0;
  std::vector<double> got = dsmoe::softmax(std::span<const double>(r));
  std::vector<double> want = oracle::softmax_row(r);
  double sum = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-13));
    CHECK(got[i] > 0.0);
    sum += got[i];
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-13));

  std::vector<double> empty;
  CHECK_THROWS_AS(dsmoe::softmax(std::span<const double>(empty)), dsmoe::Error);
}

TEST_CASE("swish fixed point values") {
  CHECK(dsmoe::swish(0.0) == 0.0);
  CHECK(dsmoe::swish(1.0) == doctest::Approx(0.7310585786300049).epsilon(1e-15));
  CHECK(dsmoe::swish(-1.0) == doctest::Approx(-0.2689414213699951).epsilon(1e-15));
  CHECK(dsmoe::swish(-1000.0) == 0.0);  // graceful underflow, not NaN
  CHECK(std::isfinite(dsmoe::swish(1000.0)));
}

TEST_CASE("swiglu matches scalar oracle") {
  dsmoe::Xoshiro256pp rng(99);
  const int d = 6, width = 10, tokens = 5;
  Matrix<double> x(tokens, d), w1(d, width), w3(d, width), w2(width, d);
  for (auto* m : {&x, &w1, &w3, &w2})
    for (auto& v : m->data) v = rng.next_gaussian();

  dsmoe::Expert<double> e{w1, w3, w2};
  for (int active : {-1, 5, 0}) {
    Matrix<double> got = dsmoe::swiglu_forward(x, w1, w3, w2, active);
    Matrix<double> want(tokens, d);
    for (int t = 0; t < tokens; ++t) {
      std::vector<double> yr = oracle::expert_forward(e, x.row(t).data(), d, active);
      for (int j = 0; j < d; ++j) want.at(t, j) = yr[static_cast<size_t>(j)];
    }
    CHECK(oracle::max_rel_vs(got, want) < 1e-14);
  }
}

TEST_CASE("swiglu is linear in w2") {
  dsmoe::Xoshiro256pp rng(3);
  const int d = 4, width = 8;
  Matrix<double> x(3, d), w1(d, width), w3(d, width), w2(width, d);
  for (auto* m : {&x, &w1, &w3, &w2})
    for (auto& v : m->data) v = rng.next_gaussian();
  Matrix<double> w2_scaled = w2;
  for (auto& v : w2_scaled.data) v *= 2.0;

  Matrix<double> y = dsmoe::swiglu_forward(x, w1, w3, w2);
  Matrix<double> y2 = dsmoe::swiglu_forward(x, w1, w3, w2_scaled);
  for (size_t i = 0; i < y.data.size(); ++i)
    CHECK(y2.data[i] == doctest::Approx(2.0 * y.data[i]).epsilon(1e-14));
}

TEST_CASE("swiglu rejects inconsistent shapes") {
  Matrix<double> x(2, 4), w1(4, 8), w3(4, 8), w2(8, 4);
  Matrix<double> bad_w3(4, 6);
  CHECK_THROWS_AS(dsmoe::swiglu_forward(x, w1, bad_w3, w2), dsmoe::Error);
  Matrix<double> bad_w2(6, 4);
  CHECK_THROWS_AS(dsmoe::swiglu_forward(x, w1, w3, bad_w2), dsmoe::Error);
  CHECK_THROWS_AS(dsmoe::swiglu_forward(x, w1, w3, w2, 9), dsmoe::Error);
}

TEST_CASE("rng streams are deterministic and uniform-ish") {
  dsmoe::Xoshiro256pp a(123), b(123), c(124);
  bool all_equal = true, any_diff = false;
  double mean = 0.0;
  const int n = 4096;
  for (int i = 0; i < n; ++i) {
    const double ua = a.next_unit();
    all_equal = all_equal && ua == b.next_unit();
    any_diff = any_diff || ua != c.next_unit();
    CHECK(ua >= 0.0);
    CHECK(ua < 1.0);
    mean += ua;
  }
  CHECK(all_equal);
  CHECK(any_diff);
  CHECK(std::fabs(mean / n - 0.5) < 0.025);

  // Irwin-Hall gaussian: zero mean, unit variance, bounded by construction
  dsmoe::Xoshiro256pp g(55);
  double m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = g.next_gaussian();
    CHECK(std::fabs(z) <= 6.0);
    m1 += z;
    m2 += z * z;
  }
  CHECK(std::fabs(m1 / n) < 0.08);
  CHECK(std::fabs(m2 / n - 1.0) < 0.1);
}
