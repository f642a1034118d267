#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "capsbeam/fixed_point.hpp"
#include "test_util.hpp"

using namespace capsbeam;

TEST(Quantize, Examples) {
  EXPECT_EQ(quantize(0.5, 15).raw, 16384);
  EXPECT_EQ(quantize(2.0, 15).raw, 32767);
  EXPECT_EQ(quantize(-2.0, 15).raw, -32768);
  EXPECT_EQ(quantize(-std::ldexp(0.5, -15), 15).raw, -1);
  EXPECT_EQ(quantize(std::ldexp(0.5, -15), 15).raw, 1);
  EXPECT_EQ(quantize(std::ldexp(1.5, -15), 15).raw, 2);
  EXPECT_EQ(quantize(1.0, 14).scale_exp, 14);
}

TEST(Quantize, MonotoneSweep) {
  std::int16_t prev = std::numeric_limits<std::int16_t>::min();
  for (double x = -3.0; x <= 3.0; x += 1e-4) {
    const auto q = quantize(x, 14).raw;
    ASSERT_GE(q, prev) << x;
    prev = q;
  }
}

TEST(Rounding, HalfAwayFromZero) {
  EXPECT_EQ(fx::round_shift(3, 1), 2);
  EXPECT_EQ(fx::round_shift(-3, 1), -2);
  EXPECT_EQ(fx::round_shift(5, 2), 1);
  EXPECT_EQ(fx::round_shift(6, 2), 2);
  EXPECT_EQ(fx::round_shift(-6, 2), -2);
  EXPECT_EQ(fx::round_shift(7, 0), 7);
  EXPECT_EQ(fx::round_shift(7, -2), 28);
  EXPECT_EQ(fx::round_div(5, 2), 3);
  EXPECT_EQ(fx::round_div(-5, 2), -3);
  EXPECT_EQ(fx::round_div(7, 3), 2);
  EXPECT_EQ(fx::round_div(-8, 3), -3);
}

TEST(Rounding, RoundDivMatchesDoubleReference) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100000; ++t) {
    const auto num = static_cast<std::int64_t>(rng() % 2000001) - 1000000;
    const auto den = static_cast<std::int64_t>(rng() % 999) + 1;
    ASSERT_EQ(fx::round_div(num, den), static_cast<std::int64_t>(std::round(static_cast<double>(num) / den)))
        << num << "/" << den;
  }
}

TEST(Saturation, NeverWraps) {
  EXPECT_EQ(fx::sat16(40000), 32767);
  EXPECT_EQ(fx::sat16(-40000), -32768);
  EXPECT_EQ(fx::sat32(std::int64_t{1} << 40), std::numeric_limits<std::int32_t>::max());
  EXPECT_EQ(fx::align32(std::int64_t{1} << 30, -4), std::numeric_limits<std::int32_t>::max());
  EXPECT_EQ(fx::align32(-(std::int64_t{1} << 30), -40), std::numeric_limits<std::int32_t>::min());
  EXPECT_EQ(fx::align32(0, -40), 0);
}

TEST(Isqrt, FloorSqrt) {
  for (std::uint64_t v = 0; v < 200000; ++v) {
    const auto r = fx::isqrt(v);
    ASSERT_LE(r * r, v);
    ASSERT_GT((r + 1) * (r + 1), v);
  }
  const std::uint64_t big = (std::uint64_t{1} << 40) - 1;
  EXPECT_EQ(fx::isqrt(big), (std::uint64_t{1} << 20) - 1);
}

TEST(Calibrate, ScaleFormula) {
  EXPECT_EQ(fx::calibrate_scale(1.0), 14);
  EXPECT_EQ(fx::calibrate_scale(0.0), 15);
  EXPECT_EQ(fx::calibrate_scale(3.9), 12);
  EXPECT_EQ(fx::calibrate_scale(4.0), 12);
  EXPECT_EQ(fx::calibrate_scale(4.1), 11);
  EXPECT_EQ(fx::calibrate_scale(1000.0), 4);
}

// ---------------------------------------------------------------- Taylor exp

namespace {
double taylor5(double x) { return 1 + x + x * x / 2 + x * x * x / 6 + x * x * x * x / 24; }
}  // namespace

TEST(ExpTaylor5, ExactRationalPoints) {
  for (int f : {10, 12, 13}) {
    const double tol = std::ldexp(1.0, -(f - 2));
    EXPECT_EQ(exp_taylor5(quantize(0.0, f)).raw, 1 << f);
    EXPECT_NEAR(exp_taylor5(quantize(1.0, f)).value(), 65.0 / 24.0, tol) << f;
    EXPECT_NEAR(exp_taylor5(quantize(-1.0, f)).value(), 0.375, tol) << f;
  }
  // the approximation itself is off e^-1 by about 1.9 %
  EXPECT_NEAR(0.375 / std::exp(-1.0), 1.019, 0.001);
}

TEST(ExpTaylor5, TracksFloatPolynomial) {
  const int f = 13;
  for (int raw = -12288; raw <= 16384; raw += 7) {
    const double x = std::ldexp(raw, -f);
    const double want = std::min(taylor5(x), std::ldexp(32767.0, -f));  // saturates near x = 1.4
    ASSERT_NEAR(exp_taylor5(FixedPoint16{static_cast<std::int16_t>(raw), f}).value(), want,
                std::ldexp(1.0, -(f - 2)))
        << x;
  }
}

TEST(ExpTaylor5, MonotoneOverCalibratedRange) {
  for (int f : {12, 13}) {
    const int lo = -(2 << f), hi = std::min(2 << f, 32767);
    std::int16_t prev = -1;
    for (int raw = lo; raw <= hi; ++raw) {
      const auto e = exp_taylor5(FixedPoint16{static_cast<std::int16_t>(raw), f}).raw;
      ASSERT_GE(e, prev) << "f=" << f << " raw=" << raw;
      ASSERT_GE(e, 0);
      prev = e;
    }
  }
}

// ---------------------------------------------------------------- softmax

namespace {
std::vector<FixedPoint16> row(std::initializer_list<double> xs, int f) {
  std::vector<FixedPoint16> r;
  for (double x : xs) r.push_back(quantize(x, f));
  return r;
}
}  // namespace

TEST(FixedSoftmax, EqualLogitsAreUniform) {
  const auto c = fixed_softmax(row({0.3, 0.3, 0.3, 0.3}, 12));
  for (const auto& v : c) {
    EXPECT_EQ(v.raw, 4096);
    EXPECT_EQ(v.value(), 0.25);
  }
}

TEST(FixedSoftmax, TwoLogitOracle) {
  const auto c = fixed_softmax(row({std::log(2.0), 0.0}, 12));
  // float oracle of the same Taylor softmax
  const double e0 = taylor5(0.0), e1 = taylor5(-std::log(2.0));
  EXPECT_NEAR(c[0].value(), e0 / (e0 + e1), 0.001);
  EXPECT_NEAR(c[1].value(), e1 / (e0 + e1), 0.001);
  EXPECT_NEAR(c[0].value(), 2.0 / 3.0, 0.01);
  EXPECT_NEAR(c[1].value(), 1.0 / 3.0, 0.01);
}

TEST(FixedSoftmax, SumAndShiftInvariance) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> len(1, 16), val(-6000, 6000), shift(-4000, 4000);
  const int f = 12;
  for (int t = 0; t < 5000; ++t) {
    const int n = len(rng);
    std::vector<std::int16_t> b(n), b2(n), c(n), c2(n);
    const int k = shift(rng);
    for (int i = 0; i < n; ++i) {
      b[i] = static_cast<std::int16_t>(val(rng));
      b2[i] = static_cast<std::int16_t>(b[i] + k);
    }
    fixed_softmax(b, f, c);
    fixed_softmax(b2, f, c2);
    ASSERT_EQ(c, c2);
    const double sum = std::accumulate(c.begin(), c.end(), 0.0) / (1 << fx::kCouplingScale);
    ASSERT_LE(std::abs(sum - 1.0), n * std::ldexp(1.0, -(fx::kCouplingScale - 1)));
  }
}

TEST(FixedSoftmax, EmptyRowRejected) {
  std::vector<FixedPoint16> none;
  expect_errc([&] { fixed_softmax(none); }, Errc::ShapeMismatch);
}

// ---------------------------------------------------------------- squash

TEST(FixedSquash, ZeroStaysZero) {
  const auto v = fixed_squash(row({0, 0, 0, 0}, 12), 15);
  for (const auto& x : v) EXPECT_EQ(x.raw, 0);
}

TEST(FixedSquash, UnitNormGivesHalf) {
  for (int f : {10, 12, 14}) {
    const auto v = fixed_squash(row({0.6, 0.8, 0.0}, f), f);
    double n2 = 0;
    for (const auto& x : v) n2 += x.value() * x.value();
    EXPECT_NEAR(std::sqrt(n2), 0.5, std::ldexp(1.0, -(f - 3))) << f;
  }
}

TEST(FixedSquash, MatchesFloatSquash) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> val(-32768, 32767);
  const int f_s = 12, f_v = 15;
  for (int t = 0; t < 2000; ++t) {
    std::vector<std::int16_t> s(8), v(8);
    double n2 = 0;
    for (auto& x : s) {
      x = static_cast<std::int16_t>(val(rng));
      n2 += std::ldexp(x, -f_s) * std::ldexp(x, -f_s);
    }
    fixed_squash(s, f_s, f_v, v);
    const double k = std::sqrt(n2) / (1 + n2);
    for (int i = 0; i < 8; ++i) ASSERT_NEAR(std::ldexp(v[i], -f_v), std::ldexp(s[i], -f_s) * k, 2e-4);
  }
}

TEST(FixedSquash, NormBelowOne) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> val(-32768, 32767), dim(1, 16), scale(0, 15);
  for (int t = 0; t < 10000; ++t) {
    const int d = dim(rng), f_s = scale(rng);
    std::vector<std::int16_t> s(d), v(d);
    for (auto& x : s) x = static_cast<std::int16_t>(val(rng));
    fixed_squash(s, f_s, 15, v);
    double n2 = 0;
    for (auto x : v) n2 += std::ldexp(x, -15) * std::ldexp(x, -15);
    ASSERT_LT(std::sqrt(n2), 1.0);
  }
}

TEST(FixedSquash, RejectsNegativeScale) {
  std::vector<std::int16_t> s{1, 2}, v(2);
  expect_errc([&] { fixed_squash(s, -1, 15, v); }, Errc::InvalidConfig);
}
