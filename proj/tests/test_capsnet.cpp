#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "capsbeam/capsnet.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace capsbeam;

namespace {

// Direct definition: out[r][c][o] = b[o] + sum_{ky,kx,i} in[r+ky-ph][c+kx-pw][i] * w[ky][kx][i][o]
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, bool relu) {
  const long R = x.dim(0), C = x.dim(1), I = x.dim(2), KH = w.dim(0), KW = w.dim(1), O = w.dim(3);
  std::vector<double> out(R * C * O);
  for (long r = 0; r < R; ++r)
    for (long c = 0; c < C; ++c)
      for (long o = 0; o < O; ++o) {
        double acc = b.f32()[o];
        for (long ky = 0; ky < KH; ++ky)
          for (long kx = 0; kx < KW; ++kx)
            for (long i = 0; i < I; ++i) {
              const long rr = r + ky - KH / 2, cc = c + kx - KW / 2;
              const double xv = (rr < 0 || rr >= R || cc < 0 || cc >= C) ? 0.0 : x.f32()[(rr * C + cc) * I + i];
              acc += xv * w.f32()[((ky * KW + kx) * I + i) * O + o];
            }
        out[(r * C + c) * O + o] = relu ? std::max(acc, 0.0) : acc;
      }
  return out;
}

}  // namespace

TEST(Conv2d, MatchesDirectDefinition) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const std::size_t R = 1 + rng() % 7, C = 1 + rng() % 7, I = 1 + rng() % 5, O = 1 + rng() % 5;
    const std::size_t K = (rng() % 2) ? 3 : 1;
    const Tensor x = oracle::random_tensor({R, C, I}, rng), w = oracle::random_tensor({K, K, I, O}, rng), b = oracle::random_tensor({O}, rng);
    const bool relu = rng() % 2;
    const Tensor y = conv2d(x, w, b, relu);
    const auto want = conv_oracle(x, w, b, relu);
    for (std::size_t k = 0; k < want.size(); ++k) ASSERT_NEAR(y.f32()[k], want[k], 1e-5);
  }
}

TEST(Conv2d, ShapeErrors) {
  const Tensor x(Shape{4, 4, 3}), w(Shape{3, 3, 2, 5}), b(Shape{5});
  expect_errc([&] { conv2d(x, w, b, true); }, Errc::ShapeMismatch);
  const Tensor w2(Shape{2, 2, 3, 5});
  expect_errc([&] { conv2d(x, w2, b, true); }, Errc::ShapeMismatch);
}

TEST(Squash, KnownValuesAndBound) {
  std::vector<float> zero(4, 0.0f);
  squash_inplace(zero);
  for (float v : zero) EXPECT_EQ(v, 0.0f);
  const auto half = squash(std::vector<float>{0.6f, 0.8f});
  EXPECT_NEAR(std::hypot(half[0], half[1]), 0.5, 1e-7);
  EXPECT_NEAR(half[0] / half[1], 0.75, 1e-6);
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n(0, 10);
  for (int t = 0; t < 1000; ++t) {
    std::vector<float> s(8);
    for (auto& v : s) v = n(rng);
    const auto v = squash(s);
    double nn = 0;
    for (float x : v) nn += x * x;
    ASSERT_LT(std::sqrt(nn), 1.0);
  }
}

TEST(RoutingSoftmax, RowsSumToOne) {
  std::mt19937_64 rng(3);
  const Tensor b = oracle::random_tensor({5, 7}, rng, -20, 20);
  const Tensor c = routing_softmax(b);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) s += c.at({i, j});
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(DynamicRouting, MatchesTextbookTransliteration) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n_in = 1 + rng() % 8, n_out = 1 + rng() % 8, d = 1 + rng() % 8, iters = 1 + rng() % 4;
    const Tensor u = oracle::random_tensor({n_in, n_out, d}, rng, -2, 2);
    std::vector<double> ud(u.f32().begin(), u.f32().end());
    const auto want = oracle::routing(ud, n_in, n_out, d, iters);
    const Tensor v = dynamic_routing(u, iters);
    for (std::size_t k = 0; k < want.size(); ++k) ASSERT_NEAR(v.f32()[k], want[k], 1e-6);
  }
}

TEST(DynamicRouting, CouplingAndNormInvariants) {
  std::mt19937_64 rng(5);
  RoutingObserver obs;
  std::size_t n_out = 0;
  double worst = 0;
  obs.on_coupling = [&](std::size_t, std::span<const double> c) {
    for (std::size_t i = 0; i < c.size() / n_out; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n_out; ++j) s += c[i * n_out + j];
      worst = std::max(worst, std::abs(s - 1.0));
    }
  };
  for (int t = 0; t < 2000; ++t) {
    const std::size_t n_in = 1 + rng() % 8, d = 1 + rng() % 8;
    n_out = 1 + rng() % 8;
    const Tensor u = oracle::random_tensor({n_in, n_out, d}, rng, -5, 5);
    const Tensor v = dynamic_routing(u, 3, &obs);
    for (std::size_t j = 0; j < n_out; ++j) {
      double nn = 0;
      for (std::size_t k = 0; k < d; ++k) nn += v.at({j, k}) * v.at({j, k});
      ASSERT_LT(std::sqrt(nn), 1.0);
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(DynamicRouting, IdenticalPredictionsKeepUniformCoupling) {
  // With u_hat_{j|i} independent of j every output capsule sees the same sum.
  std::mt19937_64 rng(6);
  const std::size_t n_in = 4, n_out = 3, d = 5;
  Tensor u(Shape{n_in, n_out, d});
  const Tensor caps = oracle::random_tensor({n_in, d}, rng);
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t j = 0; j < n_out; ++j)
      for (std::size_t k = 0; k < d; ++k) u.at({i, j, k}) = caps.at({i, k});
  RoutingObserver obs;
  obs.on_coupling = [&](std::size_t, std::span<const double> c) {
    for (double x : c) EXPECT_NEAR(x, 1.0 / n_out, 1e-12);
  };
  const Tensor v = dynamic_routing(u, 3, &obs);
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t k = 0; k < d; ++k) mean[k] += caps.at({i, k}) / n_out;
  const auto want = oracle::squash(mean);
  for (std::size_t j = 0; j < n_out; ++j)
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(v.at({j, k}), want[k], 1e-6);
}

// ---------------------------------------------------------------- network

namespace {

// Whole-network reference with plain loops in double.
std::vector<double> network_oracle(const RfVolume& rf, const CapsConfig& cfg, const WeightBundle& wb) {
  const std::size_t R = rf.grid.num_rows, C = rf.grid.num_cols;
  Tensor x = rf.samples;
  auto to_tensor = [&](const std::vector<double>& v, std::size_t ch) {
    Tensor t(Shape{R, C, ch});
    for (std::size_t k = 0; k < v.size(); ++k) t.f32()[k] = static_cast<float>(v[k]);
    return t;
  };
  std::vector<double> cur;
  for (const auto& l : cfg.conv_layers) {
    cur = conv_oracle(x, wb.at(l.name + ".weight"), wb.at(l.name + ".bias"), l.relu);
    x = to_tensor(cur, l.out_ch);
  }
  for (const auto& l : cfg.caps_conv_layers) {
    cur = conv_oracle(x, wb.at(l.name + ".weight"), wb.at(l.name + ".bias"), false);
    for (std::size_t g = 0; g < R * C * l.num_capsules; ++g) {
      std::vector<double> s(cur.begin() + g * l.capsule_dim, cur.begin() + (g + 1) * l.capsule_dim);
      const auto v = oracle::squash(s);
      std::copy(v.begin(), v.end(), cur.begin() + g * l.capsule_dim);
    }
    x = to_tensor(cur, l.out_ch);
  }
  if (cfg.routing) {
    const auto& r = *cfg.routing;
    std::vector<double> routed(R * C * r.num_out_capsules * r.out_dim);
    for (std::size_t p = 0; p < R * C; ++p) {
      std::vector<double> u(r.num_in_capsules * r.num_out_capsules * r.out_dim);
      for (std::size_t i = 0; i < r.num_in_capsules; ++i)
        for (std::size_t j = 0; j < r.num_out_capsules; ++j)
          for (std::size_t k = 0; k < r.out_dim; ++k)
            u[(i * r.num_out_capsules + j) * r.out_dim + k] = x.f32()[(p * r.num_in_capsules + i) * r.in_dim + k];
      const auto v = oracle::routing(u, r.num_in_capsules, r.num_out_capsules, r.out_dim, r.num_iterations);
      std::copy(v.begin(), v.end(), routed.begin() + static_cast<long>(p * v.size()));
    }
    x = to_tensor(routed, r.num_out_capsules * r.out_dim);
  }
  for (const auto& l : cfg.fc_layers) {
    cur = conv_oracle(x, wb.at(l.name + ".weight"), wb.at(l.name + ".bias"), l.relu);
    x = to_tensor(cur, l.out_features);
  }
  return cur;
}

}  // namespace

TEST(Infer, ToyNetworkMatchesNestedLoopOracle) {
  const CapsConfig cfg = toy_caps_config(8);
  const WeightBundle wb = random_weights(cfg, 21);
  const RfVolume rf = oracle::random_rf(16, 16, 8, 22);
  const EnvelopeImage env = infer(rf, cfg, wb);
  const auto want = network_oracle(rf, cfg, wb);
  const Tensor got = env.packed();
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t k = 0; k < want.size(); ++k) ASSERT_NEAR(got.f32()[k], want[k], 1e-5) << k;
}

TEST(Infer, ZeroWeightsGiveZeroOutput) {
  const CapsConfig cfg = toy_caps_config(8);
  const Tensor out = infer(oracle::random_rf(8, 8, 8, 1), cfg, zero_weights(cfg)).packed();
  for (float v : out.f32()) EXPECT_EQ(v, 0.0f);
}

TEST(Infer, ShiftEquivariantAwayFromBorders) {
  const CapsConfig cfg = toy_caps_config(8);
  const WeightBundle wb = random_weights(cfg, 3);
  const RfVolume a = oracle::random_rf(16, 16, 8, 4);
  RfVolume b(a.grid, 8);
  const long dr = 2, dc = 1;
  for (long r = 0; r < 16; ++r)
    for (long c = 0; c < 16; ++c)
      for (long k = 0; k < 8; ++k) {
        const long sr = r - dr, sc = c - dc;
        b.samples.f32()[(r * 16 + c) * 8 + k] =
            (sr < 0 || sc < 0) ? 0.0f : a.samples.f32()[(sr * 16 + sc) * 8 + k];
      }
  const Tensor ya = infer(a, cfg, wb).packed(), yb = infer(b, cfg, wb).packed();
  const long m = static_cast<long>(cfg.receptive_field() / 2);
  for (long r = m + dr; r < 16 - m; ++r)
    for (long c = m + dc; c < 16 - m; ++c)
      for (long k = 0; k < 2; ++k)
        EXPECT_NEAR(yb.f32()[(r * 16 + c) * 2 + k], ya.f32()[((r - dr) * 16 + (c - dc)) * 2 + k], 1e-5);
}

TEST(Infer, Errors) {
  const CapsConfig cfg = toy_caps_config(8);
  const WeightBundle wb = random_weights(cfg, 1);
  expect_errc([&] { infer(oracle::random_rf(4, 4, 6, 1), cfg, wb); }, Errc::ShapeMismatch);
  WeightBundle missing = wb;
  missing.entries.erase("fc2.bias");
  expect_errc([&] { infer(oracle::random_rf(4, 4, 8, 1), cfg, missing); }, Errc::MissingWeight);
}

TEST(RandomWeights, DeterministicInSeed) {
  const CapsConfig cfg = toy_caps_config(8);
  const auto a = random_weights(cfg, 9), b = random_weights(cfg, 9), c = random_weights(cfg, 10);
  for (const auto& [name, t] : a.entries) {
    EXPECT_EQ(t, b.at(name));
  }
  EXPECT_FALSE(a.at("conv1.weight") == c.at("conv1.weight"));
  EXPECT_EQ(a.entries.size(), 2 * weighted_layers(cfg).size());
}

TEST(Infer, DefaultConfigRunsOnSmallGrid) {
  const CapsConfig cfg = default_caps_config();
  const WeightBundle wb = random_weights(cfg, 5);
  const EnvelopeImage env = infer(oracle::random_rf(6, 5, 128, 6), cfg, wb);
  EXPECT_EQ(env.rows(), 6u);
  EXPECT_EQ(env.cols(), 5u);
  const Tensor out = env.packed();
  for (float v : out.f32()) EXPECT_TRUE(std::isfinite(v));
}
