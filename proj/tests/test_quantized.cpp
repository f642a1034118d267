#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "capsbeam/quantized.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace capsbeam;

namespace {

std::int64_t half_away(std::int64_t v, int shift) {
  if (shift <= 0) return v << -shift;
  const double q = std::round(static_cast<double>(v) / std::ldexp(1.0, shift));
  return static_cast<std::int64_t>(q);
}

std::int64_t clamp32(std::int64_t v) { return std::clamp<std::int64_t>(v, INT32_MIN, INT32_MAX); }

// Straight transcription of the documented conv rules.
std::vector<std::int16_t> qconv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, bool relu, int f_out,
                                       bool relu_then_bias) {
  const long R = x.dim(0), C = x.dim(1), I = x.dim(2), KH = w.dim(0), KW = w.dim(1), O = w.dim(3);
  const int f_acc = f_out + 8;
  std::vector<std::int16_t> out(R * C * O);
  for (long r = 0; r < R; ++r)
    for (long c = 0; c < C; ++c)
      for (long o = 0; o < O; ++o) {
        std::int64_t acc = 0;
        for (long ky = 0; ky < KH; ++ky)
          for (long kx = 0; kx < KW; ++kx)
            for (long i = 0; i < I; ++i) {
              const long rr = r + ky - KH / 2, cc = c + kx - KW / 2;
              if (rr < 0 || rr >= R || cc < 0 || cc >= C) continue;
              const std::int64_t p = std::int64_t{x.i16()[(rr * C + cc) * I + i]} * w.i16()[((ky * KW + kx) * I + i) * O + o];
              acc = clamp32(acc + clamp32(half_away(p, x.scale_exp() + w.scale_exp() - f_acc)));
            }
        const std::int64_t bias = clamp32(half_away(b.i16()[o], b.scale_exp() - f_acc));
        if (relu_then_bias) {
          if (relu) acc = std::max<std::int64_t>(acc, 0);
          acc = clamp32(acc + bias);
        } else {
          acc = clamp32(acc + bias);
          if (relu) acc = std::max<std::int64_t>(acc, 0);
        }
        out[(r * C + c) * O + o] = static_cast<std::int16_t>(std::clamp<std::int64_t>(half_away(acc, 8), -32768, 32767));
      }
  return out;
}

}  // namespace

TEST(QConv2d, MatchesRuleTranscription) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 40; ++t) {
    const std::size_t R = 1 + rng() % 6, C = 1 + rng() % 6, I = 1 + rng() % 5, O = 1 + rng() % 5;
    const std::size_t K = (rng() % 2) ? 3 : 1;
    const Tensor x = oracle::random_fixed({R, C, I}, 12 + rng() % 3, rng);
    const Tensor w = oracle::random_fixed({K, K, I, O}, 13 + rng() % 3, rng);
    const Tensor b = oracle::random_fixed({O}, 12 + rng() % 4, rng);
    const bool relu = rng() % 2, order = rng() % 2;
    const int f_out = 8 + rng() % 6;
    const Tensor y = qconv2d(x, w, b, relu, f_out, order);
    const auto want = qconv_oracle(x, w, b, relu, f_out, order);
    ASSERT_EQ(y.scale_exp(), f_out);
    for (std::size_t k = 0; k < want.size(); ++k) ASSERT_EQ(y.i16()[k], want[k]) << "trial " << t << " k " << k;
  }
}

TEST(QConv2d, CloseToFloatConv) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-0.5, 0.5);
  Tensor x(Shape{5, 6, 4}), w(Shape{3, 3, 4, 3}), b(Shape{3});
  for (auto* t : {&x, &w, &b})
    for (auto& v : t->f32()) v = u(rng);
  const Tensor yf = conv2d(x, w, b, true);
  const Tensor yq = qconv2d(quantize_tensor(x, 14), quantize_tensor(w, 14), quantize_tensor(b, 14), true, 12);
  const auto back = yq.to_floats();
  for (std::size_t k = 0; k < back.size(); ++k) ASSERT_NEAR(back[k], yf.f32()[k], 1e-3);
}

TEST(QConv2d, SaturatesInsteadOfWrapping) {
  const Tensor x = Tensor::from_fixed({1, 1, 4}, {32767, 32767, 32767, 32767}, 0);
  const Tensor w = Tensor::from_fixed({1, 1, 4, 1}, {32767, 32767, 32767, 32767}, 0);
  const Tensor b = Tensor::from_fixed({1}, {0}, 0);
  EXPECT_EQ(qconv2d(x, w, b, false, 0).i16()[0], 32767);
  const Tensor wn = Tensor::from_fixed({1, 1, 4, 1}, {-32768, -32768, -32768, -32768}, 0);
  EXPECT_EQ(qconv2d(x, wn, b, false, 0).i16()[0], -32768);
}

TEST(QRoute, TracksFloatRouting) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-0.4f, 0.4f);
  const RoutingScales sc{14, 13, 13, 15};
  for (int t = 0; t < 200; ++t) {
    const std::size_t n_in = 1 + rng() % 8, n_out = 1 + rng() % 8, d = 1 + rng() % 8;
    Tensor uf(Shape{n_in, n_out, d});
    for (auto& v : uf.f32()) v = u(rng);
    const Tensor uq = quantize_tensor(uf, sc.u);
    const Tensor vf = dynamic_routing(Tensor::from_floats(uf.dims(), uq.to_floats()), 3);
    std::vector<std::int16_t> vq(n_out * d);
    qroute(uq.i16(), n_in, n_out, d, 3, sc, vq);
    for (std::size_t k = 0; k < vq.size(); ++k) ASSERT_NEAR(std::ldexp(vq[k], -sc.v), vf.f32()[k], 5e-3);
  }
}

TEST(QRoute, CouplingRowsSumToOne) {
  std::mt19937_64 rng(4);
  const RoutingScales sc{14, 12, 13, 15};
  std::size_t n_out = 0;
  QRoutingObserver obs;
  obs.on_coupling = [&](std::size_t, std::span<const std::int16_t> c) {
    for (std::size_t i = 0; i < c.size() / n_out; ++i) {
      long s = 0;
      for (std::size_t j = 0; j < n_out; ++j) s += c[i * n_out + j];
      ASSERT_LE(std::abs(s - 16384), static_cast<long>(n_out));
    }
  };
  for (int t = 0; t < 500; ++t) {
    const std::size_t n_in = 1 + rng() % 8, d = 1 + rng() % 8;
    n_out = 1 + rng() % 8;
    const Tensor uq = oracle::random_fixed({n_in, n_out, d}, sc.u, rng, -8000, 8000);
    std::vector<std::int16_t> vq(n_out * d);
    qroute(uq.i16(), n_in, n_out, d, 3, sc, vq, &obs);
  }
}

TEST(QuantPlan, StoreLoadRoundTrip) {
  QuantPlan p;
  p.scales = {{"input", 12}, {"conv1.weight", 15}, {"routing.b", -2}};
  WeightBundle b;
  store_plan(b, p);
  EXPECT_TRUE(b.contains("conv1.weight.scale"));
  EXPECT_EQ(load_plan(b).scales, p.scales);
  expect_errc([&] { (void)p.scale("fc1.weight"); }, Errc::MissingScale);
}

TEST(Calibration, EmptyInputRejected) {
  const CapsConfig cfg = toy_caps_config(8);
  expect_errc([&] { calibrate(random_weights(cfg, 1), {}, cfg); }, Errc::EmptyCalibration);
}

TEST(Calibration, CoversObservedRange) {
  const CapsConfig cfg = toy_caps_config(8);
  const WeightBundle wb = random_weights(cfg, 2);
  const RfVolume rf = oracle::random_rf(8, 8, 8, 3);
  const QuantPlan plan = calibrate(wb, {rf}, cfg);
  EXPECT_EQ(plan.scale("input"), 14);  // |x| < 1
  for (const auto& l : weighted_layers(cfg)) {
    EXPECT_TRUE(plan.contains(l.name + ".weight"));
    EXPECT_TRUE(plan.contains(l.name + ".out"));
  }
  for (const char* n : {"routing.s", "routing.b", "routing.out", "caps1.pre", "caps2.pre"})
    EXPECT_TRUE(plan.contains(n)) << n;
  // no activation saturates on the calibration input
  infer_quantized(rf, cfg, wb, plan, [&](const std::string& name, const Tensor& t) {
    for (auto v : t.i16()) ASSERT_TRUE(v > -32768 && v < 32767) << name;
  });
}

TEST(InferQuantized, ZeroWeightsGiveZeros) {
  const CapsConfig cfg = toy_caps_config(8);
  const WeightBundle wb = zero_weights(cfg);
  const RfVolume rf = oracle::random_rf(8, 8, 8, 4);
  const QuantPlan plan = calibrate(wb, {rf}, cfg);
  const Tensor q = infer_quantized(rf, cfg, wb, plan).packed();
  const Tensor f = infer(rf, cfg, wb).packed();
  EXPECT_EQ(q, f);
  for (float v : q.f32()) EXPECT_EQ(v, 0.0f);
}

TEST(InferQuantized, ToyFidelityAndDeterminism) {
  const CapsConfig cfg = toy_caps_config(8);
  const WeightBundle wb = random_weights(cfg, 5);
  const RfVolume rf = oracle::random_rf(16, 16, 8, 6);
  const QuantPlan plan = calibrate(wb, {rf, oracle::random_rf(16, 16, 8, 7)}, cfg);
  const Tensor q = infer_quantized(rf, cfg, wb, plan).packed();
  const Tensor f = infer(rf, cfg, wb).packed();
  double worst = 0;
  for (std::size_t k = 0; k < q.size(); ++k) worst = std::max(worst, std::abs(double{q.f32()[k]} - f.f32()[k]));
  EXPECT_LE(worst, std::ldexp(1.0, -7));
  EXPECT_EQ(infer_quantized(rf, cfg, wb, plan).packed(), q);
}

TEST(InferQuantized, MissingScale) {
  const CapsConfig cfg = toy_caps_config(8);
  const WeightBundle wb = random_weights(cfg, 5);
  const RfVolume rf = oracle::random_rf(4, 4, 8, 6);
  QuantPlan plan = calibrate(wb, {rf}, cfg);
  plan.scales.erase("fc3.out");
  expect_errc([&] { infer_quantized(rf, cfg, wb, plan); }, Errc::MissingScale);
}
