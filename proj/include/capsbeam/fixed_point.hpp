#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "capsbeam/error.hpp"

namespace capsbeam {

/// raw * 2^-scale_exp, 16-bit signed, saturating.
struct FixedPoint16 {
  std::int16_t raw = 0;
  int scale_exp = 0;

  double value() const { return std::ldexp(static_cast<double>(raw), -scale_exp); }
  friend bool operator==(const FixedPoint16&, const FixedPoint16&) = default;
};

namespace fx {

inline constexpr std::int64_t kRawMin = -32768;
inline constexpr std::int64_t kRawMax = 32767;
inline constexpr int kMaxScale = 15;
/// Fraction bits of routing coupling coefficients (1.0 = 16384).
inline constexpr int kCouplingScale = 14;
/// Extra fraction bits carried by 32-bit accumulators over the output scale.
inline constexpr int kAccGuardBits = 8;

inline std::int16_t sat16(std::int64_t v) { return static_cast<std::int16_t>(std::clamp(v, kRawMin, kRawMax)); }

inline std::int32_t sat32(std::int64_t v) {
  return static_cast<std::int32_t>(
      std::clamp<std::int64_t>(v, std::numeric_limits<std::int32_t>::min(), std::numeric_limits<std::int32_t>::max()));
}

/// num / den rounded half away from zero; den > 0.
inline std::int64_t round_div(std::int64_t num, std::int64_t den) {
  const std::int64_t q = num / den, r = num % den;
  if (2 * (r < 0 ? -r : r) >= den) return num < 0 ? q - 1 : q + 1;
  return q;
}

/// v * 2^-shift rounded half away from zero (shift <= 0 multiplies, saturating to int64 range is the caller's job).
inline std::int64_t round_shift(std::int64_t v, int shift) {
  if (shift <= 0) return v * (std::int64_t{1} << -shift);
  const std::int64_t half = std::int64_t{1} << (shift - 1);
  const std::int64_t mag = v < 0 ? -v : v;
  const std::int64_t q = (mag + half) >> shift;
  return v < 0 ? -q : q;
}

/// Round-shift a product (|v| <= 2^32) into 32 bits, saturating.
inline std::int32_t align32(std::int64_t v, int shift) {
  if (shift >= 0 || v == 0) return sat32(round_shift(v, shift));
  if (-shift >= 30) return v < 0 ? std::numeric_limits<std::int32_t>::min() : std::numeric_limits<std::int32_t>::max();
  return sat32(v * (std::int64_t{1} << -shift));
}

inline std::int16_t quantize_raw(double x, int f) {
  const double scaled = std::ldexp(x, f);
  if (std::isnan(scaled)) return 0;
  if (scaled >= static_cast<double>(kRawMax)) return static_cast<std::int16_t>(kRawMax);
  if (scaled <= static_cast<double>(kRawMin)) return static_cast<std::int16_t>(kRawMin);
  return sat16(static_cast<std::int64_t>(std::round(scaled)));  // std::round is half away from zero
}

inline double dequantize(std::int64_t raw, int f) { return std::ldexp(static_cast<double>(raw), -f); }

/// Scale exponent leaving one guard bit above the observed magnitude m.
inline int calibrate_scale(double max_abs) {
  const double m = std::max(max_abs, std::ldexp(1.0, -14));
  return std::min(kMaxScale, 14 - static_cast<int>(std::ceil(std::log2(m))));
}

/// floor(sqrt(v)).
inline std::uint64_t isqrt(std::uint64_t v) {
  if (v < 2) return v;
  auto r = static_cast<std::uint64_t>(std::sqrt(static_cast<double>(v)));
  while (r * r > v) --r;
  while ((r + 1) * (r + 1) <= v) ++r;
  return r;
}

/// Lowest argument fed to the Taylor polynomial: the 5-term sum stops
/// increasing near -1.596, so inputs below -1.5 are clamped to keep the
/// approximation monotone.
inline constexpr double kTaylorFloor = -1.5;

/// 1 + x + x^2/2 + x^3/6 + x^4/24 at scale f, Horner form
/// (((x/4 + 1) x/3 + 1) x/2 + 1) x + 1 with the 1/4, 1/3, 1/2 factors
/// folded into one final divide by 24 * 2^3f. Intermediates are exact
/// 128-bit integers, so the only rounding is the last one and the result is
/// monotone wherever the polynomial is. Clamped at 0.
inline std::int64_t exp_taylor5_wide(std::int64_t x, int f) {
  using i128 = __int128;
  const std::int64_t floor_raw = -((std::int64_t{3} << f) / 2);
  x = std::max(x, floor_raw);
  const i128 one = i128{1} << f;
  i128 t = x + 4 * one;
  t = t * x + 12 * one * one;
  t = t * x + 24 * one * one * one;
  t = t * x + 24 * one * one * one * one;
  const i128 den = 24 * one * one * one;
  const i128 mag = t < 0 ? -t : t;
  i128 q = (2 * mag + den) / (2 * den);
  if (t < 0) q = -q;
  return std::max<std::int64_t>(static_cast<std::int64_t>(q), 0);
}

}  // namespace fx

inline FixedPoint16 quantize(double x, int f) { return {fx::quantize_raw(x, f), f}; }

/// Saturating 16-bit view of the Taylor exponential at the input's scale.
inline FixedPoint16 exp_taylor5(FixedPoint16 x) {
  return {fx::sat16(fx::exp_taylor5_wide(x.raw, x.scale_exp)), x.scale_exp};
}

/// Taylor softmax over one logit row at scale f. Shifted logits b - max(b)
/// are clamped to [-2, 0]. Coefficients come out at kCouplingScale; if every
/// exponential is 0 the row falls back to uniform.
inline void fixed_softmax(std::span<const std::int16_t> b, int f, std::span<std::int16_t> out) {
  if (b.empty()) throw Error(Errc::ShapeMismatch, "softmax row is empty");
  if (out.size() != b.size()) throw Error(Errc::ShapeMismatch, "softmax output length mismatch");
  const std::int64_t m = *std::max_element(b.begin(), b.end());
  const std::int64_t lo = -(std::int64_t{2} << f);
  std::vector<std::int64_t> e(b.size());
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    e[i] = fx::exp_taylor5_wide(std::max<std::int64_t>(b[i] - m, lo), f);
    sum += e[i];
  }
  const std::int64_t unit = std::int64_t{1} << fx::kCouplingScale;
  for (std::size_t i = 0; i < b.size(); ++i)
    out[i] = fx::sat16(sum == 0 ? fx::round_div(unit, static_cast<std::int64_t>(b.size()))
                                : fx::round_div(e[i] * unit, sum));
}

inline std::vector<FixedPoint16> fixed_softmax(std::span<const FixedPoint16> b) {
  if (b.empty()) throw Error(Errc::ShapeMismatch, "softmax row is empty");
  std::vector<std::int16_t> raw(b.size()), c(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i].scale_exp != b[0].scale_exp) throw Error(Errc::ShapeMismatch, "softmax row mixes scales");
    raw[i] = b[i].raw;
  }
  fixed_softmax(raw, b[0].scale_exp, c);
  std::vector<FixedPoint16> out(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) out[i] = {c[i], fx::kCouplingScale};
  return out;
}

/// Squash of one capsule: s at scale f_s, v at scale f_v.
///   sum2 = sum s^2 (scale 2 f_s), norm = isqrt(sum2) (scale f_s),
///   v = s * norm / (2^f_s + sum2 / 2^f_s), truncated toward zero so the
/// output norm can never round up to 1.
inline void fixed_squash(std::span<const std::int16_t> s, int f_s, int f_v, std::span<std::int16_t> v) {
  if (v.size() != s.size()) throw Error(Errc::ShapeMismatch, "squash output length mismatch");
  if (f_s < 0 || f_s > fx::kMaxScale || f_v < 0 || f_v > fx::kMaxScale)
    throw Error(Errc::InvalidConfig, "squash scales must lie in [0, 15]");
  std::int64_t sum2 = 0;
  for (std::int16_t x : s) sum2 += static_cast<std::int64_t>(x) * x;
  if (sum2 == 0) {
    std::fill(v.begin(), v.end(), std::int16_t{0});
    return;
  }
  const auto norm = static_cast<std::int64_t>(fx::isqrt(static_cast<std::uint64_t>(sum2)));
  const std::int64_t n2 = fx::round_shift(sum2, f_s);
  const std::int64_t den = (std::int64_t{1} << f_s) * ((std::int64_t{1} << f_s) + n2);
  for (std::size_t k = 0; k < s.size(); ++k) {
    // s * norm < 2^31 and f_v <= 15, so the numerator stays inside int64.
    const std::int64_t num = static_cast<std::int64_t>(s[k]) * norm;
    v[k] = fx::sat16(num * (std::int64_t{1} << f_v) / den);
  }
}

inline std::vector<FixedPoint16> fixed_squash(std::span<const FixedPoint16> s, int f_v) {
  if (s.empty()) return {};
  std::vector<std::int16_t> raw(s.size()), v(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].scale_exp != s[0].scale_exp) throw Error(Errc::ShapeMismatch, "squash input mixes scales");
    raw[i] = s[i].raw;
  }
  fixed_squash(raw, s[0].scale_exp, f_v, v);
  std::vector<FixedPoint16> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = {v[i], f_v};
  return out;
}

}  // namespace capsbeam
