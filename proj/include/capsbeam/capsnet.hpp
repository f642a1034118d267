#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "capsbeam/config.hpp"
#include "capsbeam/io.hpp"
#include "capsbeam/parallel.hpp"

namespace capsbeam {

// ---------------------------------------------------------------- convolution

/// Stride-1 cross-correlation with zero padding (k-1)/2. Layouts:
/// input [rows, cols, cin], weights [kh, kw, cin, cout], bias [cout].
/// Bias is added before the optional ReLU.
inline Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, bool relu) {
  if (input.rank() != 3 || weights.rank() != 4 || bias.rank() != 1)
    throw Error(Errc::ShapeMismatch, "conv2d expects [r,c,cin], [kh,kw,cin,cout], [cout]");
  const std::size_t rows = input.dim(0), cols = input.dim(1), cin = input.dim(2);
  const std::size_t kh = weights.dim(0), kw = weights.dim(1), cout = weights.dim(3);
  if (weights.dim(2) != cin)
    throw Error(Errc::ShapeMismatch, "conv2d weights expect " + std::to_string(weights.dim(2)) + " input channels, got " +
                                         std::to_string(cin));
  if (bias.dim(0) != cout) throw Error(Errc::ShapeMismatch, "conv2d bias length mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw Error(Errc::ShapeMismatch, "conv2d kernel extents must be odd");
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  Tensor out(Shape{rows, cols, cout});
  auto x = input.f32();
  auto w = weights.f32();
  auto b = bias.f32();
  auto y = out.f32();
  parallel_for(rows, [&](std::size_t r) {
    std::vector<float> acc(cout);
    for (std::size_t c = 0; c < cols; ++c) {
      std::copy(b.begin(), b.end(), acc.begin());
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long rr = static_cast<long>(r) + static_cast<long>(ky) - ph;
        if (rr < 0 || rr >= static_cast<long>(rows)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long cc = static_cast<long>(c) + static_cast<long>(kx) - pw;
          if (cc < 0 || cc >= static_cast<long>(cols)) continue;
          const float* xp = &x[(static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc)) * cin];
          const float* wp = &w[(ky * kw + kx) * cin * cout];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const float xv = xp[ci];
            if (xv == 0.0f) continue;
            const float* wr = wp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) acc[co] += xv * wr[co];
          }
        }
      }
      float* yp = &y[(r * cols + c) * cout];
      for (std::size_t co = 0; co < cout; ++co) yp[co] = relu ? std::max(acc[co], 0.0f) : acc[co];
    }
  });
  return out;
}

// ---------------------------------------------------------------- capsule math

/// v = |s|^2 / (1 + |s|^2) * s / |s|, with v = 0 at s = 0. In place.
inline void squash_inplace(std::span<float> s) {
  double n2 = 0;
  for (float v : s) n2 += static_cast<double>(v) * v;
  if (n2 == 0) return;
  const double k = std::sqrt(n2) / (1.0 + n2);
  for (float& v : s) v = static_cast<float>(v * k);
}

inline std::vector<float> squash(std::span<const float> s) {
  std::vector<float> v(s.begin(), s.end());
  squash_inplace(v);
  return v;
}

/// Row-wise softmax over the output-capsule axis, max-subtracted.
inline Tensor routing_softmax(const Tensor& b) {
  if (b.rank() != 2) throw Error(Errc::ShapeMismatch, "routing logits must be [n_in, n_out]");
  const std::size_t n_in = b.dim(0), n_out = b.dim(1);
  Tensor c(b.dims());
  auto bi = b.f32();
  auto co = c.f32();
  for (std::size_t i = 0; i < n_in; ++i) {
    double m = bi[i * n_out];
    for (std::size_t j = 1; j < n_out; ++j) m = std::max<double>(m, bi[i * n_out + j]);
    double z = 0;
    std::vector<double> e(n_out);
    for (std::size_t j = 0; j < n_out; ++j) z += e[j] = std::exp(bi[i * n_out + j] - m);
    for (std::size_t j = 0; j < n_out; ++j) co[i * n_out + j] = static_cast<float>(e[j] / z);
  }
  return c;
}

/// Per-iteration view of routing, for invariant checks and calibration.
struct RoutingObserver {
  std::function<void(std::size_t iteration, std::span<const double> coupling)> on_coupling;
  std::function<void(std::span<const double> s)> on_pre_squash;
  std::function<void(std::span<const double> logits)> on_logits;
};

namespace detail {

// u_hat [n_in, n_out, d] flat; v_out [n_out, d].
inline void route(const float* u_hat, std::size_t n_in, std::size_t n_out, std::size_t d, std::size_t iterations,
                  float* v_out, const RoutingObserver* obs = nullptr) {
  std::vector<double> b(n_in * n_out, 0.0), c(n_in * n_out), s(n_out * d), v(n_out * d);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n_in; ++i) {
      const double* bi = &b[i * n_out];
      double m = bi[0];
      for (std::size_t j = 1; j < n_out; ++j) m = std::max(m, bi[j]);
      double z = 0;
      for (std::size_t j = 0; j < n_out; ++j) z += c[i * n_out + j] = std::exp(bi[j] - m);
      for (std::size_t j = 0; j < n_out; ++j) c[i * n_out + j] /= z;
    }
    if (obs && obs->on_coupling) obs->on_coupling(it, c);
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t i = 0; i < n_in; ++i)
      for (std::size_t j = 0; j < n_out; ++j) {
        const double cij = c[i * n_out + j];
        const float* u = &u_hat[(i * n_out + j) * d];
        for (std::size_t k = 0; k < d; ++k) s[j * d + k] += cij * u[k];
      }
    if (obs && obs->on_pre_squash) obs->on_pre_squash(s);
    for (std::size_t j = 0; j < n_out; ++j) {
      double n2 = 0;
      for (std::size_t k = 0; k < d; ++k) n2 += s[j * d + k] * s[j * d + k];
      const double scale = n2 == 0 ? 0.0 : std::sqrt(n2) / (1.0 + n2);
      for (std::size_t k = 0; k < d; ++k) v[j * d + k] = s[j * d + k] * scale;
    }
    if (it + 1 == iterations) break;  // a final logit update cannot change v
    for (std::size_t i = 0; i < n_in; ++i)
      for (std::size_t j = 0; j < n_out; ++j) {
        const float* u = &u_hat[(i * n_out + j) * d];
        double dot = 0;
        for (std::size_t k = 0; k < d; ++k) dot += u[k] * v[j * d + k];
        b[i * n_out + j] += dot;
      }
    if (obs && obs->on_logits) obs->on_logits(b);
  }
  for (std::size_t k = 0; k < n_out * d; ++k) v_out[k] = static_cast<float>(v[k]);
}

}  // namespace detail

/// Routing-by-agreement over prediction vectors u_hat [n_in, n_out, d].
/// Logits start at zero; returns v [n_out, d].
inline Tensor dynamic_routing(const Tensor& u_hat, std::size_t num_iterations, const RoutingObserver* obs = nullptr) {
  if (u_hat.rank() != 3) throw Error(Errc::ShapeMismatch, "u_hat must be [n_in, n_out, d]");
  if (num_iterations == 0) throw Error(Errc::InvalidConfig, "routing needs at least one iteration");
  Tensor v(Shape{u_hat.dim(1), u_hat.dim(2)});
  detail::route(u_hat.f32().data(), u_hat.dim(0), u_hat.dim(1), u_hat.dim(2), num_iterations, v.f32().data(), obs);
  return v;
}

/// Convolution without ReLU, then squash on each capsule of every pixel.
inline Tensor caps_conv_layer(const Tensor& input, const CapsConvLayerConfig& layer, const Tensor& weights,
                              const Tensor& bias) {
  if (layer.num_capsules * layer.capsule_dim != layer.out_ch)
    throw Error(Errc::ShapeMismatch, layer.name + ": out_ch must equal num_capsules * capsule_dim");
  if (weights.rank() != 4 || weights.dim(3) != layer.out_ch)
    throw Error(Errc::ShapeMismatch, layer.name + ": weight output channels do not match the capsule layout");
  Tensor out = conv2d(input, weights, bias, false);
  auto y = out.f32();
  const std::size_t pixels = out.dim(0) * out.dim(1);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t k = 0; k < layer.num_capsules; ++k)
      squash_inplace(y.subspan(p * layer.out_ch + k * layer.capsule_dim, layer.capsule_dim));
  return out;
}

// ---------------------------------------------------------------- weights

/// He-style normal weights and small uniform biases, deterministic in seed.
inline WeightBundle random_weights(const CapsConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  WeightBundle b;
  std::mt19937_64 rng(seed);
  for (const auto& l : weighted_layers(cfg)) {
    const double fan_in = static_cast<double>(l.kernel_h * l.kernel_w * l.in_ch);
    std::normal_distribution<double> wd(0.0, std::sqrt(2.0 / fan_in));
    std::uniform_real_distribution<double> bd(-0.05, 0.05);
    Tensor w(Shape{l.kernel_h, l.kernel_w, l.in_ch, l.out_ch});
    for (auto& v : w.f32()) v = static_cast<float>(wd(rng));
    Tensor bias(Shape{l.out_ch});
    for (auto& v : bias.f32()) v = static_cast<float>(bd(rng));
    b.set(weight_name(l.name), std::move(w));
    b.set(bias_name(l.name), std::move(bias));
  }
  b.metadata["architecture"] = "capsbeam";
  b.metadata["init_seed"] = std::to_string(seed);
  return b;
}

inline WeightBundle zero_weights(const CapsConfig& cfg) {
  WeightBundle b;
  for (const auto& l : weighted_layers(cfg)) {
    b.set(weight_name(l.name), Tensor(Shape{l.kernel_h, l.kernel_w, l.in_ch, l.out_ch}));
    b.set(bias_name(l.name), Tensor(Shape{l.out_ch}));
  }
  return b;
}

namespace detail {

inline void check_layer_weights(const WeightBundle& b, const WeightedLayer& l) {
  const Tensor& w = b.at(weight_name(l.name));
  const Tensor& bias = b.at(bias_name(l.name));
  const Shape want{l.kernel_h, l.kernel_w, l.in_ch, l.out_ch};
  if (w.dims() != want)
    throw Error(Errc::ShapeMismatch, l.name + ": weight dims " + shape_string(w.dims()) + " expected " +
                                         shape_string(want) +
                                         (b.contains(l.name + ".index") ? " (compacted bundle: expand it first)" : ""));
  if (bias.dims() != Shape{l.out_ch}) throw Error(Errc::ShapeMismatch, l.name + ": bias length mismatch");
}

}  // namespace detail

/// Hook receiving every named activation during inference ("input",
/// "<layer>.out", "<caps>.pre", "routing.s", "routing.b").
using ActivationTap = std::function<void(const std::string& name, std::span<const float> values)>;

/// Float reference beamformer: conv stack, capsule layers, per-pixel routing
/// of the last capsule layer (u_hat_{j|i} = capsule i for every j), then the
/// pointwise head producing (I, Q).
inline EnvelopeImage infer(const RfVolume& rf, const CapsConfig& cfg, const WeightBundle& weights,
                           const ActivationTap& tap = {}) {
  rf.validate();
  cfg.validate_for_inference();
  if (rf.num_channels != cfg.input_channels())
    throw Error(Errc::ShapeMismatch, "rf has " + std::to_string(rf.num_channels) + " channels, network expects " +
                                         std::to_string(cfg.input_channels()));
  for (const auto& l : weighted_layers(cfg)) detail::check_layer_weights(weights, l);
  const std::size_t rows = rf.grid.num_rows, cols = rf.grid.num_cols, pixels = rows * cols;

  Tensor x = rf.samples;
  if (tap) tap("input", x.f32());
  for (const auto& l : cfg.conv_layers) {
    x = conv2d(x, weights.at(weight_name(l.name)), weights.at(bias_name(l.name)), l.relu);
    if (tap) tap(l.name + ".out", x.f32());
  }
  for (const auto& l : cfg.caps_conv_layers) {
    Tensor pre = conv2d(x, weights.at(weight_name(l.name)), weights.at(bias_name(l.name)), false);
    if (tap) tap(l.name + ".pre", pre.f32());
    auto y = pre.f32();
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t k = 0; k < l.num_capsules; ++k)
        squash_inplace(y.subspan(p * l.out_ch + k * l.capsule_dim, l.capsule_dim));
    x = std::move(pre);
    if (tap) tap(l.name + ".out", x.f32());
  }
  if (cfg.routing) {
    const auto& r = *cfg.routing;
    const std::size_t in_w = r.num_in_capsules * r.in_dim, out_w = r.num_out_capsules * r.out_dim;
    Tensor routed(Shape{rows, cols, out_w});
    auto xin = x.f32();
    auto xout = routed.f32();
    std::vector<float> s_max(rows, 0.0f), b_max(rows, 0.0f);
    parallel_for(rows, [&](std::size_t row) {
      std::vector<float> u_hat(r.num_in_capsules * r.num_out_capsules * r.out_dim);
      RoutingObserver obs;
      if (tap) {
        obs.on_pre_squash = [&](std::span<const double> s) {
          for (double v : s) s_max[row] = std::max(s_max[row], static_cast<float>(std::abs(v)));
        };
        obs.on_logits = [&](std::span<const double> b) {
          for (double v : b) b_max[row] = std::max(b_max[row], static_cast<float>(std::abs(v)));
        };
      }
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t p = row * cols + c;
        const float* caps = &xin[p * in_w];
        for (std::size_t i = 0; i < r.num_in_capsules; ++i)
          for (std::size_t j = 0; j < r.num_out_capsules; ++j)
            std::copy(caps + i * r.in_dim, caps + (i + 1) * r.in_dim, &u_hat[(i * r.num_out_capsules + j) * r.out_dim]);
        detail::route(u_hat.data(), r.num_in_capsules, r.num_out_capsules, r.out_dim, r.num_iterations,
                      &xout[p * out_w], tap ? &obs : nullptr);
      }
    });
    if (tap) {
      tap("routing.s", s_max);
      tap("routing.b", b_max);
    }
    x = std::move(routed);
    if (tap) tap("routing.out", x.f32());
  }
  for (const auto& l : cfg.fc_layers) {
    x = conv2d(x, weights.at(weight_name(l.name)), weights.at(bias_name(l.name)), l.relu);
    if (tap) tap(l.name + ".out", x.f32());
  }
  return EnvelopeImage::unpack(rf.grid, x);
}

}  // namespace capsbeam
