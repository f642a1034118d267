#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "capsbeam/capsnet.hpp"
#include "capsbeam/fixed_point.hpp"

namespace capsbeam {

/// Per-tensor power-of-two scales. Weight names are "<layer>.weight" and
/// "<layer>.bias"; activation names follow the inference taps ("input",
/// "<layer>.out", "<caps>.pre", "routing.s", "routing.b", "routing.out").
struct QuantPlan {
  std::map<std::string, int> scales;
  int accumulator_bits = 32;

  bool contains(const std::string& name) const { return scales.count(name) != 0; }
  int scale(const std::string& name) const {
    auto it = scales.find(name);
    if (it == scales.end()) throw Error(Errc::MissingScale, "no scale for '" + name + "'");
    return it->second;
  }
};

inline constexpr const char* kScaleSuffix = ".scale";

/// Stores each scale as a 1-element fixed16 tensor "<name>.scale".
inline void store_plan(WeightBundle& b, const QuantPlan& plan) {
  for (const auto& [name, f] : plan.scales)
    b.set(name + kScaleSuffix, Tensor::from_fixed({1}, {static_cast<std::int16_t>(f)}, 0));
}

inline QuantPlan load_plan(const WeightBundle& b) {
  QuantPlan plan;
  const std::string suffix = kScaleSuffix;
  for (const auto& [name, t] : b.entries) {
    if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) continue;
    if (t.dtype() != DType::Fixed16 || t.size() != 1)
      throw Error(Errc::ShapeMismatch, name + ": scale entries must be a single fixed16 value");
    plan.scales[name.substr(0, name.size() - suffix.size())] = t.i16()[0];
  }
  return plan;
}

inline Tensor quantize_tensor(const Tensor& t, int f) {
  Tensor q(t.dims(), DType::Fixed16, f);
  auto out = q.i16();
  if (t.dtype() == DType::Fixed16) {
    // rescale between power-of-two scales
    auto in = t.i16();
    for (std::size_t k = 0; k < in.size(); ++k) out[k] = fx::sat16(fx::round_shift(in[k], t.scale_exp() - f));
    return q;
  }
  auto in = t.f32();
  for (std::size_t k = 0; k < in.size(); ++k) out[k] = fx::quantize_raw(in[k], f);
  return q;
}

namespace detail {

inline bool is_squash_input(const std::string& name) {
  return name == "routing.s" || (name.size() > 4 && name.compare(name.size() - 4, 4, ".pre") == 0);
}

}  // namespace detail

/// Runs float inference over the samples and fits every weight and
/// activation with one guard bit. Squash inputs keep a non-negative scale.
inline QuantPlan calibrate(const WeightBundle& bundle, const std::vector<RfVolume>& samples, const CapsConfig& cfg) {
  if (samples.empty()) throw Error(Errc::EmptyCalibration, "calibration needs at least one input");
  std::map<std::string, double> peak;
  for (const auto& l : weighted_layers(cfg))
    for (const auto& name : {weight_name(l.name), bias_name(l.name)}) {
      double m = 0;
      for (float v : bundle.at(name).to_floats()) m = std::max(m, static_cast<double>(std::abs(v)));
      peak[name] = m;
    }
  for (const auto& rf : samples)
    infer(rf, cfg, bundle, [&](const std::string& name, std::span<const float> values) {
      double& m = peak[name];
      for (float v : values) m = std::max(m, static_cast<double>(std::abs(v)));
    });
  QuantPlan plan;
  for (const auto& [name, m] : peak) {
    int f = fx::calibrate_scale(m);
    if (detail::is_squash_input(name)) f = std::max(f, 0);
    plan.scales[name] = f;
  }
  return plan;
}

// ---------------------------------------------------------------- kernels

/// Fixed-point convolution. Each product x*w is rounded onto the accumulator
/// scale (f_out + 8 guard bits) and added with 32-bit saturation in ky, kx,
/// cin ascending order. Bias is aligned the same way and added before ReLU
/// unless relu_then_bias is set. The result is rounded to f_out.
inline Tensor qconv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, bool relu, int f_out,
                      bool relu_then_bias = false) {
  if (input.dtype() != DType::Fixed16 || weights.dtype() != DType::Fixed16 || bias.dtype() != DType::Fixed16)
    throw Error(Errc::UnknownDtype, "qconv2d operates on fixed16 tensors");
  if (input.rank() != 3 || weights.rank() != 4 || bias.rank() != 1)
    throw Error(Errc::ShapeMismatch, "qconv2d expects [r,c,cin], [kh,kw,cin,cout], [cout]");
  const std::size_t rows = input.dim(0), cols = input.dim(1), cin = input.dim(2);
  const std::size_t kh = weights.dim(0), kw = weights.dim(1), cout = weights.dim(3);
  if (weights.dim(2) != cin) throw Error(Errc::ShapeMismatch, "qconv2d input channel mismatch");
  if (bias.dim(0) != cout) throw Error(Errc::ShapeMismatch, "qconv2d bias length mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw Error(Errc::ShapeMismatch, "qconv2d kernel extents must be odd");
  const int f_acc = f_out + fx::kAccGuardBits;
  const int prod_shift = input.scale_exp() + weights.scale_exp() - f_acc;
  const int bias_shift = bias.scale_exp() - f_acc;
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  Tensor out(Shape{rows, cols, cout}, DType::Fixed16, f_out);
  auto x = input.i16();
  auto w = weights.i16();
  auto b = bias.i16();
  auto y = out.i16();
  parallel_for(rows, [&](std::size_t r) {
    std::vector<std::int32_t> acc(cout);
    for (std::size_t c = 0; c < cols; ++c) {
      std::fill(acc.begin(), acc.end(), 0);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long rr = static_cast<long>(r) + static_cast<long>(ky) - ph;
        if (rr < 0 || rr >= static_cast<long>(rows)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long cc = static_cast<long>(c) + static_cast<long>(kx) - pw;
          if (cc < 0 || cc >= static_cast<long>(cols)) continue;
          const std::int16_t* xp = &x[(static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc)) * cin];
          const std::int16_t* wp = &w[(ky * kw + kx) * cin * cout];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const std::int64_t xv = xp[ci];
            if (xv == 0) continue;
            const std::int16_t* wr = wp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co)
              if (wr[co] != 0) acc[co] = fx::sat32(std::int64_t{acc[co]} + fx::align32(xv * wr[co], prod_shift));
          }
        }
      }
      std::int16_t* yp = &y[(r * cols + c) * cout];
      for (std::size_t co = 0; co < cout; ++co) {
        std::int64_t a = acc[co];
        const std::int64_t bv = fx::align32(b[co], bias_shift);
        if (relu_then_bias) {
          if (relu) a = std::max<std::int64_t>(a, 0);
          a = fx::sat32(a + bv);
        } else {
          a = fx::sat32(a + bv);
          if (relu) a = std::max<std::int64_t>(a, 0);
        }
        yp[co] = fx::sat16(fx::round_shift(a, fx::kAccGuardBits));
      }
    }
  });
  return out;
}

/// Applies fixed_squash to every capsule of every pixel of [r, c, n*d].
inline Tensor qsquash_capsules(const Tensor& pre, std::size_t num_capsules, std::size_t dim, int f_out) {
  if (pre.dtype() != DType::Fixed16 || pre.rank() != 3 || pre.dim(2) != num_capsules * dim)
    throw Error(Errc::ShapeMismatch, "capsule squash expects fixed16 [r, c, n*d]");
  Tensor out(pre.dims(), DType::Fixed16, f_out);
  auto in = pre.i16();
  auto o = out.i16();
  const std::size_t groups = pre.dim(0) * pre.dim(1) * num_capsules;
  for (std::size_t g = 0; g < groups; ++g)
    fixed_squash(in.subspan(g * dim, dim), pre.scale_exp(), f_out, o.subspan(g * dim, dim));
  return out;
}

/// Scales used inside one routing call.
struct RoutingScales {
  int u = 14;  // prediction vectors
  int b = 14;  // logits
  int s = 14;  // pre-squash sums
  int v = 15;  // outputs
};

struct QRoutingObserver {
  std::function<void(std::size_t iteration, std::span<const std::int16_t> coupling)> on_coupling;
};

/// Fixed-point routing by agreement on u_hat [n_in, n_out, d] (raw, scale
/// sc.u). Couplings at kCouplingScale. Sums and dot products use rounded
/// 32-bit accumulation in ascending index order. Writes v [n_out, d].
inline void qroute(std::span<const std::int16_t> u_hat, std::size_t n_in, std::size_t n_out, std::size_t d,
                   std::size_t iterations, const RoutingScales& sc, std::span<std::int16_t> v_out,
                   const QRoutingObserver* obs = nullptr) {
  if (u_hat.size() != n_in * n_out * d || v_out.size() != n_out * d)
    throw Error(Errc::ShapeMismatch, "routing block size mismatch");
  if (iterations == 0) throw Error(Errc::InvalidConfig, "routing needs at least one iteration");
  std::vector<std::int16_t> b(n_in * n_out, 0), c(n_in * n_out), s(n_out * d);
  const int s_shift = fx::kCouplingScale + sc.u - (sc.s + fx::kAccGuardBits);
  const int b_shift = sc.u + sc.v - (sc.b + fx::kAccGuardBits);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n_in; ++i)
      fixed_softmax(std::span<const std::int16_t>(&b[i * n_out], n_out), sc.b,
                    std::span<std::int16_t>(&c[i * n_out], n_out));
    if (obs && obs->on_coupling) obs->on_coupling(it, c);
    for (std::size_t j = 0; j < n_out; ++j)
      for (std::size_t k = 0; k < d; ++k) {
        std::int32_t acc = 0;
        for (std::size_t i = 0; i < n_in; ++i)
          acc = fx::sat32(std::int64_t{acc} +
                          fx::align32(std::int64_t{c[i * n_out + j]} * u_hat[(i * n_out + j) * d + k], s_shift));
        s[j * d + k] = fx::sat16(fx::round_shift(acc, fx::kAccGuardBits));
      }
    for (std::size_t j = 0; j < n_out; ++j)
      fixed_squash(std::span<const std::int16_t>(&s[j * d], d), sc.s, sc.v, v_out.subspan(j * d, d));
    if (it + 1 == iterations) break;
    for (std::size_t i = 0; i < n_in; ++i)
      for (std::size_t j = 0; j < n_out; ++j) {
        std::int32_t acc = 0;
        for (std::size_t k = 0; k < d; ++k)
          acc = fx::sat32(std::int64_t{acc} +
                          fx::align32(std::int64_t{u_hat[(i * n_out + j) * d + k]} * v_out[j * d + k], b_shift));
        b[i * n_out + j] = fx::sat16(b[i * n_out + j] + fx::round_shift(acc, fx::kAccGuardBits));
      }
  }
}

/// Per-pixel weight-free routing of [r, c, n_in*d] capsules (u_hat_{j|i} = u_i).
inline Tensor qrouting_layer(const Tensor& caps, const RoutingConfig& r, const RoutingScales& sc) {
  if (caps.dtype() != DType::Fixed16 || caps.rank() != 3 || caps.dim(2) != r.num_in_capsules * r.in_dim)
    throw Error(Errc::ShapeMismatch, "routing input must be fixed16 [r, c, n_in*d]");
  if (r.in_dim != r.out_dim) throw Error(Errc::InvalidConfig, "weight-free routing requires in_dim == out_dim");
  if (caps.scale_exp() != sc.u) throw Error(Errc::ShapeMismatch, "routing input scale mismatch");
  const std::size_t rows = caps.dim(0), cols = caps.dim(1), d = r.out_dim;
  const std::size_t in_w = r.num_in_capsules * d, out_w = r.num_out_capsules * d;
  Tensor out(Shape{rows, cols, out_w}, DType::Fixed16, sc.v);
  auto x = caps.i16();
  auto y = out.i16();
  parallel_for(rows, [&](std::size_t row) {
    std::vector<std::int16_t> u_hat(r.num_in_capsules * r.num_out_capsules * d);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t p = row * cols + c;
      for (std::size_t i = 0; i < r.num_in_capsules; ++i)
        for (std::size_t j = 0; j < r.num_out_capsules; ++j)
          std::copy(&x[p * in_w + i * d], &x[p * in_w + (i + 1) * d], &u_hat[(i * r.num_out_capsules + j) * d]);
      qroute(u_hat, r.num_in_capsules, r.num_out_capsules, d, r.num_iterations, sc, y.subspan(p * out_w, out_w));
    }
  });
  return out;
}

// ---------------------------------------------------------------- network

/// Receives each fixed16 activation ("input", "<layer>.out", "<caps>.pre", "routing.out").
using FixedTap = std::function<void(const std::string& name, const Tensor& value)>;

struct QuantOptions {
  bool relu_then_bias = false;  // ReLU before the bias add instead of after
};

inline RoutingScales routing_scales(const QuantPlan& plan, const CapsConfig& cfg) {
  RoutingScales sc;
  sc.u = plan.scale(cfg.caps_conv_layers.back().name + ".out");
  sc.b = plan.scale("routing.b");
  sc.s = plan.scale("routing.s");
  sc.v = plan.scale("routing.out");
  return sc;
}

/// Same dataflow as infer() with every tensor in fixed16. Float weights in
/// the bundle are quantized with the plan's scales on the fly.
inline EnvelopeImage infer_quantized(const RfVolume& rf, const CapsConfig& cfg, const WeightBundle& bundle,
                                     const QuantPlan& plan, const FixedTap& tap = {}, const QuantOptions& opt = {}) {
  rf.validate();
  cfg.validate_for_inference();
  if (rf.num_channels != cfg.input_channels())
    throw Error(Errc::ShapeMismatch, "rf has " + std::to_string(rf.num_channels) + " channels, network expects " +
                                         std::to_string(cfg.input_channels()));
  for (const auto& l : weighted_layers(cfg)) detail::check_layer_weights(bundle, l);
  auto qw = [&](const std::string& layer) {
    return std::pair{quantize_tensor(bundle.at(weight_name(layer)), plan.scale(weight_name(layer))),
                     quantize_tensor(bundle.at(bias_name(layer)), plan.scale(bias_name(layer)))};
  };
  Tensor x = quantize_tensor(rf.samples, plan.scale("input"));
  if (tap) tap("input", x);
  for (const auto& l : cfg.conv_layers) {
    auto [w, b] = qw(l.name);
    x = qconv2d(x, w, b, l.relu, plan.scale(l.name + ".out"), opt.relu_then_bias);
    if (tap) tap(l.name + ".out", x);
  }
  for (const auto& l : cfg.caps_conv_layers) {
    auto [w, b] = qw(l.name);
    Tensor pre = qconv2d(x, w, b, false, plan.scale(l.name + ".pre"), opt.relu_then_bias);
    if (tap) tap(l.name + ".pre", pre);
    x = qsquash_capsules(pre, l.num_capsules, l.capsule_dim, plan.scale(l.name + ".out"));
    if (tap) tap(l.name + ".out", x);
  }
  if (cfg.routing) {
    x = qrouting_layer(x, *cfg.routing, routing_scales(plan, cfg));
    if (tap) tap("routing.out", x);
  }
  for (const auto& l : cfg.fc_layers) {
    auto [w, b] = qw(l.name);
    x = qconv2d(x, w, b, l.relu, plan.scale(l.name + ".out"), opt.relu_then_bias);
    if (tap) tap(l.name + ".out", x);
  }
  return EnvelopeImage::unpack(rf.grid, x);
}

}  // namespace capsbeam
