#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "capsbeam/config.hpp"
#include "capsbeam/io.hpp"

namespace capsbeam {

/// One prunable convolution: weights [kh, kw, cin, cout].
struct NetLayer {
  std::string name;
  Tensor weights;

  std::size_t kh() const { return weights.dim(0); }
  std::size_t kw() const { return weights.dim(1); }
  std::size_t cin() const { return weights.dim(2); }
  std::size_t cout() const { return weights.dim(3); }
};

/// Sequential chain of convolutions; layer i's cout feeds layer i+1's cin.
struct ConvNetDescription {
  std::vector<NetLayer> layers;

  void validate() const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Tensor& w = layers[i].weights;
      if (w.rank() != 4 || w.dtype() != DType::Float32)
        throw Error(Errc::ShapeMismatch, layers[i].name + ": weights must be float [kh, kw, cin, cout]");
      if (i > 0 && layers[i - 1].cout() != layers[i].cin())
        throw Error(Errc::ShapeMismatch, layers[i].name + ": input channels do not match the previous layer");
    }
  }
};

/// The convolution and capsule-convolution layers of a network, in order.
inline ConvNetDescription describe_conv_stack(const WeightBundle& b, const CapsConfig& cfg) {
  ConvNetDescription net;
  for (const auto& l : weighted_layers(cfg)) {
    if (l.is_fc) continue;
    net.layers.push_back({l.name, b.at(weight_name(l.name))});
  }
  net.validate();
  return net;
}

/// Sum of |w| over the kh x kw slice (cin, cout).
inline double kernel_l1(const Tensor& w, std::size_t cin, std::size_t cout) {
  if (w.rank() != 4) throw Error(Errc::ShapeMismatch, "kernel_l1 expects [kh, kw, cin, cout]");
  if (cin >= w.dim(2) || cout >= w.dim(3))
    throw Error(Errc::IndexOutOfRange, "kernel (" + std::to_string(cin) + ", " + std::to_string(cout) +
                                           ") outside " + shape_string(w.dims()));
  const std::size_t ci = w.dim(2), co = w.dim(3);
  auto v = w.f32();
  double s = 0;
  for (std::size_t k = 0; k < w.dim(0) * w.dim(1); ++k) s += std::abs(static_cast<double>(v[(k * ci + cin) * co + cout]));
  return s;
}

namespace detail {

/// L1 sums per kernel [cin][cout] plus filter, channel and layer totals.
struct LayerNorms {
  std::size_t cin = 0, cout = 0;
  std::vector<double> kernel;   // cin * cout
  std::vector<double> filter;   // per cout: sum over cin
  std::vector<double> channel;  // per cin: sum over cout
  double total = 0;
};

inline LayerNorms layer_norms(const Tensor& w) {
  LayerNorms n;
  n.cin = w.dim(2);
  n.cout = w.dim(3);
  n.kernel.assign(n.cin * n.cout, 0.0);
  n.filter.assign(n.cout, 0.0);
  n.channel.assign(n.cin, 0.0);
  auto v = w.f32();
  for (std::size_t k = 0; k < w.dim(0) * w.dim(1); ++k)
    for (std::size_t i = 0; i < n.cin; ++i)
      for (std::size_t o = 0; o < n.cout; ++o) n.kernel[i * n.cout + o] += std::abs(static_cast<double>(v[(k * n.cin + i) * n.cout + o]));
  for (std::size_t i = 0; i < n.cin; ++i)
    for (std::size_t o = 0; o < n.cout; ++o) {
      const double x = n.kernel[i * n.cout + o];
      n.filter[o] += x;
      n.channel[i] += x;
    }
  // summed per filter so the total does not depend on traversal order
  for (double f : n.filter) n.total += f;
  return n;
}

inline void check_kernel_index(const ConvNetDescription& net, std::size_t layer, std::size_t q, std::size_t p) {
  if (layer >= net.layers.size()) throw Error(Errc::IndexOutOfRange, "layer index out of range");
  const auto& l = net.layers[layer];
  if (q >= l.cin() || p >= l.cout())
    throw Error(Errc::IndexOutOfRange, l.name + ": kernel (" + std::to_string(q) + ", " + std::to_string(p) + ") out of range");
}

// Scores of every kernel of one layer, [cin][cout], multiplied left to
// right: far upstream layers, filter q upstream, |k|, channel p downstream,
// far downstream layers. The distance-1 sets reach every channel of their
// neighbour, so from distance 2 on the connected set is the whole layer.
inline std::vector<double> layer_scores(const std::vector<LayerNorms>& norms, std::size_t i, std::size_t r) {
  const auto& n = norms[i];
  double far_up = 1.0, far_down = 1.0;
  for (std::size_t t = r; t >= 2; --t)
    if (i >= t) far_up *= norms[i - t].total;
  for (std::size_t t = 2; t <= r; ++t)
    if (i + t < norms.size()) far_down *= norms[i + t].total;
  std::vector<double> s(n.kernel.size());
  for (std::size_t q = 0; q < n.cin; ++q)
    for (std::size_t p = 0; p < n.cout; ++p) {
      double v = far_up;
      if (i >= 1) v *= norms[i - 1].filter[q];
      v *= n.kernel[q * n.cout + p];
      if (i + 1 < norms.size()) v *= norms[i + 1].channel[p];
      s[q * n.cout + p] = v * far_down;
    }
  return s;
}

}  // namespace detail

/// Multi-layer look-ahead score of kernel (cin q, cout p) in layer i with
/// neighbour depth r: the kernel's L1 norm times the L1 mass of the
/// connected kernels in each existing layer up to r steps away.
inline double lakp_ml_score(const ConvNetDescription& net, std::size_t layer, std::size_t q, std::size_t p,
                            std::size_t r) {
  if (r < 1) throw Error(Errc::InvalidConfig, "neighbour depth r must be at least 1");
  detail::check_kernel_index(net, layer, q, p);
  const std::size_t lo = layer >= r ? layer - r : 0, hi = std::min(net.layers.size() - 1, layer + r);
  std::vector<detail::LayerNorms> norms;
  for (std::size_t k = lo; k <= hi; ++k) norms.push_back(detail::layer_norms(net.layers[k].weights));
  const auto s = detail::layer_scores(norms, layer - lo, r);
  return s[q * net.layers[layer].cout() + p];
}

/// Single-step look-ahead score: upstream filter q mass * |k| * downstream channel p mass.
inline double lakp_score(const ConvNetDescription& net, std::size_t layer, std::size_t q, std::size_t p) {
  detail::check_kernel_index(net, layer, q, p);
  double up = 1.0, down = 1.0;
  if (layer > 0) {
    const Tensor& w = net.layers[layer - 1].weights;
    up = 0;
    for (std::size_t a = 0; a < w.dim(2); ++a) up += kernel_l1(w, a, q);
  }
  if (layer + 1 < net.layers.size()) {
    const Tensor& w = net.layers[layer + 1].weights;
    down = 0;
    for (std::size_t b = 0; b < w.dim(3); ++b) down += kernel_l1(w, p, b);
  }
  return up * kernel_l1(net.layers[layer].weights, q, p) * down;
}

// ---------------------------------------------------------------- masks

enum class PruneMethod { Magnitude, Lakp, LakpMl };

inline PruneMethod parse_prune_method(const std::string& s) {
  if (s == "magnitude") return PruneMethod::Magnitude;
  if (s == "lakp") return PruneMethod::Lakp;
  if (s == "lakp_ml") return PruneMethod::LakpMl;
  throw Error(Errc::InvalidConfig, "unknown prune method '" + s + "' (magnitude|lakp|lakp_ml)");
}

struct LayerMask {
  std::string name;
  std::size_t cin = 0, cout = 0;
  std::vector<std::uint8_t> keep;          // [cin * cout], 1 = kernel kept
  std::vector<std::uint8_t> filter_kept;   // [cout]

  bool kept(std::size_t q, std::size_t p) const { return keep[q * cout + p] != 0; }
  std::vector<std::size_t> kept_inputs(std::size_t p) const {
    std::vector<std::size_t> out;
    for (std::size_t q = 0; q < cin; ++q)
      if (kept(q, p)) out.push_back(q);
    return out;
  }
  std::vector<std::size_t> kept_filters() const {
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p < cout; ++p)
      if (filter_kept[p]) out.push_back(p);
    return out;
  }
  std::size_t kept_kernels() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1)); }
};

struct PruneMask {
  std::vector<LayerMask> layers;

  const LayerMask* find(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return &l;
    return nullptr;
  }
};

inline PruneMask identity_mask(const ConvNetDescription& net) {
  PruneMask m;
  for (const auto& l : net.layers)
    m.layers.push_back({l.name, l.cin(), l.cout(), std::vector<std::uint8_t>(l.cin() * l.cout(), 1),
                        std::vector<std::uint8_t>(l.cout(), 1)});
  return m;
}

/// Removes filters with no kept kernel and output channels nobody reads
/// (except in the last layer, whose outputs leave the pruned stack), and
/// prunes kernels reading removed channels, until nothing changes.
inline void cleanup_mask(PruneMask& m) {
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      auto& l = m.layers[i];
      if (i > 0) {
        const auto& prev = m.layers[i - 1];
        for (std::size_t q = 0; q < l.cin; ++q)
          if (!prev.filter_kept[q])
            for (std::size_t p = 0; p < l.cout; ++p)
              if (l.keep[q * l.cout + p]) {
                l.keep[q * l.cout + p] = 0;
                changed = true;
              }
      }
      for (std::size_t p = 0; p < l.cout; ++p) {
        if (!l.filter_kept[p]) continue;
        bool any = false;
        for (std::size_t q = 0; q < l.cin && !any; ++q) any = l.keep[q * l.cout + p];
        bool used = true;
        if (i + 1 < m.layers.size()) {
          const auto& next = m.layers[i + 1];
          used = false;
          for (std::size_t b = 0; b < next.cout && !used; ++b) used = next.keep[p * next.cout + b];
        }
        if (!any || !used) {
          l.filter_kept[p] = 0;
          for (std::size_t q = 0; q < l.cin; ++q) l.keep[q * l.cout + p] = 0;
          changed = true;
        }
      }
    }
  }
}

/// Per layer and per filter, prunes the floor(ratio * cin) lowest-scoring
/// kernels (ties: lower cin first), then runs cleanup_mask.
inline PruneMask plan_prune(const ConvNetDescription& net, double ratio, PruneMethod method, std::size_t r = 1) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw Error(Errc::RatioOutOfRange, "prune ratio must lie in [0, 1)");
  if (method == PruneMethod::LakpMl && r < 1) throw Error(Errc::InvalidConfig, "neighbour depth r must be at least 1");
  net.validate();
  std::vector<detail::LayerNorms> norms;
  for (const auto& l : net.layers) norms.push_back(detail::layer_norms(l.weights));
  PruneMask m = identity_mask(net);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    std::vector<double> scores;
    switch (method) {
      case PruneMethod::Magnitude: scores = norms[i].kernel; break;
      case PruneMethod::Lakp: scores = detail::layer_scores(norms, i, 1); break;
      case PruneMethod::LakpMl: scores = detail::layer_scores(norms, i, r); break;
    }
    auto& lm = m.layers[i];
    const auto quota = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(lm.cin)));
    std::vector<std::size_t> order(lm.cin);
    for (std::size_t p = 0; p < lm.cout; ++p) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a * lm.cout + p] < scores[b * lm.cout + p];
      });
      for (std::size_t k = 0; k < quota; ++k) lm.keep[order[k] * lm.cout + p] = 0;
    }
  }
  cleanup_mask(m);
  return m;
}

// ---------------------------------------------------------------- report

struct PruneLayerStats {
  std::string name;
  std::size_t kernels_total = 0, kernels_kept = 0;
  std::size_t filters_total = 0, filters_removed = 0;
  std::uint64_t params_before = 0, params_after = 0;
  std::uint64_t flops_before = 0, flops_after = 0;
};

struct PruneReport {
  double ratio_requested = 0;
  double ratio_achieved = 0;  // pruned kernels / all kernels
  std::uint64_t params_before = 0, params_after = 0;
  std::uint64_t flops_before = 0, flops_after = 0;
  std::vector<PruneLayerStats> layers;

  double kept_param_fraction() const {
    return params_before ? static_cast<double>(params_after) / static_cast<double>(params_before) : 1.0;
  }
};

/// Params count weights plus biases of kept filters; flops are 2 per MAC over the grid.
inline PruneReport make_prune_report(const ConvNetDescription& net, const PruneMask& m, double ratio,
                                     const PixelGrid& grid = {}) {
  if (m.layers.size() != net.layers.size()) throw Error(Errc::MaskMismatch, "mask and network layer counts differ");
  const std::uint64_t pixels = grid.num_rows * grid.num_cols;
  PruneReport rep;
  rep.ratio_requested = ratio;
  std::size_t kernels = 0, kept = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    const auto& lm = m.layers[i];
    if (lm.cin != l.cin() || lm.cout != l.cout()) throw Error(Errc::MaskMismatch, l.name + ": mask dims do not match");
    PruneLayerStats s;
    s.name = l.name;
    s.kernels_total = l.cin() * l.cout();
    s.kernels_kept = lm.kept_kernels();
    s.filters_total = l.cout();
    s.filters_removed = l.cout() - lm.kept_filters().size();
    const std::uint64_t area = l.kh() * l.kw();
    s.params_before = area * s.kernels_total + s.filters_total;
    s.params_after = area * s.kernels_kept + (s.filters_total - s.filters_removed);
    s.flops_before = 2 * area * s.kernels_total * pixels;
    s.flops_after = 2 * area * s.kernels_kept * pixels;
    kernels += s.kernels_total;
    kept += s.kernels_kept;
    rep.params_before += s.params_before;
    rep.params_after += s.params_after;
    rep.flops_before += s.flops_before;
    rep.flops_after += s.flops_after;
    rep.layers.push_back(s);
  }
  rep.ratio_achieved = kernels ? 1.0 - static_cast<double>(kept) / static_cast<double>(kernels) : 0.0;
  return rep;
}

inline void write_prune_report_csv(const PruneReport& rep, std::ostream& out) {
  out << "scope,ratio_requested,ratio_achieved,kernels_total,kernels_kept,filters_total,filters_removed,"
         "params_before,params_after,flops_before,flops_after\n";
  std::size_t kt = 0, kk = 0, ft = 0, fr = 0;
  for (const auto& s : rep.layers) {
    const double achieved = s.kernels_total ? 1.0 - static_cast<double>(s.kernels_kept) / s.kernels_total : 0.0;
    out << s.name << ',' << rep.ratio_requested << ',' << achieved << ',' << s.kernels_total << ',' << s.kernels_kept
        << ',' << s.filters_total << ',' << s.filters_removed << ',' << s.params_before << ',' << s.params_after << ','
        << s.flops_before << ',' << s.flops_after << '\n';
    kt += s.kernels_total;
    kk += s.kernels_kept;
    ft += s.filters_total;
    fr += s.filters_removed;
  }
  out << "total," << rep.ratio_requested << ',' << rep.ratio_achieved << ',' << kt << ',' << kk << ',' << ft << ','
      << fr << ',' << rep.params_before << ',' << rep.params_after << ',' << rep.flops_before << ',' << rep.flops_after
      << '\n';
}

// ---------------------------------------------------------------- bundles

/// Dense bundle with pruned kernels and removed filters' biases set to zero.
inline WeightBundle zero_pruned(const WeightBundle& b, const PruneMask& m) {
  WeightBundle out = b;
  for (const auto& lm : m.layers) {
    Tensor& w = out.entries.at(weight_name(lm.name));
    if (w.rank() != 4 || w.dim(2) != lm.cin || w.dim(3) != lm.cout)
      throw Error(Errc::MaskMismatch, lm.name + ": mask dims do not match weights " + shape_string(w.dims()));
    auto v = w.f32();
    for (std::size_t k = 0; k < w.dim(0) * w.dim(1); ++k)
      for (std::size_t q = 0; q < lm.cin; ++q)
        for (std::size_t p = 0; p < lm.cout; ++p)
          if (!lm.kept(q, p)) v[(k * lm.cin + q) * lm.cout + p] = 0.0f;
    auto bias = out.entries.at(bias_name(lm.name)).f32();
    for (std::size_t p = 0; p < lm.cout; ++p)
      if (!lm.filter_kept[p]) bias[p] = 0.0f;
  }
  return out;
}

/// Compacted layout per pruned layer:
///   <l>.weight  [kh, kw, K, F]  K = most kept inputs in any kept filter, zero padded
///   <l>.index   [K, F] fixed16  original input channel per slot, -1 for padding
///   <l>.filters [F]    fixed16  original filter index
///   <l>.bias    [F]
///   <l>.mask    [cin, cout]     1 for kept kernels
/// Other entries are copied unchanged.
inline WeightBundle apply_mask(const WeightBundle& b, const PruneMask& m) {
  WeightBundle out = b;
  for (const auto& lm : m.layers) {
    const Tensor& w = b.at(weight_name(lm.name));
    const Tensor& bias = b.at(bias_name(lm.name));
    if (w.rank() != 4 || w.dim(2) != lm.cin || w.dim(3) != lm.cout || bias.size() != lm.cout)
      throw Error(Errc::MaskMismatch, lm.name + ": mask dims do not match weights " + shape_string(w.dims()));
    const auto filters = lm.kept_filters();
    std::size_t k_max = 0;
    for (std::size_t p : filters) k_max = std::max(k_max, lm.kept_inputs(p).size());
    // A fully pruned layer still needs non-empty tensors.
    const std::size_t K = std::max<std::size_t>(k_max, 1), F = std::max<std::size_t>(filters.size(), 1);
    const std::size_t kh = w.dim(0), kw = w.dim(1);
    Tensor cw(Shape{kh, kw, K, F});
    Tensor idx(Shape{K, F}, DType::Fixed16, 0);
    Tensor fl(Shape{F}, DType::Fixed16, 0);
    Tensor cb(Shape{F});
    Tensor mask(Shape{lm.cin, lm.cout});
    std::fill(idx.i16().begin(), idx.i16().end(), std::int16_t{-1});
    std::fill(fl.i16().begin(), fl.i16().end(), std::int16_t{-1});
    auto src = w.f32();
    auto dst = cw.f32();
    for (std::size_t f = 0; f < filters.size(); ++f) {
      const std::size_t p = filters[f];
      fl.i16()[f] = static_cast<std::int16_t>(p);
      cb.f32()[f] = bias.f32()[p];
      const auto ins = lm.kept_inputs(p);
      for (std::size_t s = 0; s < ins.size(); ++s) {
        idx.i16()[s * F + f] = static_cast<std::int16_t>(ins[s]);
        for (std::size_t k = 0; k < kh * kw; ++k) dst[(k * K + s) * F + f] = src[(k * lm.cin + ins[s]) * lm.cout + p];
      }
    }
    for (std::size_t q = 0; q < lm.cin; ++q)
      for (std::size_t p = 0; p < lm.cout; ++p) mask.f32()[q * lm.cout + p] = lm.kept(q, p) ? 1.0f : 0.0f;
    out.set(weight_name(lm.name), std::move(cw));
    out.set(bias_name(lm.name), std::move(cb));
    out.set(lm.name + ".index", std::move(idx));
    out.set(lm.name + ".filters", std::move(fl));
    out.set(lm.name + ".mask", std::move(mask));
  }
  out.metadata["compacted"] = "1";
  return out;
}

inline bool is_compacted(const WeightBundle& b, const std::string& layer) { return b.contains(layer + ".index"); }

/// Recovers the mask stored by apply_mask.
inline PruneMask mask_from_bundle(const WeightBundle& b, const std::vector<std::string>& layers) {
  PruneMask m;
  for (const auto& name : layers) {
    const Tensor& t = b.at(name + ".mask");
    if (t.rank() != 2) throw Error(Errc::MaskMismatch, name + ".mask must be [cin, cout]");
    LayerMask lm{name, t.dim(0), t.dim(1), std::vector<std::uint8_t>(t.size()), std::vector<std::uint8_t>(t.dim(1), 0)};
    const auto v = t.to_floats();
    for (std::size_t k = 0; k < v.size(); ++k) lm.keep[k] = v[k] != 0.0f;
    if (b.contains(name + ".filters")) {
      for (auto p : b.at(name + ".filters").i16())
        if (p >= 0) lm.filter_kept.at(static_cast<std::size_t>(p)) = 1;
    } else {
      for (std::size_t p = 0; p < lm.cout; ++p) lm.filter_kept[p] = !lm.kept_inputs(p).empty();
    }
    m.layers.push_back(std::move(lm));
  }
  return m;
}

/// Dense [kh, kw, cin, cout] weights and [cout] bias for every compacted
/// layer; uncompacted entries pass through. The result drops .index,
/// .filters and .mask entries.
inline WeightBundle expand_compact(const WeightBundle& b) {
  WeightBundle out;
  out.metadata = b.metadata;
  out.metadata.erase("compacted");
  for (const auto& [name, t] : b.entries) {
    const auto dot = name.rfind('.');
    const std::string layer = name.substr(0, dot), field = dot == std::string::npos ? "" : name.substr(dot + 1);
    if (field == "index" || field == "filters" || field == "mask") continue;
    if (!is_compacted(b, layer) || (field != "weight" && field != "bias")) {
      out.set(name, t);
      continue;
    }
    const Tensor& mask = b.at(layer + ".mask");
    const Tensor& idx = b.at(layer + ".index");
    const Tensor& fl = b.at(layer + ".filters");
    const std::size_t cin = mask.dim(0), cout = mask.dim(1), F = fl.size(), K = idx.dim(0);
    if (field == "bias") {
      Tensor dense(Shape{cout});
      for (std::size_t f = 0; f < F; ++f)
        if (fl.i16()[f] >= 0) dense.f32()[static_cast<std::size_t>(fl.i16()[f])] = t.f32()[f];
      out.set(name, std::move(dense));
      continue;
    }
    if (t.rank() != 4 || t.dim(2) != K || t.dim(3) != F || idx.dim(1) != F)
      throw Error(Errc::MaskMismatch, layer + ": compacted tensors disagree");
    const std::size_t kh = t.dim(0), kw = t.dim(1);
    Tensor dense(Shape{kh, kw, cin, cout});
    for (std::size_t f = 0; f < F; ++f) {
      const int p = fl.i16()[f];
      if (p < 0) continue;
      for (std::size_t s = 0; s < K; ++s) {
        const int q = idx.i16()[s * F + f];
        if (q < 0) continue;
        if (static_cast<std::size_t>(q) >= cin || static_cast<std::size_t>(p) >= cout)
          throw Error(Errc::IndexOutOfRange, layer + ": compacted index out of range");
        for (std::size_t k = 0; k < kh * kw; ++k)
          dense.f32()[(k * cin + static_cast<std::size_t>(q)) * cout + static_cast<std::size_t>(p)] = t.f32()[(k * K + s) * F + f];
      }
    }
    out.set(name, std::move(dense));
  }
  return out;
}

}  // namespace capsbeam
