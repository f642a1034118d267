#pragma once

#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "capsbeam/pruning.hpp"
#include "capsbeam/quantized.hpp"

namespace capsbeam {

/// Cycles of one routing stage for one pixel: base + slope * (n_caps * dim).
struct StageCost {
  double base = 0;
  double slope = 0;
  double at(std::size_t n) const { return base + slope * static_cast<double>(n); }
};

struct AccelConfig {
  std::size_t pe_rows = 4;    // filters per cycle group
  std::size_t pe_cols = 128;  // output columns per cycle
  double clock_hz = 1e8;
  std::size_t dma_count = 2;
  std::size_t dma_beat_bytes = 8;
  std::size_t word_bits = 16;
  std::size_t bram_budget_bytes = 1437696;  // 312 x 36 Kb blocks
  StageCost softmax{4, 1.0 / 16};
  StageCost matvec{2, 1.0 / 16};
  StageCost squash{6, 1.0 / 16};
  StageCost agreement{2, 1.0 / 16};
  bool relu_then_bias = false;  // apply ReLU to the raw sum, then add the bias

  void validate() const {
    if (pe_rows < 1 || pe_cols < 1) throw Error(Errc::InvalidConfig, "PE array dims must be >= 1");
    if (!(clock_hz > 0)) throw Error(Errc::InvalidConfig, "clock must be positive");
    if (dma_count < 1 || dma_beat_bytes < 1) throw Error(Errc::InvalidConfig, "need at least one DMA with a non-empty beat");
    if (word_bits != 16) throw Error(Errc::InvalidConfig, "word_bits must be 16 to match the fixed-point path");
  }
  std::size_t word_bytes() const { return word_bits / 8; }
  double words_per_cycle() const {
    return static_cast<double>(dma_count * dma_beat_bytes) / static_cast<double>(word_bytes());
  }
};

enum class TransferPolicy { ReloadPerBlock, WeightsResident };

inline TransferPolicy parse_transfer_policy(const std::string& s) {
  if (s == "reload_per_block") return TransferPolicy::ReloadPerBlock;
  if (s == "weights_resident") return TransferPolicy::WeightsResident;
  throw Error(Errc::InvalidConfig, "unknown policy '" + s + "' (reload_per_block|weights_resident)");
}

inline const char* policy_name(TransferPolicy p) {
  return p == TransferPolicy::ReloadPerBlock ? "reload_per_block" : "weights_resident";
}

struct LayerSimStats {
  std::string name;
  std::string kind;  // conv | caps | fc | routing
  std::uint64_t ops = 0;
  std::uint64_t weight_words = 0, input_words = 0, output_words = 0;
  std::uint64_t external_word_transactions = 0;  // words loaded from external memory
  std::uint64_t compute_cycles = 0, dma_cycles = 0, stall_cycles = 0, cycles = 0;
  std::uint64_t bram_bytes = 0;
};

struct SimReport {
  std::uint64_t external_word_transactions = 0;
  std::uint64_t output_words = 0;
  std::uint64_t cycle_count = 0;
  std::uint64_t bram_bytes_peak = 0;
  std::uint64_t total_ops = 0;
  double clock_hz = 1e8;
  double modeled_gops = 0;
  double modeled_latency_s = 0;
  std::vector<LayerSimStats> layers;

  void add(const LayerSimStats& s) {
    layers.push_back(s);
    external_word_transactions += s.external_word_transactions;
    output_words += s.output_words;
    cycle_count += s.cycles;
    total_ops += s.ops;
    bram_bytes_peak = std::max(bram_bytes_peak, s.bram_bytes);
    finalize();
  }
  void finalize() {
    modeled_latency_s = static_cast<double>(cycle_count) / clock_hz;
    modeled_gops = cycle_count ? static_cast<double>(total_ops) / modeled_latency_s / 1e9 : 0.0;
  }
};

// ---------------------------------------------------------------- layer model

/// What the transaction and cycle model needs to know about one convolution.
struct ConvLayerDesc {
  std::string name;
  std::string kind = "conv";
  std::size_t rows = 0, cols = 0, kh = 1, kw = 1, cin = 0, cout = 0;
  /// Kept input channels of every kept filter, in filter order. Empty for a dense layer.
  std::optional<std::vector<std::size_t>> kept_per_filter;
  std::size_t streamed_cin = 0;  // input channels read by any kept kernel (0 = all)
  std::size_t num_capsules = 0, capsule_dim = 0;

  std::vector<std::size_t> filter_loads() const {
    if (kept_per_filter) return *kept_per_filter;
    return std::vector<std::size_t>(cout, cin);
  }
  std::uint64_t kept_kernels() const {
    std::uint64_t n = 0;
    for (std::size_t k : filter_loads()) n += k;
    return n;
  }
  std::uint64_t input_channels() const { return streamed_cin ? streamed_cin : cin; }
};

inline ConvLayerDesc describe_layer(const WeightedLayer& l, const PixelGrid& grid, const LayerMask* mask = nullptr) {
  ConvLayerDesc d;
  d.name = l.name;
  d.kind = l.is_fc ? "fc" : (l.num_capsules ? "caps" : "conv");
  d.rows = grid.num_rows;
  d.cols = grid.num_cols;
  d.kh = l.kernel_h;
  d.kw = l.kernel_w;
  d.cin = l.in_ch;
  d.cout = l.out_ch;
  d.num_capsules = l.num_capsules;
  d.capsule_dim = l.capsule_dim;
  if (mask) {
    if (mask->cin != l.in_ch || mask->cout != l.out_ch) throw Error(Errc::MaskMismatch, l.name + ": mask dims differ");
    std::vector<std::size_t> kept;
    std::vector<std::uint8_t> read(l.in_ch, 0);
    for (std::size_t p : mask->kept_filters()) {
      const auto ins = mask->kept_inputs(p);
      kept.push_back(ins.size());
      for (std::size_t q : ins) read[q] = 1;
    }
    d.kept_per_filter = kept;
    d.streamed_cin = static_cast<std::size_t>(std::count(read.begin(), read.end(), 1));
  }
  return d;
}

/// Words loaded from external memory for one layer.
///   reload_per_block: weights re-sent for every output row, plus the input once.
///   weights_resident: kept weights once, plus the input once.
inline std::uint64_t count_transactions(const ConvLayerDesc& d, TransferPolicy policy) {
  const std::uint64_t weights = d.kh * d.kw * d.kept_kernels();
  const std::uint64_t input = static_cast<std::uint64_t>(d.rows) * d.cols * d.input_channels();
  if (policy == TransferPolicy::ReloadPerBlock) return d.rows * weights + input;
  return weights + input;
}

namespace detail {

inline std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

/// PE cycles per output row: filter groups of pe_rows, each taking
/// kh*kw*(largest kept input count in the group) cycles per pe_cols block.
inline std::uint64_t conv_row_cycles(const ConvLayerDesc& d, const AccelConfig& a) {
  const auto loads = d.filter_loads();
  const std::uint64_t col_blocks = ceil_div(d.cols, a.pe_cols);
  std::uint64_t c = 0;
  for (std::size_t g = 0; g < loads.size(); g += a.pe_rows) {
    std::size_t k = 0;
    for (std::size_t f = g; f < std::min(loads.size(), g + a.pe_rows); ++f) k = std::max(k, loads[f]);
    c += d.kh * d.kw * k * col_blocks;
  }
  return c;
}

inline std::uint64_t squash_cycles_per_pixel(std::size_t num_capsules, std::size_t dim, const AccelConfig& a) {
  if (!num_capsules) return 0;
  return static_cast<std::uint64_t>(std::ceil(a.squash.at(num_capsules * dim)));
}

inline std::uint64_t conv_bram_bytes(const ConvLayerDesc& d, const AccelConfig& a) {
  const auto loads = d.filter_loads();
  std::size_t k_max = 0;
  for (std::size_t k : loads) k_max = std::max(k_max, k);
  const std::uint64_t f = loads.size();
  const std::uint64_t weights = d.kh * d.kw * k_max * f + f + (d.kept_per_filter ? k_max * f : 0);
  const std::uint64_t lines = static_cast<std::uint64_t>(d.kh) * d.cols * d.cin + static_cast<std::uint64_t>(d.cols) * d.cout;
  return (weights + lines) * a.word_bytes();
}

}  // namespace detail

/// Analytic per-layer statistics (no data moved).
inline LayerSimStats model_conv_layer(const ConvLayerDesc& d, const AccelConfig& a, TransferPolicy policy) {
  a.validate();
  LayerSimStats s;
  s.name = d.name;
  s.kind = d.kind;
  const std::uint64_t pixels = static_cast<std::uint64_t>(d.rows) * d.cols;
  const auto filters = d.filter_loads().size();
  s.ops = 2 * pixels * d.kh * d.kw * d.kept_kernels();
  if (d.num_capsules) s.ops += pixels * squash_ops(d.num_capsules, d.capsule_dim);
  s.weight_words = d.kh * d.kw * d.kept_kernels();
  s.input_words = pixels * d.input_channels();
  s.output_words = pixels * filters;
  s.external_word_transactions = count_transactions(d, policy);
  s.compute_cycles = d.rows * detail::conv_row_cycles(d, a) + pixels * detail::squash_cycles_per_pixel(d.num_capsules, d.capsule_dim, a);
  s.dma_cycles = static_cast<std::uint64_t>(std::ceil(static_cast<double>(s.external_word_transactions) / a.words_per_cycle()));
  s.stall_cycles = s.dma_cycles > s.compute_cycles ? s.dma_cycles - s.compute_cycles : 0;
  s.cycles = s.compute_cycles + s.stall_cycles;
  s.bram_bytes = detail::conv_bram_bytes(d, a);
  return s;
}

inline std::uint64_t routing_cycles_per_pixel(const RoutingConfig& r, const AccelConfig& a) {
  const std::size_t n = r.num_in_capsules * r.in_dim;
  double per_iter = a.softmax.at(n) + a.matvec.at(n) + a.squash.at(r.num_out_capsules * r.out_dim);
  double c = static_cast<double>(r.num_iterations) * per_iter;
  if (r.num_iterations > 1) c += static_cast<double>(r.num_iterations - 1) * a.agreement.at(n);
  return static_cast<std::uint64_t>(std::ceil(c));
}

inline LayerSimStats model_routing(const RoutingConfig& r, std::size_t pixels, const AccelConfig& a) {
  a.validate();
  LayerSimStats s;
  s.name = "routing";
  s.kind = "routing";
  s.ops = pixels * routing_ops_per_pixel(r).total();
  s.input_words = pixels * r.num_in_capsules * r.in_dim;
  s.output_words = pixels * r.num_out_capsules * r.out_dim;
  s.external_word_transactions = s.input_words;
  s.compute_cycles = pixels * routing_cycles_per_pixel(r, a);
  s.dma_cycles = static_cast<std::uint64_t>(std::ceil(static_cast<double>(s.external_word_transactions) / a.words_per_cycle()));
  s.stall_cycles = s.dma_cycles > s.compute_cycles ? s.dma_cycles - s.compute_cycles : 0;
  s.cycles = s.compute_cycles + s.stall_cycles;
  const std::uint64_t block = r.num_in_capsules * r.num_out_capsules * (r.out_dim + 2) + r.num_out_capsules * r.out_dim * 2;
  s.bram_bytes = block * a.word_bytes();
  return s;
}

struct LatencyOptions {
  bool pruned = false;
  double prune_ratio = 0.85;
  TransferPolicy policy = TransferPolicy::WeightsResident;
  const PruneMask* mask = nullptr;  // actual mask; otherwise the per-filter quota is assumed
};

inline LatencyOptions non_optimized() { return {false, 0.0, TransferPolicy::ReloadPerBlock, nullptr}; }
inline LatencyOptions optimized(double ratio = 0.85, const PruneMask* mask = nullptr) {
  return {true, ratio, TransferPolicy::WeightsResident, mask};
}

/// Sum of per-layer cycle models over the whole network.
inline SimReport estimate_latency(const CapsConfig& cfg, const AccelConfig& a, const LatencyOptions& opt,
                                  const PixelGrid& grid = {}) {
  cfg.validate();
  a.validate();
  SimReport rep;
  rep.clock_hz = a.clock_hz;
  for (const auto& l : weighted_layers(cfg)) {
    const LayerMask* lm = opt.mask ? opt.mask->find(l.name) : nullptr;
    ConvLayerDesc d = describe_layer(l, grid, lm);
    if (opt.pruned && !lm && !l.is_fc) {
      const auto quota = static_cast<std::size_t>(std::floor(opt.prune_ratio * static_cast<double>(l.in_ch)));
      d.kept_per_filter = std::vector<std::size_t>(l.out_ch, l.in_ch - quota);
    }
    rep.add(model_conv_layer(d, a, opt.policy));
    if (cfg.routing && l.num_capsules && l.name == cfg.caps_conv_layers.back().name)
      rep.add(model_routing(*cfg.routing, grid.num_rows * grid.num_cols, a));
  }
  rep.finalize();
  return rep;
}

// ---------------------------------------------------------------- functional

/// A compacted fixed16 layer as streamed to the accelerator.
struct StreamLayer {
  std::string name;
  Tensor weights;  // [kh, kw, K, F] fixed16
  Tensor index;    // [K, F] original input channel, -1 = padding
  Tensor filters;  // [F] original filter index
  Tensor bias;     // [F] fixed16
  std::size_t cout = 0;
  bool relu = false;
};

/// Builds a stream layer from dense fixed16 weights/bias and an optional mask.
inline StreamLayer make_stream_layer(const std::string& name, const Tensor& w, const Tensor& b, bool relu,
                                     const LayerMask* mask = nullptr) {
  if (w.dtype() != DType::Fixed16 || b.dtype() != DType::Fixed16 || w.rank() != 4)
    throw Error(Errc::ShapeMismatch, name + ": stream layers need fixed16 [kh, kw, cin, cout] weights");
  const std::size_t kh = w.dim(0), kw = w.dim(1), cin = w.dim(2), cout = w.dim(3);
  if (mask && (mask->cin != cin || mask->cout != cout)) throw Error(Errc::MaskMismatch, name + ": mask dims differ");
  std::vector<std::size_t> filters;
  std::vector<std::vector<std::size_t>> ins;
  for (std::size_t p = 0; p < cout; ++p) {
    if (mask && !mask->filter_kept[p]) continue;
    filters.push_back(p);
    std::vector<std::size_t> q;
    for (std::size_t c = 0; c < cin; ++c)
      if (!mask || mask->kept(c, p)) q.push_back(c);
    ins.push_back(std::move(q));
  }
  std::size_t K = 1;
  for (const auto& q : ins) K = std::max(K, q.size());
  const std::size_t F = std::max<std::size_t>(filters.size(), 1);
  StreamLayer s{name, Tensor(Shape{kh, kw, K, F}, DType::Fixed16, w.scale_exp()), Tensor(Shape{K, F}, DType::Fixed16, 0),
                Tensor(Shape{F}, DType::Fixed16, 0), Tensor(Shape{F}, DType::Fixed16, b.scale_exp()), cout, relu};
  std::fill(s.index.i16().begin(), s.index.i16().end(), std::int16_t{-1});
  std::fill(s.filters.i16().begin(), s.filters.i16().end(), std::int16_t{-1});
  for (std::size_t f = 0; f < filters.size(); ++f) {
    s.filters.i16()[f] = static_cast<std::int16_t>(filters[f]);
    s.bias.i16()[f] = b.i16()[filters[f]];
    for (std::size_t k = 0; k < ins[f].size(); ++k) {
      s.index.i16()[k * F + f] = static_cast<std::int16_t>(ins[f][k]);
      for (std::size_t t = 0; t < kh * kw; ++t)
        s.weights.i16()[(t * K + k) * F + f] = w.i16()[(t * cin + ins[f][k]) * cout + filters[f]];
    }
  }
  return s;
}

struct StreamResult {
  Tensor output;
  SimReport report;
};

/// Streaming convolution: a kh-row line buffer whose
/// padding rows start as zeros, one output row per outer iteration, filters
/// processed in groups of pe_rows across blocks of pe_cols columns, the
/// buffer shifted up by one row after each iteration. Output rows are dense
/// [cols, cout]; removed filters stay zero.
inline StreamResult sim_conv_layer(const Tensor& input, const StreamLayer& layer, int out_scale, const AccelConfig& a,
                                   TransferPolicy policy = TransferPolicy::WeightsResident) {
  a.validate();
  if (input.dtype() != DType::Fixed16 || input.rank() != 3)
    throw Error(Errc::ShapeMismatch, layer.name + ": input stream must be fixed16 [rows, cols, cin]");
  const Tensor& w = layer.weights;
  if (w.rank() != 4 || layer.index.rank() != 2 || layer.index.dim(0) != w.dim(2) || layer.index.dim(1) != w.dim(3) ||
      layer.filters.size() != w.dim(3) || layer.bias.size() != w.dim(3))
    throw Error(Errc::ShapeMismatch, layer.name + ": compacted tensors disagree");
  const std::size_t rows = input.dim(0), cols = input.dim(1), cin = input.dim(2);
  const std::size_t kh = w.dim(0), kw = w.dim(1), K = w.dim(2), F = w.dim(3), cout = layer.cout;
  if (kh % 2 == 0 || kw % 2 == 0) throw Error(Errc::ShapeMismatch, layer.name + ": kernel extents must be odd");

  // per-filter kept slots
  std::vector<std::size_t> filt, slots;
  std::vector<std::uint8_t> read(cin, 0);
  for (std::size_t f = 0; f < F; ++f) {
    const int p = layer.filters.i16()[f];
    if (p < 0) continue;
    if (static_cast<std::size_t>(p) >= cout) throw Error(Errc::IndexOutOfRange, layer.name + ": filter index out of range");
    std::size_t n = 0;
    while (n < K && layer.index.i16()[n * F + f] >= 0) {
      const auto q = static_cast<std::size_t>(layer.index.i16()[n * F + f]);
      if (q >= cin) throw Error(Errc::IndexOutOfRange, layer.name + ": input index out of range");
      read[q] = 1;
      ++n;
    }
    filt.push_back(f);
    slots.push_back(n);
  }

  ConvLayerDesc d;
  d.name = layer.name;
  d.rows = rows;
  d.cols = cols;
  d.kh = kh;
  d.kw = kw;
  d.cin = cin;
  d.cout = cout;
  d.kept_per_filter = slots;
  d.streamed_cin = static_cast<std::size_t>(std::count(read.begin(), read.end(), 1));
  LayerSimStats stats = model_conv_layer(d, a, policy);
  if (stats.bram_bytes > a.bram_budget_bytes)
    throw Error(Errc::BramOverflow, layer.name + ": needs " + std::to_string(stats.bram_bytes) + " B of BRAM, budget " +
                                        std::to_string(a.bram_budget_bytes));

  const int f_acc = out_scale + fx::kAccGuardBits;
  const int prod_shift = input.scale_exp() + w.scale_exp() - f_acc;
  const int bias_shift = layer.bias.scale_exp() - f_acc;
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  Tensor out(Shape{rows, cols, cout}, DType::Fixed16, out_scale);
  auto x = input.i16();
  auto y = out.i16();
  auto wv = w.i16();
  auto idx = layer.index.i16();

  // Line buffer: kh rows of [cols, cin]. Row j holds input row (r - ph + j).
  const std::size_t row_words = cols * cin;
  std::vector<std::int16_t> lb(kh * row_words, 0);
  auto stream_in = [&](std::size_t slot, long src_row) {
    std::int16_t* dst = &lb[slot * row_words];
    if (src_row < 0 || src_row >= static_cast<long>(rows)) {
      std::fill(dst, dst + row_words, std::int16_t{0});
      return;
    }
    std::copy(&x[static_cast<std::size_t>(src_row) * row_words], &x[static_cast<std::size_t>(src_row + 1) * row_words], dst);
  };
  for (std::size_t j = 0; j < kh; ++j) stream_in(j, static_cast<long>(j) - ph);

  std::vector<std::int32_t> acc(a.pe_rows * a.pe_cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < filt.size(); g += a.pe_rows) {
      const std::size_t g_end = std::min(filt.size(), g + a.pe_rows);
      for (std::size_t c0 = 0; c0 < cols; c0 += a.pe_cols) {
        const std::size_t c_end = std::min(cols, c0 + a.pe_cols);
        std::fill(acc.begin(), acc.end(), 0);
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx)
            for (std::size_t pe_r = 0; pe_r < g_end - g; ++pe_r) {
              const std::size_t f = filt[g + pe_r];
              for (std::size_t s = 0; s < slots[g + pe_r]; ++s) {
                const auto q = static_cast<std::size_t>(idx[s * F + f]);
                const std::int64_t wt = wv[((ky * kw + kx) * K + s) * F + f];
                if (wt == 0) continue;
                for (std::size_t c = c0; c < c_end; ++c) {
                  const long cc = static_cast<long>(c) + static_cast<long>(kx) - pw;
                  if (cc < 0 || cc >= static_cast<long>(cols)) continue;
                  const std::int64_t xv = lb[ky * row_words + static_cast<std::size_t>(cc) * cin + q];
                  if (xv == 0) continue;
                  std::int32_t& A = acc[pe_r * a.pe_cols + (c - c0)];
                  A = fx::sat32(std::int64_t{A} + fx::align32(xv * wt, prod_shift));
                }
              }
            }
        for (std::size_t pe_r = 0; pe_r < g_end - g; ++pe_r) {
          const std::size_t f = filt[g + pe_r];
          const auto p = static_cast<std::size_t>(layer.filters.i16()[f]);
          const std::int64_t bv = fx::align32(layer.bias.i16()[f], bias_shift);
          for (std::size_t c = c0; c < c_end; ++c) {
            std::int64_t v = acc[pe_r * a.pe_cols + (c - c0)];
            if (a.relu_then_bias) {
              if (layer.relu) v = std::max<std::int64_t>(v, 0);
              v = fx::sat32(v + bv);
            } else {
              v = fx::sat32(v + bv);
              if (layer.relu) v = std::max<std::int64_t>(v, 0);
            }
            y[(r * cols + c) * cout + p] = fx::sat16(fx::round_shift(v, fx::kAccGuardBits));
          }
        }
      }
    }
    // shift rows up and stream in the next one (zeros past the bottom edge)
    std::copy(lb.begin() + static_cast<long>(row_words), lb.end(), lb.begin());
    stream_in(kh - 1, static_cast<long>(r) + ph + 1);
  }
  StreamResult res{std::move(out), {}};
  res.report.clock_hz = a.clock_hz;
  res.report.add(stats);
  return res;
}

/// Routing engine for per-pixel prediction blocks
/// u_hat [n_in, n_out, d]: logits start at zero; each iteration runs the
/// Taylor softmax, weighted sum, squash and (except the last) agreement.
inline void sim_routing_block(std::span<const std::int16_t> u_hat, std::size_t n_in, std::size_t n_out, std::size_t d,
                              std::size_t iterations, const RoutingScales& sc, std::span<std::int16_t> v) {
  if (u_hat.size() != n_in * n_out * d || v.size() != n_out * d)
    throw Error(Errc::ShapeMismatch, "routing block size mismatch");
  std::vector<std::int16_t> logits(n_in * n_out, 0), coupling(n_in * n_out), s(d);
  const int sum_shift = fx::kCouplingScale + sc.u - (sc.s + fx::kAccGuardBits);
  const int dot_shift = sc.u + sc.v - (sc.b + fx::kAccGuardBits);
  for (std::size_t it = 0; it < iterations; ++it) {
    // softmax unit, one input capsule row at a time
    for (std::size_t i = 0; i < n_in; ++i)
      fixed_softmax(std::span<const std::int16_t>(logits).subspan(i * n_out, n_out), sc.b,
                    std::span<std::int16_t>(coupling).subspan(i * n_out, n_out));
    // weighted sum then squash, one output capsule at a time
    for (std::size_t j = 0; j < n_out; ++j) {
      for (std::size_t k = 0; k < d; ++k) {
        std::int32_t acc = 0;
        for (std::size_t i = 0; i < n_in; ++i)
          acc = fx::sat32(std::int64_t{acc} +
                          fx::align32(std::int64_t{coupling[i * n_out + j]} * u_hat[(i * n_out + j) * d + k], sum_shift));
        s[k] = fx::sat16(fx::round_shift(acc, fx::kAccGuardBits));
      }
      fixed_squash(s, sc.s, sc.v, v.subspan(j * d, d));
    }
    if (it + 1 == iterations) break;
    for (std::size_t i = 0; i < n_in; ++i)
      for (std::size_t j = 0; j < n_out; ++j) {
        std::int32_t acc = 0;
        for (std::size_t k = 0; k < d; ++k)
          acc = fx::sat32(std::int64_t{acc} + fx::align32(std::int64_t{u_hat[(i * n_out + j) * d + k]} * v[j * d + k], dot_shift));
        logits[i * n_out + j] = fx::sat16(logits[i * n_out + j] + fx::round_shift(acc, fx::kAccGuardBits));
      }
  }
}

/// Routing over a [rows, cols, n_in*d] capsule stream, one pixel at a time.
inline StreamResult sim_routing(const Tensor& caps, const RoutingConfig& r, const RoutingScales& sc,
                                const AccelConfig& a) {
  a.validate();
  if (caps.dtype() != DType::Fixed16 || caps.rank() != 3 || caps.dim(2) != r.num_in_capsules * r.in_dim)
    throw Error(Errc::ShapeMismatch, "routing stream must be fixed16 [rows, cols, n_in*d]");
  if (r.in_dim != r.out_dim) throw Error(Errc::ShapeMismatch, "weight-free routing requires in_dim == out_dim");
  const std::size_t pixels = caps.dim(0) * caps.dim(1), d = r.out_dim;
  const std::size_t in_w = r.num_in_capsules * d, out_w = r.num_out_capsules * d;
  Tensor out(Shape{caps.dim(0), caps.dim(1), out_w}, DType::Fixed16, sc.v);
  std::vector<std::int16_t> u_hat(r.num_in_capsules * r.num_out_capsules * d);
  auto x = caps.i16();
  auto y = out.i16();
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t i = 0; i < r.num_in_capsules; ++i)
      for (std::size_t j = 0; j < r.num_out_capsules; ++j)
        for (std::size_t k = 0; k < d; ++k) u_hat[(i * r.num_out_capsules + j) * d + k] = x[p * in_w + i * d + k];
    sim_routing_block(u_hat, r.num_in_capsules, r.num_out_capsules, d, r.num_iterations, sc, y.subspan(p * out_w, out_w));
  }
  StreamResult res{std::move(out), {}};
  res.report.clock_hz = a.clock_hz;
  res.report.add(model_routing(r, pixels, a));
  return res;
}

/// Full fixed-point network on the simulator. Weights come from the float
/// bundle (dense or compacted) quantized with the plan; a mask in the
/// bundle (".mask" entries) selects the kept kernels.
inline StreamResult sim_network(const RfVolume& rf, const CapsConfig& cfg, const WeightBundle& bundle,
                                const QuantPlan& plan, const AccelConfig& a,
                                TransferPolicy policy = TransferPolicy::WeightsResident) {
  cfg.validate_for_inference();
  const WeightBundle dense = expand_compact(bundle);
  std::vector<std::string> masked;
  for (const auto& l : weighted_layers(cfg))
    if (bundle.contains(l.name + ".mask")) masked.push_back(l.name);
  const PruneMask mask = mask_from_bundle(bundle, masked);
  StreamResult res{quantize_tensor(rf.samples, plan.scale("input")), {}};
  res.report.clock_hz = a.clock_hz;
  auto run_conv = [&](const WeightedLayer& l, const std::string& out_name) {
    detail::check_layer_weights(dense, l);
    const Tensor w = quantize_tensor(dense.at(weight_name(l.name)), plan.scale(weight_name(l.name)));
    const Tensor b = quantize_tensor(dense.at(bias_name(l.name)), plan.scale(bias_name(l.name)));
    const StreamLayer sl = make_stream_layer(l.name, w, b, l.relu, mask.find(l.name));
    auto step = sim_conv_layer(res.output, sl, plan.scale(out_name), a, policy);
    for (auto& s : step.report.layers) {
      s.kind = l.is_fc ? "fc" : (l.num_capsules ? "caps" : "conv");
      if (l.num_capsules) {
        const std::uint64_t px = rf.grid.num_rows * rf.grid.num_cols;
        s.ops += px * squash_ops(l.num_capsules, l.capsule_dim);
        s.compute_cycles += px * detail::squash_cycles_per_pixel(l.num_capsules, l.capsule_dim, a);
        s.cycles = s.compute_cycles + s.stall_cycles;
      }
      res.report.add(s);
    }
    res.output = std::move(step.output);
  };
  const auto layers = weighted_layers(cfg);
  for (const auto& l : layers) {
    if (l.num_capsules) {
      run_conv(l, l.name + ".pre");
      res.output = qsquash_capsules(res.output, l.num_capsules, l.capsule_dim, plan.scale(l.name + ".out"));
      if (cfg.routing && l.name == cfg.caps_conv_layers.back().name) {
        auto step = sim_routing(res.output, *cfg.routing, routing_scales(plan, cfg), a);
        for (const auto& s : step.report.layers) res.report.add(s);
        res.output = std::move(step.output);
      }
    } else {
      run_conv(l, l.name + ".out");
    }
  }
  res.report.finalize();
  return res;
}

// ---------------------------------------------------------------- reports

inline void write_sim_report_csv(const SimReport& rep, std::ostream& out) {
  out << "layer,kind,ops,weight_words,input_words,output_words,external_word_transactions,compute_cycles,"
         "dma_cycles,stall_cycles,cycles,bram_bytes\n";
  for (const auto& s : rep.layers)
    out << s.name << ',' << s.kind << ',' << s.ops << ',' << s.weight_words << ',' << s.input_words << ','
        << s.output_words << ',' << s.external_word_transactions << ',' << s.compute_cycles << ',' << s.dma_cycles
        << ',' << s.stall_cycles << ',' << s.cycles << ',' << s.bram_bytes << '\n';
  out << "total,," << rep.total_ops << ",,," << rep.output_words << ',' << rep.external_word_transactions << ",,,,"
      << rep.cycle_count << ',' << rep.bram_bytes_peak << '\n';
}

inline void write_sim_report_text(const SimReport& rep, const AccelConfig& a, std::ostream& out) {
  out << "# pe_array=" << a.pe_rows << "x" << a.pe_cols << " clock_hz=" << a.clock_hz << " dma_count=" << a.dma_count
      << " dma_beat_bytes=" << a.dma_beat_bytes << " word_bits=" << a.word_bits << "\n";
  out << "# stage_cycles(base+slope*n): softmax=" << a.softmax.base << "+" << a.softmax.slope
      << " matvec=" << a.matvec.base << "+" << a.matvec.slope << " squash=" << a.squash.base << "+" << a.squash.slope
      << " agreement=" << a.agreement.base << "+" << a.agreement.slope << "\n";
  for (const auto& s : rep.layers)
    out << "layer=" << s.name << " kind=" << s.kind << " external_word_transactions=" << s.external_word_transactions
        << " cycles=" << s.cycles << " ops=" << s.ops << "\n";
  out << "external_word_transactions=" << rep.external_word_transactions << "\n";
  out << "output_words=" << rep.output_words << "\n";
  out << "cycle_count=" << rep.cycle_count << "\n";
  out << "bram_bytes_peak=" << rep.bram_bytes_peak << "\n";
  out << "total_ops=" << rep.total_ops << "\n";
  out << std::setprecision(6) << "modeled_gops=" << rep.modeled_gops << "\n";
  out << "modeled_latency_s=" << rep.modeled_latency_s << "\n";
}

}  // namespace capsbeam
