#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "capsbeam/geometry.hpp"

namespace capsbeam {

struct ConvLayerConfig {
  std::string name;
  std::size_t kernel_h = 3, kernel_w = 3;
  std::size_t in_ch = 0, out_ch = 0;
  bool relu = true;
};

/// Convolution whose out_ch channels are read as num_capsules vectors of capsule_dim.
struct CapsConvLayerConfig {
  std::string name;
  std::size_t kernel_h = 3, kernel_w = 3;
  std::size_t in_ch = 0, out_ch = 0;
  std::size_t num_capsules = 0, capsule_dim = 0;
};

struct RoutingConfig {
  std::size_t num_in_capsules = 8, in_dim = 8;
  std::size_t num_out_capsules = 8, out_dim = 8;
  std::size_t num_iterations = 3;
};

/// Pointwise fully connected layer (stored as a 1x1 convolution).
struct FcLayerConfig {
  std::string name;
  std::size_t in_features = 0, out_features = 0;
  bool relu = true;
};

/// Layer stack description. Zero padding and stride 1 everywhere.
struct CapsConfig {
  std::vector<ConvLayerConfig> conv_layers;
  std::vector<CapsConvLayerConfig> caps_conv_layers;
  std::optional<RoutingConfig> routing;
  std::vector<FcLayerConfig> fc_layers;

  /// Checks kernel shapes and that channel counts chain from layer to layer.
  void validate() const {
    std::optional<std::size_t> ch;
    auto chain = [&](std::size_t in, std::size_t out, const std::string& name) {
      if (in == 0 || out == 0) throw Error(Errc::InvalidConfig, name + ": zero channel count");
      if (ch && *ch != in)
        throw Error(Errc::InvalidConfig, name + ": expects " + std::to_string(in) + " input channels, previous layer gives " +
                                             std::to_string(*ch));
      ch = out;
    };
    auto kernel = [](std::size_t kh, std::size_t kw, const std::string& name) {
      if (kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0)
        throw Error(Errc::InvalidConfig, name + ": kernel extents must be odd and positive");
    };
    for (const auto& l : conv_layers) {
      kernel(l.kernel_h, l.kernel_w, l.name);
      chain(l.in_ch, l.out_ch, l.name);
    }
    for (const auto& l : caps_conv_layers) {
      kernel(l.kernel_h, l.kernel_w, l.name);
      if (l.num_capsules * l.capsule_dim != l.out_ch)
        throw Error(Errc::InvalidConfig, l.name + ": num_capsules * capsule_dim must equal out_ch");
      chain(l.in_ch, l.out_ch, l.name);
    }
    if (routing) {
      const auto& r = *routing;
      if (r.num_iterations == 0) throw Error(Errc::InvalidConfig, "routing needs at least one iteration");
      if (r.num_in_capsules == 0 || r.num_out_capsules == 0 || r.in_dim == 0 || r.out_dim == 0)
        throw Error(Errc::InvalidConfig, "routing capsule counts must be positive");
      chain(r.num_in_capsules * r.in_dim, r.num_out_capsules * r.out_dim, "routing");
    }
    for (const auto& l : fc_layers) chain(l.in_features, l.out_features, l.name);
  }

  /// Stricter check for the full beamformer: routing input comes from the last
  /// capsule layer, capsules are routed without transformation matrices
  /// (in_dim == out_dim) and the head emits I and Q.
  void validate_for_inference() const {
    validate();
    if (conv_layers.empty() && caps_conv_layers.empty())
      throw Error(Errc::InvalidConfig, "network needs at least one convolution");
    if (fc_layers.empty() || fc_layers.back().out_features != 2)
      throw Error(Errc::InvalidConfig, "final fc layer must emit 2 features (I, Q)");
    if (routing) {
      if (caps_conv_layers.empty()) throw Error(Errc::InvalidConfig, "routing needs a capsule layer before it");
      const auto& last = caps_conv_layers.back();
      if (routing->num_in_capsules != last.num_capsules || routing->in_dim != last.capsule_dim)
        throw Error(Errc::InvalidConfig, "routing input must match the last capsule layer grouping");
      if (routing->in_dim != routing->out_dim)
        throw Error(Errc::InvalidConfig, "weight-free routing requires in_dim == out_dim");
    }
  }

  std::size_t input_channels() const {
    if (!conv_layers.empty()) return conv_layers.front().in_ch;
    if (!caps_conv_layers.empty()) return caps_conv_layers.front().in_ch;
    if (routing) return routing->num_in_capsules * routing->in_dim;
    if (!fc_layers.empty()) return fc_layers.front().in_features;
    return 0;
  }

  std::size_t receptive_field() const {
    std::size_t rf = 1;
    for (const auto& l : conv_layers) rf += l.kernel_h - 1;
    for (const auto& l : caps_conv_layers) rf += l.kernel_h - 1;
    return rf;
  }
};

/// Default beamformer: 7x7 receptive field, (8, 8) routing, about 306k parameters.
inline CapsConfig default_caps_config() {
  CapsConfig c;
  c.conv_layers = {{"conv1", 3, 3, 128, 128, true}, {"conv2", 3, 3, 128, 64, true}};
  c.caps_conv_layers = {{"caps1", 3, 3, 64, 128, 16, 8}, {"caps2", 1, 1, 128, 64, 8, 8}};
  c.routing = RoutingConfig{8, 8, 8, 8, 3};
  c.fc_layers = {{"fc1", 64, 32, true}, {"fc2", 32, 16, true}, {"fc3", 16, 8, true}, {"fc4", 8, 2, false}};
  return c;
}

/// Scaled-down network with the same topology, for desk-sized tests.
inline CapsConfig toy_caps_config(std::size_t channels = 8) {
  CapsConfig c;
  c.conv_layers = {{"conv1", 3, 3, channels, 8, true}, {"conv2", 3, 3, 8, 8, true}};
  c.caps_conv_layers = {{"caps1", 3, 3, 8, 8, 2, 4}, {"caps2", 1, 1, 8, 8, 2, 4}};
  c.routing = RoutingConfig{2, 4, 2, 4, 3};
  c.fc_layers = {{"fc1", 8, 8, true}, {"fc2", 8, 8, true}, {"fc3", 8, 4, true}, {"fc4", 4, 2, false}};
  return c;
}

/// Uniform view of every weighted layer as a (possibly 1x1) convolution.
struct WeightedLayer {
  std::string name;
  std::size_t kernel_h, kernel_w, in_ch, out_ch;
  bool relu;
  std::size_t num_capsules = 0, capsule_dim = 0;  // nonzero for capsule layers
  bool is_fc = false;
};

inline std::vector<WeightedLayer> weighted_layers(const CapsConfig& cfg) {
  std::vector<WeightedLayer> out;
  for (const auto& l : cfg.conv_layers) out.push_back({l.name, l.kernel_h, l.kernel_w, l.in_ch, l.out_ch, l.relu});
  for (const auto& l : cfg.caps_conv_layers)
    out.push_back({l.name, l.kernel_h, l.kernel_w, l.in_ch, l.out_ch, false, l.num_capsules, l.capsule_dim});
  for (const auto& l : cfg.fc_layers) {
    WeightedLayer w{l.name, 1, 1, l.in_features, l.out_features, l.relu};
    w.is_fc = true;
    out.push_back(w);
  }
  return out;
}

inline std::string weight_name(const std::string& layer) { return layer + ".weight"; }
inline std::string bias_name(const std::string& layer) { return layer + ".bias"; }

/// Weights plus biases summed analytically per layer. Routing has no trained weights.
inline std::uint64_t count_params(const CapsConfig& cfg) {
  cfg.validate();
  std::uint64_t n = 0;
  for (const auto& l : weighted_layers(cfg)) n += l.kernel_h * l.kernel_w * l.in_ch * l.out_ch + l.out_ch;
  return n;
}

// Per-pixel routing operation ledger. Exponentials use the 5-term Taylor
// form (5 mul + 5 add) plus one add for the row sum and one divide.
inline constexpr std::uint64_t kSoftmaxOpsPerLogit = 12;
inline constexpr std::uint64_t kSquashFixedOps = 3;  // sqrt, 1 + |s|^2, divide

inline std::uint64_t squash_ops(std::size_t num_capsules, std::size_t dim) {
  return num_capsules * (3 * dim + kSquashFixedOps);
}

struct RoutingOps {
  std::uint64_t softmax, weighted_sum, squash, agreement;
  std::uint64_t total() const { return softmax + weighted_sum + squash + agreement; }
};

/// Per-pixel routing ops. The agreement update after the final iteration is skipped.
inline RoutingOps routing_ops_per_pixel(const RoutingConfig& r) {
  const std::uint64_t links = r.num_in_capsules * r.num_out_capsules;
  const std::uint64_t it = r.num_iterations;
  RoutingOps ops{};
  ops.softmax = it * links * kSoftmaxOpsPerLogit;
  ops.weighted_sum = it * 2 * links * r.out_dim;
  ops.squash = it * squash_ops(r.num_out_capsules, r.out_dim);
  ops.agreement = (it > 0 ? it - 1 : 0) * 2 * links * r.out_dim;
  return ops;
}

/// Conv MACs per output pixel (dense).
inline std::uint64_t macs_per_pixel(const WeightedLayer& l) { return l.kernel_h * l.kernel_w * l.in_ch * l.out_ch; }

/// Arithmetic operations per frame: 2 per MAC for every layer, capsule
/// squashes, and the routing ledger above.
inline std::uint64_t count_flops(const CapsConfig& cfg, const PixelGrid& grid) {
  cfg.validate();
  const std::uint64_t pixels = grid.num_rows * grid.num_cols;
  std::uint64_t per_pixel = 0;
  for (const auto& l : weighted_layers(cfg)) {
    per_pixel += 2 * macs_per_pixel(l);
    if (l.num_capsules) per_pixel += squash_ops(l.num_capsules, l.capsule_dim);
  }
  if (cfg.routing) per_pixel += routing_ops_per_pixel(*cfg.routing).total();
  return per_pixel * pixels;
}

}  // namespace capsbeam
