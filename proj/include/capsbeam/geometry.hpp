#pragma once

#include <cmath>
#include <vector>

#include "capsbeam/tensor.hpp"

namespace capsbeam {

/// Linear array, plane-wave transmit.
struct ProbeGeometry {
  std::size_t num_elements = 128;
  double pitch_m = 0.3e-3;
  double speed_of_sound_mps = 1540.0;
  double sample_rate_hz = 30.4e6;
  double transmit_angle_rad = 0.0;
  double center_frequency_hz = 7.6e6;
  /// Optional explicit lateral element positions; empty means a centred
  /// uniform array at pitch_m.
  std::vector<double> element_x_m;

  void validate() const {
    if (num_elements == 0) throw Error(Errc::InvalidConfig, "probe needs at least one element");
    if (!(pitch_m > 0)) throw Error(Errc::InvalidConfig, "pitch must be positive");
    if (!(sample_rate_hz > 0)) throw Error(Errc::InvalidConfig, "sample rate must be positive");
    if (!(speed_of_sound_mps > 0)) throw Error(Errc::InvalidConfig, "speed of sound must be positive");
    if (!element_x_m.empty() && element_x_m.size() != num_elements)
      throw Error(Errc::InvalidConfig, "element position list does not match element count");
  }

  double element_x(std::size_t e) const {
    if (!element_x_m.empty()) return element_x_m[e];
    return (static_cast<double>(e) - (static_cast<double>(num_elements) - 1.0) / 2.0) * pitch_m;
  }

  double wavelength_m() const { return speed_of_sound_mps / center_frequency_hz; }
};

/// Image pixel lattice: rows run in depth, columns laterally (centred on the probe axis).
struct PixelGrid {
  std::size_t num_rows = 368;
  std::size_t num_cols = 128;
  double row_spacing_m = 1540.0 / (2.0 * 30.4e6);
  double col_spacing_m = 0.3e-3;
  double depth_origin_m = 5e-3;

  void validate() const {
    if (num_rows == 0 || num_cols == 0) throw Error(Errc::InvalidConfig, "grid needs at least one row and column");
    if (!(row_spacing_m > 0) || !(col_spacing_m > 0)) throw Error(Errc::InvalidConfig, "grid spacings must be positive");
  }

  double z(std::size_t row) const { return depth_origin_m + static_cast<double>(row) * row_spacing_m; }
  double x(std::size_t col) const {
    return (static_cast<double>(col) - (static_cast<double>(num_cols) - 1.0) / 2.0) * col_spacing_m;
  }

  friend bool operator==(const PixelGrid&, const PixelGrid&) = default;
};

/// Time-of-flight corrected data cube [rows, cols, channels].
struct RfVolume {
  PixelGrid grid;
  std::size_t num_channels = 0;
  Tensor samples;

  RfVolume() = default;
  RfVolume(PixelGrid g, std::size_t channels)
      : grid(g), num_channels(channels), samples(Shape{g.num_rows, g.num_cols, channels}) {}
  RfVolume(PixelGrid g, Tensor t) : grid(g), num_channels(t.rank() == 3 ? t.dim(2) : 0), samples(std::move(t)) {
    validate();
  }

  void validate() const {
    if (samples.rank() != 3 || samples.dim(0) != grid.num_rows || samples.dim(1) != grid.num_cols ||
        samples.dim(2) != num_channels)
      throw Error(Errc::ShapeMismatch, "rf volume dims " + shape_string(samples.dims()) + " do not match grid");
  }
};

/// Pre-envelope beamsum [rows, cols].
struct BeamformedImage {
  PixelGrid grid;
  Tensor values;

  BeamformedImage() = default;
  explicit BeamformedImage(PixelGrid g) : grid(g), values(Shape{g.num_rows, g.num_cols}) {}
  BeamformedImage(PixelGrid g, Tensor t) : grid(g), values(std::move(t)) {
    if (values.rank() != 2 || values.dim(0) != g.num_rows || values.dim(1) != g.num_cols)
      throw Error(Errc::ShapeMismatch, "image dims do not match grid");
  }
};

/// I/Q pair per pixel.
struct EnvelopeImage {
  PixelGrid grid;
  Tensor i_part;
  Tensor q_part;

  EnvelopeImage() = default;
  explicit EnvelopeImage(PixelGrid g)
      : grid(g), i_part(Shape{g.num_rows, g.num_cols}), q_part(Shape{g.num_rows, g.num_cols}) {}

  std::size_t rows() const { return grid.num_rows; }
  std::size_t cols() const { return grid.num_cols; }

  float magnitude(std::size_t r, std::size_t c) const {
    const std::size_t k = r * grid.num_cols + c;
    return std::hypot(i_part.f32()[k], q_part.f32()[k]);
  }

  std::vector<float> magnitudes() const {
    std::vector<float> m(grid.num_rows * grid.num_cols);
    auto i = i_part.f32();
    auto q = q_part.f32();
    for (std::size_t k = 0; k < m.size(); ++k) m[k] = std::hypot(i[k], q[k]);
    return m;
  }

  /// Packed [rows, cols, 2] view (I then Q), the on-disk form.
  Tensor packed() const {
    Tensor t(Shape{grid.num_rows, grid.num_cols, 2});
    auto out = t.f32();
    auto i = i_part.f32();
    auto q = q_part.f32();
    for (std::size_t k = 0; k < i.size(); ++k) {
      out[2 * k] = i[k];
      out[2 * k + 1] = q[k];
    }
    return t;
  }

  static EnvelopeImage unpack(const PixelGrid& g, const Tensor& t) {
    if (t.rank() != 3 || t.dim(0) != g.num_rows || t.dim(1) != g.num_cols || t.dim(2) != 2)
      throw Error(Errc::ShapeMismatch, "packed envelope must be [rows, cols, 2]");
    EnvelopeImage e(g);
    const auto in = t.to_floats();
    auto i = e.i_part.f32();
    auto q = e.q_part.f32();
    for (std::size_t k = 0; k < i.size(); ++k) {
      i[k] = in[2 * k];
      q[k] = in[2 * k + 1];
    }
    return e;
  }
};

}  // namespace capsbeam
