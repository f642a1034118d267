#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "capsbeam/geometry.hpp"
#include "capsbeam/parallel.hpp"

namespace capsbeam {

struct Scatterer {
  double x_m = 0, z_m = 0, amplitude = 1;
};

struct CystRegion {
  double center_x_m = 0, center_z_m = 0, radius_m = 1e-3;
  double echogenicity = 0;  // 0 = anechoic, 1 = same as background
};

struct Phantom {
  std::vector<Scatterer> scatterers;
  std::vector<CystRegion> cyst_regions;
  double background_density_per_mm2 = 0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    for (const auto& s : scatterers)
      if (!(s.z_m > 0)) throw Error(Errc::InvalidConfig, "scatterer depth must be positive");
    for (const auto& c : cyst_regions) {
      if (!(c.radius_m > 0)) throw Error(Errc::InvalidConfig, "cyst radius must be positive");
      if (c.echogenicity < 0 || c.echogenicity > 1) throw Error(Errc::InvalidConfig, "echogenicity must lie in [0, 1]");
    }
  }
};

/// Adds uniformly placed speckle scatterers (Gaussian amplitudes) over a
/// rectangle; scatterers inside a cyst are scaled by its echogenicity.
inline void fill_speckle(Phantom& p, double x_min, double x_max, double z_min, double z_max) {
  if (p.background_density_per_mm2 <= 0) return;
  std::mt19937_64 rng(p.rng_seed);
  std::uniform_real_distribution<double> ux(x_min, x_max), uz(z_min, z_max);
  std::normal_distribution<double> amp(0.0, 1.0);
  const double area_mm2 = (x_max - x_min) * (z_max - z_min) * 1e6;
  const auto count = static_cast<std::size_t>(std::llround(area_mm2 * p.background_density_per_mm2));
  p.scatterers.reserve(p.scatterers.size() + count);
  for (std::size_t i = 0; i < count; ++i) {
    Scatterer s{ux(rng), uz(rng), amp(rng)};
    for (const auto& c : p.cyst_regions)
      if (std::hypot(s.x_m - c.center_x_m, s.z_m - c.center_z_m) < c.radius_m) s.amplitude *= c.echogenicity;
    if (s.amplitude != 0.0) p.scatterers.push_back(s);
  }
}

struct RawChannelData {
  ProbeGeometry geometry;
  std::size_t num_time_samples = 0;
  Tensor samples;  // [num_time_samples, num_elements]
};

struct PulseShape {
  double center_frequency_hz = 7.6e6;
  double fractional_bandwidth = 0.6;

  double sigma_t() const {
    const double sigma_f = fractional_bandwidth * center_frequency_hz / (2.0 * std::sqrt(2.0 * std::numbers::ln2));
    return 1.0 / (2.0 * std::numbers::pi * sigma_f);
  }
  double operator()(double t) const {
    const double s = sigma_t();
    return std::exp(-t * t / (2 * s * s)) * std::cos(2 * std::numbers::pi * center_frequency_hz * t);
  }
};

struct SimulationOptions {
  PulseShape pulse;
  double noise_stddev = 0;  // additive white Gaussian noise, off by default
  std::uint64_t noise_seed = 0;
};

/// Plane-wave transmit delay plus receive path from point (x, z) to element x_e.
inline double two_way_delay(const ProbeGeometry& g, double x, double z, double x_e) {
  const double c = g.speed_of_sound_mps;
  const double tx = (z * std::cos(g.transmit_angle_rad) + x * std::sin(g.transmit_angle_rad)) / c;
  return tx + std::hypot(x - x_e, z) / c;
}

inline RawChannelData simulate_rx(const Phantom& phantom, const ProbeGeometry& geom, std::size_t num_time_samples,
                                  const SimulationOptions& opt = {}) {
  phantom.validate();
  geom.validate();
  if (num_time_samples == 0) throw Error(Errc::InvalidConfig, "need at least one time sample");
  const std::size_t ne = geom.num_elements;
  const double fs = geom.sample_rate_hz;
  const double t_last = static_cast<double>(num_time_samples - 1) / fs;
  for (const auto& s : phantom.scatterers)
    for (std::size_t e = 0; e < ne; ++e)
      if (two_way_delay(geom, s.x_m, s.z_m, geom.element_x(e)) > t_last)
        throw Error(Errc::OutOfField, "scatterer echo at (" + std::to_string(s.x_m) + ", " + std::to_string(s.z_m) +
                                          ") lands beyond the last time sample");

  RawChannelData raw{geom, num_time_samples, Tensor(Shape{num_time_samples, ne})};
  auto out = raw.samples.f32();
  const double support = 5.0 * opt.pulse.sigma_t();
  // Each element column is independent; accumulate in double then store.
  parallel_for(ne, [&](std::size_t e) {
    std::vector<double> trace(num_time_samples, 0.0);
    const double xe = geom.element_x(e);
    for (const auto& s : phantom.scatterers) {
      const double tau = two_way_delay(geom, s.x_m, s.z_m, xe);
      const auto lo = static_cast<long>(std::ceil((tau - support) * fs));
      const auto hi = static_cast<long>(std::floor((tau + support) * fs));
      for (long k = std::max(0L, lo); k <= std::min<long>(hi, static_cast<long>(num_time_samples) - 1); ++k)
        trace[static_cast<std::size_t>(k)] += s.amplitude * opt.pulse(static_cast<double>(k) / fs - tau);
    }
    for (std::size_t k = 0; k < num_time_samples; ++k) out[k * ne + e] = static_cast<float>(trace[k]);
  });
  if (opt.noise_stddev > 0) {
    std::mt19937_64 rng(opt.noise_seed);
    std::normal_distribution<double> n(0.0, opt.noise_stddev);
    for (auto& v : out) v = static_cast<float>(v + n(rng));
  }
  return raw;
}

/// Resamples every channel at each pixel's two-way delay by linear
/// interpolation; delays outside the recorded window give 0.
inline RfVolume tof_correct(const RawChannelData& raw, const PixelGrid& grid) {
  grid.validate();
  const auto& g = raw.geometry;
  const std::size_t ne = g.num_elements;
  if (raw.samples.rank() != 2 || raw.samples.dim(1) != ne || raw.samples.dim(0) != raw.num_time_samples)
    throw Error(Errc::ShapeMismatch, "raw data dims do not match geometry");
  RfVolume rf(grid, ne);
  auto out = rf.samples.f32();
  auto in = raw.samples.f32();
  const double fs = g.sample_rate_hz;
  const auto last = static_cast<double>(raw.num_time_samples - 1);
  parallel_for(grid.num_rows, [&](std::size_t r) {
    const double z = grid.z(r);
    for (std::size_t c = 0; c < grid.num_cols; ++c) {
      const double x = grid.x(c);
      float* px = &out[(r * grid.num_cols + c) * ne];
      for (std::size_t e = 0; e < ne; ++e) {
        const double pos = two_way_delay(g, x, z, g.element_x(e)) * fs;
        if (pos < 0 || pos > last) {
          px[e] = 0.0f;
          continue;
        }
        const auto k = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(k);
        const double a = in[k * ne + e];
        const double b = k + 1 < raw.num_time_samples ? in[(k + 1) * ne + e] : 0.0;
        px[e] = static_cast<float>(frac == 0.0 ? a : a + frac * (b - a));
      }
    }
  });
  return rf;
}

/// Time samples needed so every pixel of the grid (plus pulse tail) is recorded.
inline std::size_t required_time_samples(const ProbeGeometry& g, const PixelGrid& grid, const PulseShape& pulse = {}) {
  double t_max = 0;
  for (double x : {grid.x(0), grid.x(grid.num_cols - 1)})
    for (std::size_t e : {std::size_t{0}, g.num_elements - 1})
      t_max = std::max(t_max, two_way_delay(g, x, grid.z(grid.num_rows - 1), g.element_x(e)));
  return static_cast<std::size_t>(std::ceil((t_max + 6 * pulse.sigma_t()) * g.sample_rate_hz)) + 2;
}

}  // namespace capsbeam
