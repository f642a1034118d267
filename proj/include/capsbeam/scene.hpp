#pragma once

#include <numbers>
#include <vector>

#include "capsbeam/beamform.hpp"
#include "capsbeam/metrics.hpp"
#include "capsbeam/phantom.hpp"

namespace capsbeam {

/// Everything needed to go from a phantom to ToF-corrected data for a set of
/// transmit angles.
struct Scene {
  ProbeGeometry probe;
  PixelGrid grid;
  Phantom phantom;
  SimulationOptions sim;
  std::vector<double> angles_deg{0.0};
  std::vector<RegionSpec> regions;
  std::vector<std::pair<double, double>> point_targets;
};

inline const std::vector<double>& compounding_angles_deg() {
  static const std::vector<double> a{-0.86, -0.43, 0.0, 0.43, 0.86};
  return a;
}

/// Time samples covering every pixel and every scatterer echo (plus pulse tail).
inline std::size_t scene_time_samples(const Scene& s, const ProbeGeometry& g, const PulseShape& pulse) {
  double t_max = 0;
  for (const auto& sc : s.phantom.scatterers)
    for (std::size_t e : {std::size_t{0}, g.num_elements - 1})
      t_max = std::max(t_max, two_way_delay(g, sc.x_m, sc.z_m, g.element_x(e)));
  const auto n = static_cast<std::size_t>(std::ceil((t_max + 6 * pulse.sigma_t()) * g.sample_rate_hz)) + 2;
  return std::max(n, required_time_samples(g, s.grid, pulse));
}

/// Raw channel data for one transmit angle. Noise (if enabled) uses a seed
/// derived from the angle index so every insonification gets its own draw.
inline RawChannelData simulate_angle(const Scene& s, std::size_t angle_index) {
  ProbeGeometry g = s.probe;
  g.transmit_angle_rad = s.angles_deg.at(angle_index) * std::numbers::pi / 180.0;
  SimulationOptions opt = s.sim;
  opt.noise_seed = s.sim.noise_seed + 0x9e3779b97f4a7c15ULL * (angle_index + 1);
  return simulate_rx(s.phantom, g, scene_time_samples(s, g, opt.pulse), opt);
}

inline RfVolume simulate_tofc(const Scene& s, std::size_t angle_index) {
  return tof_correct(simulate_angle(s, angle_index), s.grid);
}

/// Element pitch and lateral pixel spacing set together. Half a wavelength
/// keeps receive grating lobes out of the image; with the default 0.3 mm
/// pitch at 7.6 MHz (about 1.5 wavelengths) and no element directivity they
/// dominate the clutter.
inline void set_pitch(Scene& s, double pitch_m) {
  s.probe.pitch_m = pitch_m;
  s.grid.col_spacing_m = pitch_m;
}

inline constexpr double kHalfWavePitch = 0.1e-3;

/// One or more point scatterers on an otherwise empty medium.
inline Scene point_scene(const std::vector<std::pair<double, double>>& points, PixelGrid grid = {}) {
  Scene s;
  s.grid = grid;
  for (const auto& [x, z] : points) s.phantom.scatterers.push_back({x, z, 1.0});
  s.point_targets = points;
  return s;
}

/// Anechoic cyst in speckle, with a circular inside region and two lateral
/// background rectangles at the cyst depth.
inline Scene cyst_scene(PixelGrid grid = {}, double radius_m = 2e-3, double density_per_mm2 = 8.0,
                        std::uint64_t seed = 1, double noise_stddev = 0.0) {
  Scene s;
  s.grid = grid;
  const double zc = grid.z(grid.num_rows / 2);
  s.phantom.cyst_regions.push_back({0.0, zc, radius_m, 0.0});
  s.phantom.background_density_per_mm2 = density_per_mm2;
  s.phantom.rng_seed = seed;
  const double margin = 1e-3;
  fill_speckle(s.phantom, grid.x(0) - margin, grid.x(grid.num_cols - 1) + margin, std::max(grid.z(0) - margin, 1e-4),
               grid.z(grid.num_rows - 1) + margin);
  s.sim.noise_stddev = noise_stddev;
  s.sim.noise_seed = seed;
  const double half_h = std::min(radius_m, 0.45 * (grid.z(grid.num_rows - 1) - grid.z(0)));
  const double inner = 1.25 * radius_m, edge = grid.x(grid.num_cols - 1);
  const double half_w = std::min(radius_m, 0.95 * (edge - inner) / 2);
  s.regions.push_back({"cyst", RegionKind::Circle, RegionRole::TargetIn, 0.0, zc, 0.8 * radius_m});
  s.regions.push_back({"bg_left", RegionKind::Rectangle, RegionRole::BackgroundOut, -(inner + half_w), zc, 0, half_w, half_h});
  s.regions.push_back({"bg_right", RegionKind::Rectangle, RegionRole::BackgroundOut, inner + half_w, zc, 0, half_w, half_h});
  return s;
}

}  // namespace capsbeam
