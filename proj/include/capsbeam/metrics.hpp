#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "capsbeam/geometry.hpp"

namespace capsbeam {

// Contrast metrics use linear envelope magnitudes (before log compression).
inline constexpr const char* kMetricDomain = "linear_envelope";

enum class RegionKind { Circle, Rectangle };
enum class RegionRole { TargetIn, BackgroundOut };

struct RegionSpec {
  std::string id;
  RegionKind kind = RegionKind::Circle;
  RegionRole role = RegionRole::TargetIn;
  double center_x_m = 0, center_z_m = 0;
  double radius_m = 0;                          // circle
  double half_width_m = 0, half_height_m = 0;   // rectangle, lateral x axial

  bool contains(double x, double z) const {
    if (kind == RegionKind::Circle) return std::hypot(x - center_x_m, z - center_z_m) <= radius_m;
    return std::abs(x - center_x_m) <= half_width_m && std::abs(z - center_z_m) <= half_height_m;
  }

  void validate(const PixelGrid& g) const {
    const double hx = kind == RegionKind::Circle ? radius_m : half_width_m;
    const double hz = kind == RegionKind::Circle ? radius_m : half_height_m;
    if (!(hx > 0) || !(hz > 0)) throw Error(Errc::InvalidConfig, "region '" + id + "' needs a positive extent");
    const double eps = 1e-9;
    if (center_x_m - hx < g.x(0) - eps || center_x_m + hx > g.x(g.num_cols - 1) + eps ||
        center_z_m - hz < g.z(0) - eps || center_z_m + hz > g.z(g.num_rows - 1) + eps)
      throw Error(Errc::OutOfField, "region '" + id + "' extends past the image grid");
  }
};

inline RegionKind parse_region_kind(const std::string& s) {
  if (s == "circle") return RegionKind::Circle;
  if (s == "rectangle") return RegionKind::Rectangle;
  throw Error(Errc::InvalidConfig, "unknown region kind '" + s + "' (circle|rectangle)");
}

inline RegionRole parse_region_role(const std::string& s) {
  if (s == "target_in") return RegionRole::TargetIn;
  if (s == "background_out") return RegionRole::BackgroundOut;
  throw Error(Errc::InvalidConfig, "unknown region role '" + s + "' (target_in|background_out)");
}

/// Flat pixel indices inside the region.
inline std::vector<std::size_t> region_pixels(const PixelGrid& g, const RegionSpec& r) {
  std::vector<std::size_t> out;
  for (std::size_t row = 0; row < g.num_rows; ++row)
    for (std::size_t col = 0; col < g.num_cols; ++col)
      if (r.contains(g.x(col), g.z(row))) out.push_back(row * g.num_cols + col);
  return out;
}

inline std::vector<double> region_values(const EnvelopeImage& env, const RegionSpec& r) {
  std::vector<double> out;
  const auto mag = env.magnitudes();
  for (std::size_t k : region_pixels(env.grid, r)) out.push_back(mag[k]);
  if (out.empty()) throw Error(Errc::EmptyRegion, "region '" + r.id + "' covers no pixel");
  return out;
}

/// Throws unless the two regions share no pixel.
inline void check_disjoint(const PixelGrid& g, const RegionSpec& a, const RegionSpec& b) {
  for (std::size_t row = 0; row < g.num_rows; ++row)
    for (std::size_t col = 0; col < g.num_cols; ++col)
      if (a.contains(g.x(col), g.z(row)) && b.contains(g.x(col), g.z(row)))
        throw Error(Errc::InvalidConfig, "regions '" + a.id + "' and '" + b.id + "' overlap");
}

namespace detail {

inline void require_nonempty(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw Error(Errc::EmptyRegion, "metric needs two non-empty regions");
}

inline double mean(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

inline double variance(std::span<const double> v, double mu) {
  double s = 0;
  for (double x : v) s += (x - mu) * (x - mu);
  return s / static_cast<double>(v.size());
}

}  // namespace detail

// ---------------------------------------------------------------- resolution

/// Full width at half maximum (max/2, i.e. -6.02 dB) of the lobe containing
/// sample p. Walks outward to the first sample strictly below half on each
/// side and places each crossing by linear interpolation.
inline double fwhm_around(std::span<const double> profile, std::size_t p, double spacing_m) {
  if (p >= profile.size()) throw Error(Errc::NoPeak, "peak index outside the profile");
  const double peak = profile[p];
  if (!(peak > 0)) throw Error(Errc::NoPeak, "profile has no positive maximum");
  const double half = peak / 2;
  std::size_t l = p;
  while (l > 0 && profile[l - 1] >= half) --l;
  if (l == 0) throw Error(Errc::NoCrossing, "no half-maximum crossing before the peak");
  std::size_t r = p;
  while (r + 1 < profile.size() && profile[r + 1] >= half) ++r;
  if (r + 1 == profile.size()) throw Error(Errc::NoCrossing, "no half-maximum crossing after the peak");
  // crossing between l-1 (below) and l (at or above); likewise r and r+1
  const double left = static_cast<double>(l - 1) + (half - profile[l - 1]) / (profile[l] - profile[l - 1]);
  const double right = static_cast<double>(r) + (profile[r] - half) / (profile[r] - profile[r + 1]);
  return (right - left) * spacing_m;
}

/// FWHM of the lobe at the first global maximum.
inline double fwhm(std::span<const double> profile, double spacing_m) {
  if (profile.empty()) throw Error(Errc::NoPeak, "empty profile");
  const auto it = std::max_element(profile.begin(), profile.end());
  return fwhm_around(profile, static_cast<std::size_t>(it - profile.begin()), spacing_m);
}

inline double fwhm(const std::vector<double>& profile, double spacing_m) {
  return fwhm(std::span<const double>(profile), spacing_m);
}

struct PointResolution {
  double expected_x_m = 0, expected_z_m = 0;
  std::size_t peak_row = 0, peak_col = 0;
  double axial_fwhm_mm = 0, lateral_fwhm_mm = 0;
};

struct ResolutionReport {
  std::vector<PointResolution> points;
};

/// Finds the envelope peak within search_radius_m of each expected target and
/// measures axial (column) and lateral (row) widths through it.
inline ResolutionReport measure_resolution(const EnvelopeImage& env, const std::vector<std::pair<double, double>>& targets,
                                           double search_radius_m) {
  const auto& g = env.grid;
  const auto mag = env.magnitudes();
  ResolutionReport rep;
  for (const auto& [x, z] : targets) {
    PointResolution pr;
    pr.expected_x_m = x;
    pr.expected_z_m = z;
    double best = -1;
    for (std::size_t row = 0; row < g.num_rows; ++row)
      for (std::size_t col = 0; col < g.num_cols; ++col)
        if (std::hypot(g.x(col) - x, g.z(row) - z) <= search_radius_m && mag[row * g.num_cols + col] > best) {
          best = mag[row * g.num_cols + col];
          pr.peak_row = row;
          pr.peak_col = col;
        }
    if (!(best > 0)) throw Error(Errc::NoPeak, "no echo near a point target");
    std::vector<double> axial(g.num_rows), lateral(g.num_cols);
    for (std::size_t row = 0; row < g.num_rows; ++row) axial[row] = mag[row * g.num_cols + pr.peak_col];
    for (std::size_t col = 0; col < g.num_cols; ++col) lateral[col] = mag[pr.peak_row * g.num_cols + col];
    pr.axial_fwhm_mm = fwhm_around(axial, pr.peak_row, g.row_spacing_m) * 1e3;
    pr.lateral_fwhm_mm = fwhm_around(lateral, pr.peak_col, g.col_spacing_m) * 1e3;
    rep.points.push_back(pr);
  }
  return rep;
}

// ---------------------------------------------------------------- contrast

inline double contrast_ratio(std::span<const double> in, std::span<const double> out) {
  detail::require_nonempty(in, out);
  const double mi = detail::mean(in), mo = detail::mean(out);
  if (!(mi > 0) || !(mo > 0)) throw Error(Errc::ZeroMean, "contrast ratio needs positive region means");
  return std::abs(20.0 * std::log10(mi / mo));
}

inline double cnr(std::span<const double> in, std::span<const double> out) {
  detail::require_nonempty(in, out);
  const double mi = detail::mean(in), mo = detail::mean(out);
  const double v = detail::variance(in, mi) + detail::variance(out, mo);
  if (v == 0) throw Error(Errc::ZeroVariance, "both regions have zero variance");
  return std::abs(mi - mo) / std::sqrt(v);
}

enum class GcnrBinning { Linear, Rank };

/// 1 - sum over bins of min(h_in, h_out), normalized histograms on bins over
/// the pooled range. Rank mode bins pooled ranks instead of values, which
/// makes the result invariant to any strictly increasing intensity map.
inline double gcnr(std::span<const double> in, std::span<const double> out, std::size_t num_bins = 256,
                   GcnrBinning mode = GcnrBinning::Linear) {
  detail::require_nonempty(in, out);
  if (num_bins < 2) throw Error(Errc::InvalidConfig, "gcnr needs at least two bins");
  std::vector<double> a(in.begin(), in.end()), b(out.begin(), out.end());
  if (mode == GcnrBinning::Rank) {
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    std::sort(pooled.begin(), pooled.end());
    auto rank = [&](double v) { return static_cast<double>(std::lower_bound(pooled.begin(), pooled.end(), v) - pooled.begin()); };
    for (auto& v : a) v = rank(v);
    for (auto& v : b) v = rank(v);
  }
  double lo = a[0], hi = a[0];
  for (const auto* v : {&a, &b})
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  if (hi == lo) return 0.0;
  auto hist = [&](const std::vector<double>& v) {
    std::vector<double> h(num_bins, 0.0);
    for (double x : v) {
      auto k = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(num_bins));
      h[std::min(k, num_bins - 1)] += 1.0 / static_cast<double>(v.size());
    }
    return h;
  };
  const auto ha = hist(a), hb = hist(b);
  double overlap = 0;
  for (std::size_t k = 0; k < num_bins; ++k) overlap += std::min(ha[k], hb[k]);
  return std::clamp(1.0 - overlap, 0.0, 1.0);
}

inline double contrast_ratio(const EnvelopeImage& env, const RegionSpec& in, const RegionSpec& out) {
  return contrast_ratio(region_values(env, in), region_values(env, out));
}
inline double cnr(const EnvelopeImage& env, const RegionSpec& in, const RegionSpec& out) {
  return cnr(region_values(env, in), region_values(env, out));
}
inline double gcnr(const EnvelopeImage& env, const RegionSpec& in, const RegionSpec& out, std::size_t num_bins = 256,
                   GcnrBinning mode = GcnrBinning::Linear) {
  return gcnr(region_values(env, in), region_values(env, out), num_bins, mode);
}

/// Magnitudes along the row nearest depth_m in dB relative to that row's
/// maximum; zero samples are floored at -200 dB.
inline std::vector<double> lateral_profile(const EnvelopeImage& env, double depth_m) {
  const auto& g = env.grid;
  const double pos = (depth_m - g.depth_origin_m) / g.row_spacing_m;
  if (!(pos >= -0.5 && pos < static_cast<double>(g.num_rows) - 0.5))
    throw Error(Errc::DepthOutOfRange, "depth " + std::to_string(depth_m) + " m lies outside the image");
  const auto row = static_cast<std::size_t>(std::llround(std::max(pos, 0.0)));
  std::vector<double> out(g.num_cols);
  double peak = 0;
  for (std::size_t c = 0; c < g.num_cols; ++c) peak = std::max(peak, static_cast<double>(env.magnitude(row, c)));
  if (!(peak > 0)) throw Error(Errc::AllZeroImage, "profile row is zero everywhere");
  for (std::size_t c = 0; c < g.num_cols; ++c) {
    const double m = env.magnitude(row, c);
    out[c] = m > 0 ? std::max(20.0 * std::log10(m / peak), -200.0) : -200.0;
  }
  return out;
}

// ---------------------------------------------------------------- CSV

struct MetricRow {
  std::string metric;
  double value = 0;
  std::string unit;
  std::string regions;  // region ids joined by '|', or a target label
};

/// CR, CNR and gCNR for every (target_in, background_out) pair, plus axial and
/// lateral FWHM for every point target.
inline std::vector<MetricRow> compute_metrics(const EnvelopeImage& env, const std::vector<RegionSpec>& regions,
                                              const std::vector<std::pair<double, double>>& point_targets = {},
                                              double search_radius_m = 1e-3, std::size_t gcnr_bins = 256) {
  std::vector<MetricRow> rows;
  for (const auto& in : regions) {
    if (in.role != RegionRole::TargetIn) continue;
    in.validate(env.grid);
    for (const auto& out : regions) {
      if (out.role != RegionRole::BackgroundOut) continue;
      out.validate(env.grid);
      check_disjoint(env.grid, in, out);
      const std::string ids = in.id + "|" + out.id;
      const auto vi = region_values(env, in), vo = region_values(env, out);
      rows.push_back({"cr", contrast_ratio(vi, vo), "dB", ids});
      rows.push_back({"cnr", cnr(vi, vo), "1", ids});
      rows.push_back({"gcnr", gcnr(vi, vo, gcnr_bins), "1", ids});
    }
  }
  if (!point_targets.empty()) {
    const auto rep = measure_resolution(env, point_targets, search_radius_m);
    for (std::size_t k = 0; k < rep.points.size(); ++k) {
      const std::string id = "point" + std::to_string(k);
      rows.push_back({"axial_fwhm", rep.points[k].axial_fwhm_mm, "mm", id});
      rows.push_back({"lateral_fwhm", rep.points[k].lateral_fwhm_mm, "mm", id});
    }
  }
  return rows;
}

inline void write_metrics_csv(const std::vector<MetricRow>& rows, std::ostream& out) {
  out << "# domain=" << kMetricDomain << "\n";
  out << "metric,value,unit,regions\n";
  std::ostringstream v;
  for (const auto& r : rows) {
    v.str("");
    v << std::setprecision(10) << r.value;
    out << r.metric << ',' << v.str() << ',' << r.unit << ',' << r.regions << '\n';
  }
}

inline std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::MissingMetrics, "no metrics file at " + path.string());
  std::vector<MetricRow> rows;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "metric,value,unit,regions") throw Error(Errc::MissingMetrics, path.string() + ": unexpected header");
      header = true;
      continue;
    }
    std::stringstream ss(line);
    MetricRow r;
    std::string value;
    std::getline(ss, r.metric, ',');
    std::getline(ss, value, ',');
    std::getline(ss, r.unit, ',');
    std::getline(ss, r.regions);
    try {
      r.value = std::stod(value);
    } catch (const std::exception&) {
      throw Error(Errc::MissingMetrics, path.string() + ": bad value '" + value + "'");
    }
    rows.push_back(r);
  }
  if (!header) throw Error(Errc::MissingMetrics, path.string() + " has no metric table");
  return rows;
}

struct ComparisonRow {
  std::string metric, unit, regions;
  double a = 0, b = 0, delta = 0, pct_change = 0;
};

/// Side-by-side table keyed by (metric, regions); delta = b - a.
inline std::vector<ComparisonRow> compare_metrics(const std::vector<MetricRow>& a, const std::vector<MetricRow>& b) {
  auto index = [](const std::vector<MetricRow>& rows) {
    std::map<std::pair<std::string, std::string>, MetricRow> m;
    for (const auto& r : rows) m[{r.metric, r.regions}] = r;
    return m;
  };
  auto region_set = [](const std::vector<MetricRow>& rows) {
    std::vector<std::string> s;
    for (const auto& r : rows) s.push_back(r.regions);
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  };
  if (region_set(a) != region_set(b)) throw Error(Errc::RegionMismatch, "runs were measured on different regions");
  const auto ia = index(a), ib = index(b);
  std::vector<ComparisonRow> out;
  for (const auto& [key, ra] : ia) {
    const auto it = ib.find(key);
    if (it == ib.end()) throw Error(Errc::MissingMetrics, "metric " + key.first + " on " + key.second + " missing from second run");
    const double d = it->second.value - ra.value;
    out.push_back({key.first, ra.unit, key.second, ra.value, it->second.value, d,
                   ra.value != 0 ? 100.0 * d / std::abs(ra.value) : 0.0});
  }
  if (ib.size() != ia.size()) throw Error(Errc::MissingMetrics, "second run has metrics the first lacks");
  return out;
}

inline void write_comparison_csv(const std::vector<ComparisonRow>& rows, std::ostream& out) {
  out << "# domain=" << kMetricDomain << "\n";
  out << "metric,unit,regions,a,b,delta,pct_change\n";
  for (const auto& r : rows)
    out << r.metric << ',' << r.unit << ',' << r.regions << ',' << std::setprecision(10) << r.a << ',' << r.b << ','
        << r.delta << ',' << r.pct_change << '\n';
}

}  // namespace capsbeam
