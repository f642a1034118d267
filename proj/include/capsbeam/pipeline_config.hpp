#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "capsbeam/accel_sim.hpp"
#include "capsbeam/io.hpp"
#include "capsbeam/pruning.hpp"
#include "capsbeam/scene.hpp"

namespace capsbeam {

struct PhantomSpec {
  std::string kind = "cyst";  // point | cyst | empty
  std::vector<std::pair<double, double>> points;  // (x, z) in m; default one target at the grid centre
  double cyst_radius_m = 2e-3;
  double density_per_mm2 = 8.0;
  double noise_stddev = 0.0;
  std::uint64_t seed = 1;
};

struct PipelineConfig {
  ProbeGeometry probe;
  PulseShape pulse;
  std::vector<double> angles_deg{0.0};
  PixelGrid grid;
  double dynamic_range_db = 60;
  PhantomSpec phantom;
  std::string caps_preset = "default";  // default | toy
  std::uint64_t weights_seed = 1;
  MvdrParams mvdr;
  PruneMethod prune_method = PruneMethod::LakpMl;
  double prune_ratio = 0.85;
  std::size_t prune_r = 2;
  bool relu_then_bias = false;
  AccelConfig accel;
  TransferPolicy policy = TransferPolicy::WeightsResident;
  std::vector<RegionSpec> regions;  // empty: use the phantom's own regions
  double search_radius_m = 1e-3;

  CapsConfig caps() const {
    if (caps_preset == "default") return default_caps_config();
    if (caps_preset == "toy") return toy_caps_config(probe.num_elements);
    throw Error(Errc::InvalidConfig, "unknown capsnet preset '" + caps_preset + "' (default|toy)");
  }
};

namespace detail {

template <class T>
T parse_value(const std::string& section, const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof())
    throw Error(Errc::InvalidConfig, "[" + section + "] " + key + ": cannot parse '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& section, const std::string& key, const std::string& text) {
  if (text == "1" || text == "true" || text == "yes") return true;
  if (text == "0" || text == "false" || text == "no") return false;
  throw Error(Errc::InvalidConfig, "[" + section + "] " + key + ": expected a boolean, got '" + text + "'");
}

inline std::vector<double> parse_list(const std::string& section, const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (item.find_first_not_of(" \t") != std::string::npos) out.push_back(parse_value<double>(section, key, item));
  return out;
}

/// "x:z; x:z" in metres.
inline std::vector<std::pair<double, double>> parse_points(const std::string& text) {
  std::vector<std::pair<double, double>> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw Error(Errc::InvalidConfig, "[phantom] points: expected x:z, got '" + item + "'");
    out.emplace_back(parse_value<double>("phantom", "points", item.substr(0, colon)),
                     parse_value<double>("phantom", "points", item.substr(colon + 1)));
  }
  return out;
}

/// "<circle|rectangle> <target_in|background_out> cx cz r"  or  "... cx cz half_w half_h"
inline RegionSpec parse_region(const std::string& id, const std::string& text) {
  std::istringstream in(text);
  std::string kind, role;
  in >> kind >> role;
  RegionSpec r;
  r.id = id;
  r.kind = parse_region_kind(kind);
  r.role = parse_region_role(role);
  std::vector<double> nums;
  double v;
  while (in >> v) nums.push_back(v);
  if (!in.eof()) throw Error(Errc::InvalidConfig, "[regions] " + id + ": bad number in '" + text + "'");
  const std::size_t want = r.kind == RegionKind::Circle ? 3 : 4;
  if (nums.size() != want)
    throw Error(Errc::InvalidConfig, "[regions] " + id + ": expected " + std::to_string(want) + " numbers after kind and role");
  r.center_x_m = nums[0];
  r.center_z_m = nums[1];
  if (r.kind == RegionKind::Circle) {
    r.radius_m = nums[2];
  } else {
    r.half_width_m = nums[2];
    r.half_height_m = nums[3];
  }
  return r;
}

}  // namespace detail

inline const std::map<std::string, std::set<std::string>>& pipeline_config_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"probe", {"num_elements", "pitch_m", "speed_of_sound_mps", "sample_rate_hz", "center_frequency_hz",
                 "fractional_bandwidth", "angles_deg"}},
      {"grid", {"num_rows", "num_cols", "row_spacing_m", "col_spacing_m", "depth_origin_m", "dynamic_range_db"}},
      {"phantom", {"kind", "points", "cyst_radius_m", "density_per_mm2", "noise_stddev", "seed"}},
      {"capsnet", {"preset", "weights_seed"}},
      {"mvdr", {"subarray_len", "temporal_half_window", "diagonal_loading"}},
      {"prune", {"method", "ratio", "r"}},
      {"quant", {"relu_then_bias"}},
      {"accel", {"pe_rows", "pe_cols", "clock_hz", "dma_count", "dma_beat_bytes", "word_bits", "bram_budget_bytes",
                 "policy"}},
      {"regions", {}},  // free-form ids
  };
  return keys;
}

inline PipelineConfig parse_pipeline_config(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(Errc::InvalidConfig, std::string("config: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  const auto& known = pipeline_config_keys();
  PipelineConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw Error(Errc::InvalidConfig, "config: key '" + section + "' outside any section");
    const auto sk = known.find(section);
    if (sk == known.end()) throw Error(Errc::InvalidConfig, "config: unknown section [" + section + "]");
    for (const auto& [key, node] : body) {
      const std::string v = node.data();
      if (section == "regions") {
        c.regions.push_back(detail::parse_region(key, v));
        continue;
      }
      if (!sk->second.count(key)) throw Error(Errc::InvalidConfig, "config: unknown key '" + key + "' in [" + section + "]");
      auto num = [&]<class T>(T& dst) { dst = detail::parse_value<T>(section, key, v); };
      if (section == "probe") {
        if (key == "num_elements") num(c.probe.num_elements);
        else if (key == "pitch_m") num(c.probe.pitch_m);
        else if (key == "speed_of_sound_mps") num(c.probe.speed_of_sound_mps);
        else if (key == "sample_rate_hz") num(c.probe.sample_rate_hz);
        else if (key == "center_frequency_hz") {
          num(c.probe.center_frequency_hz);
          c.pulse.center_frequency_hz = c.probe.center_frequency_hz;
        } else if (key == "fractional_bandwidth") num(c.pulse.fractional_bandwidth);
        else if (key == "angles_deg") c.angles_deg = detail::parse_list(section, key, v);
      } else if (section == "grid") {
        if (key == "num_rows") num(c.grid.num_rows);
        else if (key == "num_cols") num(c.grid.num_cols);
        else if (key == "row_spacing_m") num(c.grid.row_spacing_m);
        else if (key == "col_spacing_m") num(c.grid.col_spacing_m);
        else if (key == "depth_origin_m") num(c.grid.depth_origin_m);
        else if (key == "dynamic_range_db") num(c.dynamic_range_db);
      } else if (section == "phantom") {
        if (key == "kind") c.phantom.kind = v;
        else if (key == "points") c.phantom.points = detail::parse_points(v);
        else if (key == "cyst_radius_m") num(c.phantom.cyst_radius_m);
        else if (key == "density_per_mm2") num(c.phantom.density_per_mm2);
        else if (key == "noise_stddev") num(c.phantom.noise_stddev);
        else if (key == "seed") num(c.phantom.seed);
      } else if (section == "capsnet") {
        if (key == "preset") c.caps_preset = v;
        else if (key == "weights_seed") num(c.weights_seed);
      } else if (section == "mvdr") {
        if (key == "subarray_len") num(c.mvdr.subarray_len);
        else if (key == "temporal_half_window") num(c.mvdr.temporal_half_window);
        else if (key == "diagonal_loading") num(c.mvdr.diagonal_loading);
      } else if (section == "prune") {
        if (key == "method") c.prune_method = parse_prune_method(v);
        else if (key == "ratio") num(c.prune_ratio);
        else if (key == "r") num(c.prune_r);
      } else if (section == "quant") {
        if (key == "relu_then_bias") c.relu_then_bias = detail::parse_bool(section, key, v);
      } else if (section == "accel") {
        if (key == "pe_rows") num(c.accel.pe_rows);
        else if (key == "pe_cols") num(c.accel.pe_cols);
        else if (key == "clock_hz") num(c.accel.clock_hz);
        else if (key == "dma_count") num(c.accel.dma_count);
        else if (key == "dma_beat_bytes") num(c.accel.dma_beat_bytes);
        else if (key == "word_bits") num(c.accel.word_bits);
        else if (key == "bram_budget_bytes") num(c.accel.bram_budget_bytes);
        else if (key == "policy") c.policy = parse_transfer_policy(v);
      }
    }
  }
  if (c.phantom.kind != "point" && c.phantom.kind != "cyst" && c.phantom.kind != "empty")
    throw Error(Errc::InvalidConfig, "[phantom] kind must be point, cyst or empty");
  if (c.angles_deg.empty()) throw Error(Errc::InvalidConfig, "[probe] angles_deg needs at least one angle");
  c.probe.validate();
  c.grid.validate();
  c.mvdr.validate(c.probe.num_elements);
  c.accel.relu_then_bias = c.relu_then_bias;
  c.accel.validate();
  (void)c.caps();
  return c;
}

inline PipelineConfig parse_pipeline_config(const std::string& text) {
  std::istringstream in(text);
  return parse_pipeline_config(in);
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoFailure, "cannot read config " + path.string());
  return parse_pipeline_config(in);
}

/// FNV-1a 64 over the config file bytes, as 16 hex digits.
inline std::string config_hash(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

/// Phantom and geometry from the config; seed overrides [phantom] seed.
inline Scene build_scene(const PipelineConfig& c, std::optional<std::uint64_t> seed = std::nullopt) {
  const std::uint64_t s = seed.value_or(c.phantom.seed);
  Scene sc;
  if (c.phantom.kind == "cyst") {
    sc = cyst_scene(c.grid, c.phantom.cyst_radius_m, c.phantom.density_per_mm2, s, c.phantom.noise_stddev);
  } else if (c.phantom.kind == "point") {
    auto pts = c.phantom.points;
    if (pts.empty()) pts.emplace_back(c.grid.x(c.grid.num_cols / 2), c.grid.z(c.grid.num_rows / 2));
    sc = point_scene(pts, c.grid);
    sc.sim.noise_stddev = c.phantom.noise_stddev;
    sc.sim.noise_seed = s;
  } else {
    sc.grid = c.grid;
  }
  sc.probe = c.probe;
  sc.sim.pulse = c.pulse;
  sc.angles_deg = c.angles_deg;
  if (!c.regions.empty()) sc.regions = c.regions;
  return sc;
}

}  // namespace capsbeam
