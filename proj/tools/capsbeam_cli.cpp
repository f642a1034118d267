#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "capsbeam/capsbeam.hpp"

namespace fs = std::filesystem;
using namespace capsbeam;

namespace {

struct Common {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
};

/// Loaded configuration plus the manifest writer for one invocation.
struct Run {
  std::string command;
  PipelineConfig cfg;
  std::string hash = "builtin";
  fs::path out;
  std::optional<std::uint64_t> seed;

  Run(std::string cmd, const Common& c) : command(std::move(cmd)), out(c.out), seed(c.seed) {
    if (!c.config.empty()) {
      cfg = load_pipeline_config(c.config);
      hash = config_hash(c.config);
    }
    if (seed) {
      cfg.phantom.seed = *seed;
      cfg.weights_seed = *seed;
    }
    fs::create_directories(out);
  }

  void record(const std::string& artifact, const std::string& used_seed) const {
    std::ofstream m(out / "manifest.txt", std::ios::app);
    m << "artifact=" << artifact << " version=" << CAPSBEAM_VERSION << " config_hash=" << hash
      << " seed=" << used_seed << " command=" << command << "\n";
    if (!m) throw Error(Errc::IoFailure, "cannot append to " + (out / "manifest.txt").string());
  }
  void record(const std::string& artifact, std::uint64_t used_seed) const { record(artifact, std::to_string(used_seed)); }
  void record(const std::string& artifact) const { record(artifact, seed ? std::to_string(*seed) : "none"); }

  void save(const Tensor& t, const std::string& name) const {
    write_tensor_file(t, out / name);
    record(name);
  }
  void save(const WeightBundle& b, const std::string& name) const {
    write_bundle_file(b, out / name);
    record(name);
  }
  template <class Fn>
  void save_text(const std::string& name, Fn&& fill) const {
    std::ofstream f(out / name);
    fill(f);
    if (!f) throw Error(Errc::IoFailure, "cannot write " + (out / name).string());
    record(name);
  }
  void save_envelope(const EnvelopeImage& env, const std::string& stem) const {
    save(env.packed(), stem + ".cbtf");
    write_pgm(log_compress(env, cfg.dynamic_range_db), cfg.dynamic_range_db, out / (stem + ".pgm"));
    record(stem + ".pgm");
  }

  RfVolume load_rf(const std::string& path) const { return RfVolume(cfg.grid, read_tensor_file(path)); }
  EnvelopeImage load_envelope(const std::string& path) const {
    return EnvelopeImage::unpack(cfg.grid, read_tensor_file(path));
  }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "pipeline INI file (built-in defaults when omitted)")->check(CLI::ExistingFile);
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
  sub->add_option("--seed", c.seed, "seed for every random draw (overrides the config)");
}

Tensor apodization(const std::string& kind, std::size_t n) {
  return kind == "hann" ? hann_apodization(n) : uniform_apodization(n);
}

std::vector<MetricRow> scene_metrics(const Run& run, const EnvelopeImage& env) {
  const Scene sc = build_scene(run.cfg);
  return compute_metrics(env, sc.regions, sc.point_targets, run.cfg.search_radius_m);
}

// ---------------------------------------------------------------- commands

void cmd_init(const Common& c) {
  Run run("init", c);
  const std::uint64_t s = run.cfg.weights_seed;
  WeightBundle b = random_weights(run.cfg.caps(), s);
  write_bundle_file(b, run.out / "weights.cbwb");
  run.record("weights.cbwb", s);
}

void cmd_synth(const Common& c) {
  Run run("synth", c);
  const Scene sc = build_scene(run.cfg);
  for (std::size_t k = 0; k < sc.angles_deg.size(); ++k) {
    const RawChannelData raw = simulate_angle(sc, k);
    const std::string name = "raw_" + std::to_string(k) + ".cbtf";
    write_tensor_file(raw.samples, run.out / name);
    run.record(name, run.cfg.phantom.seed);
  }
}

void cmd_tofc(const Common& c, const std::vector<std::string>& in, std::optional<double> angle_deg) {
  Run run("tofc", c);
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t idx = in.size() == 1 ? 0 : k;
    double angle = angle_deg ? *angle_deg : run.cfg.angles_deg.at(std::min(idx, run.cfg.angles_deg.size() - 1));
    if (!angle_deg && in.size() == 1) {
      // raw_<k> names carry the angle index written by synth
      const std::string stem = fs::path(in[0]).stem().string();
      if (stem.rfind("raw_", 0) == 0) {
        const std::size_t a = std::stoul(stem.substr(4));
        if (a < run.cfg.angles_deg.size()) angle = run.cfg.angles_deg[a];
      }
    }
    RawChannelData raw;
    raw.geometry = run.cfg.probe;
    raw.geometry.transmit_angle_rad = angle * std::numbers::pi / 180.0;
    raw.samples = read_tensor_file(in[k]);
    if (raw.samples.rank() != 2 || raw.samples.dim(1) != raw.geometry.num_elements)
      throw Error(Errc::ShapeMismatch, in[k] + ": raw data must be [time, num_elements]");
    raw.num_time_samples = raw.samples.dim(0);
    std::string stem = fs::path(in[k]).stem().string();
    stem = stem.rfind("raw", 0) == 0 ? "rf" + stem.substr(3) : stem + "_rf";
    run.save(tof_correct(raw, run.cfg.grid).samples, stem + ".cbtf");
  }
}

void cmd_beamform(const Common& c, const std::string& method, const std::vector<std::string>& in,
                  const std::string& apod, const std::string& base) {
  Run run("beamform", c);
  auto one = [&](const std::string& path, const std::string& how) {
    const RfVolume rf = run.load_rf(path);
    if (how == "mvdr") return mvdr(rf, run.cfg.mvdr);
    return das(rf, apodization(apod, rf.num_channels));
  };
  BeamformedImage img;
  if (method == "compound") {
    std::vector<BeamformedImage> parts;
    for (const auto& p : in) parts.push_back(one(p, base));
    img = compound(parts);
  } else {
    if (in.size() != 1) throw CLI::ValidationError("--in", method + " takes exactly one rf volume");
    img = one(in[0], method);
  }
  run.save_envelope(envelope(img), method);
}

void cmd_infer(const Common& c, const std::string& in, const std::string& weights, bool fixed) {
  Run run("infer", c);
  const RfVolume rf = run.load_rf(in);
  const WeightBundle b = read_bundle_file(weights);
  const CapsConfig cfg = run.cfg.caps();
  if (fixed) {
    QuantOptions qo;
    qo.relu_then_bias = run.cfg.relu_then_bias;
    run.save_envelope(infer_quantized(rf, cfg, expand_compact(b), load_plan(b), {}, qo), "capsbeam_fixed");
  } else {
    run.save_envelope(infer(rf, cfg, expand_compact(b)), "capsbeam");
  }
}

void cmd_quantize(const Common& c, const std::vector<std::string>& in, const std::string& weights) {
  Run run("quantize", c);
  std::vector<RfVolume> samples;
  for (const auto& p : in) samples.push_back(run.load_rf(p));
  const CapsConfig cfg = run.cfg.caps();
  WeightBundle b = read_bundle_file(weights);
  const QuantPlan plan = calibrate(expand_compact(b), samples, cfg);
  store_plan(b, plan);
  run.save(b, "quantized.cbwb");
  run.save_text("quant_plan.csv", [&](std::ostream& o) {
    o << "tensor,scale_exp\n";
    for (const auto& [name, f] : plan.scales) o << name << ',' << f << '\n';
  });
}

struct PruneArgs {
  std::string weights;
  std::optional<std::string> method;
  std::optional<double> ratio;
  std::optional<std::size_t> r;
  bool search = false;
  std::vector<double> ratios{0.5, 0.6, 0.7, 0.8, 0.85, 0.9};
  std::string in;
  std::optional<double> min_cr_db, max_lateral_fwhm_mm;
};

void cmd_prune(const Common& c, const PruneArgs& a) {
  Run run("prune", c);
  const PruneMethod method = a.method ? parse_prune_method(*a.method) : run.cfg.prune_method;
  const std::size_t r = a.r.value_or(run.cfg.prune_r);
  const CapsConfig cfg = run.cfg.caps();
  const WeightBundle dense = expand_compact(read_bundle_file(a.weights));
  const ConvNetDescription net = describe_conv_stack(dense, cfg);
  auto plan_for = [&](double ratio) { return plan_prune(net, ratio, method, r); };

  double ratio = a.ratio.value_or(run.cfg.prune_ratio);
  if (a.search) {
    if (a.in.empty()) throw CLI::ValidationError("--in", "--search needs an rf volume to score each ratio");
    const RfVolume rf = run.load_rf(a.in);
    std::optional<double> best;
    std::ostringstream table;
    table << "ratio,ratio_achieved,metric,value,unit,regions,passes\n";
    for (double q : a.ratios) {
      const PruneMask m = plan_for(q);
      const auto rep = make_prune_report(net, m, q, run.cfg.grid);
      const auto rows = scene_metrics(run, infer(rf, cfg, expand_compact(apply_mask(dense, m))));
      bool ok = true;
      for (const auto& row : rows) {
        bool pass = true;
        if (row.metric == "cr" && a.min_cr_db) pass = row.value >= *a.min_cr_db;
        if (row.metric == "lateral_fwhm" && a.max_lateral_fwhm_mm) pass = row.value * 1e3 <= *a.max_lateral_fwhm_mm;
        ok = ok && pass;
        table << q << ',' << rep.ratio_achieved << ',' << row.metric << ',' << row.value << ',' << row.unit << ','
              << row.regions << ',' << (pass ? 1 : 0) << '\n';
      }
      if (ok && (!best || q > *best)) best = q;
    }
    run.save_text("prune_search.csv", [&](std::ostream& o) { o << table.str(); });
    if (!best) throw Error(Errc::RatioOutOfRange, "no searched ratio passes the metric gates");
    ratio = *best;
    std::cout << "selected_ratio=" << ratio << "\n";
  }
  const PruneMask m = plan_for(ratio);
  const PruneReport rep = make_prune_report(net, m, ratio, run.cfg.grid);
  run.save(apply_mask(dense, m), "pruned.cbwb");
  run.save_text("prune_report.csv", [&](std::ostream& o) { write_prune_report_csv(rep, o); });
  std::cout << "ratio_achieved=" << rep.ratio_achieved << "\nkept_param_fraction=" << rep.kept_param_fraction()
            << "\n";
}

struct SimArgs {
  std::string layer = "all";
  std::optional<std::string> policy;
  std::string weights;
  std::string in;
  bool functional = false;
  bool pruned = false;
  std::optional<double> ratio;
};

void cmd_sim(const Common& c, const SimArgs& a) {
  Run run("sim", c);
  const CapsConfig cfg = run.cfg.caps();
  const TransferPolicy policy = a.policy ? parse_transfer_policy(*a.policy) : run.cfg.policy;
  SimReport full;
  if (a.functional) {
    if (a.in.empty() || a.weights.empty())
      throw CLI::ValidationError("--functional", "needs --in <rf.cbtf> and --weights <quantized.cbwb>");
    const WeightBundle b = read_bundle_file(a.weights);
    auto res = sim_network(run.load_rf(a.in), cfg, b, load_plan(b), run.cfg.accel, policy);
    run.save(res.output, "sim_output.cbtf");
    full = std::move(res.report);
  } else {
    std::optional<PruneMask> mask;
    if (!a.weights.empty()) {
      const WeightBundle b = read_bundle_file(a.weights);
      std::vector<std::string> names;
      for (const auto& l : weighted_layers(cfg))
        if (b.contains(l.name + ".mask")) names.push_back(l.name);
      if (!names.empty()) mask = mask_from_bundle(b, names);
    }
    LatencyOptions opt{a.pruned || mask.has_value(), a.ratio.value_or(run.cfg.prune_ratio), policy,
                       mask ? &*mask : nullptr};
    full = estimate_latency(cfg, run.cfg.accel, opt, run.cfg.grid);
  }
  SimReport rep;
  rep.clock_hz = full.clock_hz;
  for (const auto& s : full.layers)
    if (a.layer == "all" || s.name == a.layer) rep.add(s);
  if (rep.layers.empty()) throw CLI::ValidationError("--layer", "no layer named '" + a.layer + "'");
  rep.finalize();
  std::cout << "policy=" << policy_name(policy) << " layer=" << a.layer << "\n";
  write_sim_report_text(rep, run.cfg.accel, std::cout);
  run.save_text("sim_report.txt", [&](std::ostream& o) {
    o << "policy=" << policy_name(policy) << " layer=" << a.layer << "\n";
    write_sim_report_text(rep, run.cfg.accel, o);
  });
  run.save_text("sim_report.csv", [&](std::ostream& o) { write_sim_report_csv(rep, o); });
}

void cmd_metrics(const Common& c, const std::string& in, const std::string& name) {
  Run run("metrics", c);
  const auto rows = scene_metrics(run, run.load_envelope(in));
  run.save_text(name + ".csv", [&](std::ostream& o) { write_metrics_csv(rows, o); });
  write_metrics_csv(rows, std::cout);
}

fs::path metrics_path(const std::string& p) {
  const fs::path path(p);
  return fs::is_directory(path) ? path / "metrics.csv" : path;
}

void cmd_compare(const Common& c, const std::string& a, const std::string& b) {
  Run run("compare", c);
  const auto rows = compare_metrics(read_metrics_csv(metrics_path(a)), read_metrics_csv(metrics_path(b)));
  run.save_text("comparison.csv", [&](std::ostream& o) { write_comparison_csv(rows, o); });
  write_comparison_csv(rows, std::cout);
}

void cmd_report(const Common& c) {
  Run run("report", c);
  const CapsConfig cfg = run.cfg.caps();
  const auto base = estimate_latency(cfg, run.cfg.accel, non_optimized(), run.cfg.grid);
  const auto opt = estimate_latency(cfg, run.cfg.accel, optimized(run.cfg.prune_ratio), run.cfg.grid);
  run.save_text("report.txt", [&](std::ostream& o) {
    o << "version=" << CAPSBEAM_VERSION << "\nconfig_hash=" << run.hash << "\n";
    o << "params=" << count_params(cfg) << "\nflops_per_frame=" << count_flops(cfg, run.cfg.grid) << "\n";
    o << "grid=" << run.cfg.grid.num_rows << "x" << run.cfg.grid.num_cols << "\n";
    o << "latency_non_optimized_s=" << base.modeled_latency_s << "\n";
    o << "latency_optimized_s=" << opt.modeled_latency_s << "\n";
    o << "gops_non_optimized=" << base.modeled_gops << "\ngops_optimized=" << opt.modeled_gops << "\n";
    o << "metric_domain=" << kMetricDomain << "\n";
    std::vector<fs::path> csvs;
    for (const auto& e : fs::directory_iterator(run.out))
      if (e.path().extension() == ".csv") csvs.push_back(e.path());
    std::sort(csvs.begin(), csvs.end());
    for (const auto& p : csvs) {
      o << "\n[" << p.filename().string() << "]\n";
      std::ifstream f(p);
      o << f.rdbuf();
    }
  });
  std::ifstream f(run.out / "report.txt");
  std::cout << f.rdbuf();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capsbeam: plane-wave ultrasound beamforming pipeline"};
  app.set_version_flag("--version", CAPSBEAM_VERSION);
  app.require_subcommand(1);

  Common common;

  auto* init = app.add_subcommand("init", "write seeded random network weights");
  add_common(init, common);

  auto* synth = app.add_subcommand("synth", "simulate raw channel data for every configured angle");
  add_common(synth, common);

  std::vector<std::string> tofc_in;
  std::optional<double> angle_deg;
  auto* tofc = app.add_subcommand("tofc", "time-of-flight correct raw channel data");
  add_common(tofc, common);
  tofc->add_option("--in", tofc_in, "raw_<k>.cbtf files")->required()->check(CLI::ExistingFile);
  tofc->add_option("--angle-deg", angle_deg, "transmit angle (default: from the raw_<k> index)");

  std::string bf_method, bf_apod = "uniform", bf_base = "das";
  std::vector<std::string> bf_in;
  auto* beamform = app.add_subcommand("beamform", "classical beamforming to an envelope image");
  add_common(beamform, common);
  beamform->add_option("--method", bf_method)->required()->check(CLI::IsMember({"das", "mvdr", "compound"}));
  beamform->add_option("--in", bf_in, "rf volume(s); compound takes one per angle")->required()->check(CLI::ExistingFile);
  beamform->add_option("--apod", bf_apod)->check(CLI::IsMember({"uniform", "hann"}))->capture_default_str();
  beamform->add_option("--base", bf_base, "per-angle beamformer for compound")
      ->check(CLI::IsMember({"das", "mvdr"}))
      ->capture_default_str();

  std::string inf_in, inf_weights;
  bool inf_fixed = false;
  auto* inferc = app.add_subcommand("infer", "capsule network beamforming");
  add_common(inferc, common);
  inferc->add_option("--in", inf_in, "rf volume")->required()->check(CLI::ExistingFile);
  inferc->add_option("--weights", inf_weights, "weight bundle")->required()->check(CLI::ExistingFile);
  inferc->add_flag("--fixed", inf_fixed, "16-bit fixed-point path (bundle must carry scales)");

  PruneArgs pa;
  auto* prune = app.add_subcommand("prune", "structured kernel pruning");
  add_common(prune, common);
  prune->add_option("--weights", pa.weights)->required()->check(CLI::ExistingFile);
  prune->add_option("--method", pa.method)->check(CLI::IsMember({"magnitude", "lakp", "lakp_ml"}));
  prune->add_option("--ratio", pa.ratio)->check(CLI::Range(0.0, 1.0));
  prune->add_option("--r", pa.r, "look-ahead depth")->check(CLI::PositiveNumber);
  prune->add_flag("--search", pa.search, "try --ratios and keep the largest passing the metric gates");
  prune->add_option("--ratios", pa.ratios)->delimiter(',');
  prune->add_option("--in", pa.in, "rf volume used by --search")->check(CLI::ExistingFile);
  prune->add_option("--min-cr-db", pa.min_cr_db);
  prune->add_option("--max-lateral-fwhm-mm", pa.max_lateral_fwhm_mm);

  std::vector<std::string> q_in;
  std::string q_weights;
  auto* quant = app.add_subcommand("quantize", "calibrate power-of-two scales");
  add_common(quant, common);
  quant->add_option("--weights", q_weights)->required()->check(CLI::ExistingFile);
  quant->add_option("--in", q_in, "calibration rf volume(s)")->required()->check(CLI::ExistingFile);

  SimArgs sa;
  auto* sim = app.add_subcommand("sim", "accelerator dataflow model");
  add_common(sim, common);
  sim->add_option("--layer", sa.layer, "layer name, routing, or all")->capture_default_str();
  sim->add_option("--policy", sa.policy)->check(CLI::IsMember({"reload_per_block", "weights_resident"}));
  sim->add_option("--weights", sa.weights, "pruned bundle (mask) or quantized bundle (--functional)")
      ->check(CLI::ExistingFile);
  sim->add_option("--in", sa.in, "rf volume for --functional")->check(CLI::ExistingFile);
  sim->add_flag("--functional", sa.functional, "stream real data through the simulator");
  sim->add_flag("--pruned", sa.pruned, "assume the per-filter pruning quota");
  sim->add_option("--ratio", sa.ratio)->check(CLI::Range(0.0, 1.0));

  std::string m_in, m_name = "metrics";
  auto* metrics = app.add_subcommand("metrics", "image quality metrics on an envelope image");
  add_common(metrics, common);
  metrics->add_option("--in", m_in, "envelope .cbtf")->required()->check(CLI::ExistingFile);
  metrics->add_option("--name", m_name, "output CSV stem")->capture_default_str();

  std::string c_a, c_b;
  auto* comparec = app.add_subcommand("compare", "side-by-side metric table");
  add_common(comparec, common);
  comparec->add_option("--a", c_a, "run dir or metrics CSV")->required()->check(CLI::ExistingPath);
  comparec->add_option("--b", c_b, "run dir or metrics CSV")->required()->check(CLI::ExistingPath);

  auto* report = app.add_subcommand("report", "summary of model accounting and CSVs in --out");
  add_common(report, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*init) cmd_init(common);
    else if (*synth) cmd_synth(common);
    else if (*tofc) cmd_tofc(common, tofc_in, angle_deg);
    else if (*beamform) cmd_beamform(common, bf_method, bf_in, bf_apod, bf_base);
    else if (*inferc) cmd_infer(common, inf_in, inf_weights, inf_fixed);
    else if (*prune) cmd_prune(common, pa);
    else if (*quant) cmd_quantize(common, q_in, q_weights);
    else if (*sim) cmd_sim(common, sa);
    else if (*metrics) cmd_metrics(common, m_in, m_name);
    else if (*comparec) cmd_compare(common, c_a, c_b);
    else if (*report) cmd_report(common);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
