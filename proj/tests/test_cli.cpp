#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "capsbeam/io.hpp"
#include "capsbeam/metrics.hpp"
#include "capsbeam/pipeline_config.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(CAPSBEAM_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.output.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string config(const std::string& name) { return std::string(CAPSBEAM_SOURCE_DIR) + "/configs/" + name; }

std::string read_all(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace

TEST(Cli, UsageErrorsExitTwoAndNameTheFlag) {
  EXPECT_EQ(run("").code, 2);
  const auto unknown = run("sim --bogus-flag 3");
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.output.find("--bogus-flag"), std::string::npos) << unknown.output;
  const auto method = run("beamform --method fancy --in " + config("toy.ini"));
  EXPECT_EQ(method.code, 2);
  EXPECT_NE(method.output.find("--method"), std::string::npos) << method.output;
  EXPECT_EQ(run("prune").code, 2);
  EXPECT_EQ(run("--version").code, 0);
}

TEST(Cli, RuntimeErrorsExitOne) {
  TempDir dir;
  const auto out = dir.path().string();
  // raw data written for an 8-element probe cannot be corrected with a 128-element config
  ASSERT_EQ(run("synth --config " + config("toy.ini") + " --out " + out).code, 0);
  const auto r = run("tofc --in " + out + "/raw_0.cbtf --out " + out);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("ShapeMismatch"), std::string::npos) << r.output;
  std::ofstream(dir / "bad.ini") << "[probe]\nnum_elementz = 3\n";
  EXPECT_EQ(run("report --config " + (dir / "bad.ini").string() + " --out " + out).code, 1);
}

TEST(Cli, SimConv1ReloadPerBlockTransactions) {
  TempDir dir;
  const auto r = run("sim --layer conv1 --policy reload_per_block --config " + config("default.ini") + " --out " +
                     dir.path().string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("\nexternal_word_transactions=60293120\n"), std::string::npos) << r.output;
  EXPECT_TRUE(fs::exists(dir / "sim_report.csv"));
  const auto resident = run("sim --layer conv1 --policy weights_resident --out " + dir.path().string());
  EXPECT_NE(resident.output.find("\nexternal_word_transactions=6176768\n"), std::string::npos) << resident.output;
}

TEST(Cli, BeamformWritesEnvelopeImageAndManifest) {
  TempDir dir;
  const auto out = dir.path().string(), cfg = config("toy.ini");
  ASSERT_EQ(run("synth --config " + cfg + " --out " + out).code, 0);
  ASSERT_EQ(run("tofc --config " + cfg + " --in " + out + "/raw_1.cbtf --out " + out).code, 0);
  const auto r = run("beamform --method das --config " + cfg + " --in " + out + "/rf_1.cbtf --out " + out);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto env = capsbeam::read_tensor_file(dir / "das.cbtf");
  EXPECT_EQ(env.dims(), (capsbeam::Shape{16, 16, 2}));
  EXPECT_EQ(read_all(dir / "das.pgm").substr(0, 2), "P5");
  const std::string manifest = read_all(dir / "manifest.txt");
  for (const char* artifact : {"raw_0.cbtf", "raw_2.cbtf", "rf_1.cbtf", "das.cbtf", "das.pgm"})
    EXPECT_NE(manifest.find(std::string("artifact=") + artifact + " version="), std::string::npos) << artifact;
  EXPECT_NE(manifest.find("config_hash=" + capsbeam::config_hash(cfg)), std::string::npos);
}

TEST(Cli, PruneDefaultNetworkAtEightyFivePercent) {
  TempDir dir;
  const auto out = dir.path().string();
  ASSERT_EQ(run("init --out " + out).code, 0);
  const auto r = run("prune --method lakp_ml --r 2 --ratio 0.85 --weights " + out + "/weights.cbwb --out " + out);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto pos = r.output.find("ratio_achieved=");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_NEAR(std::stod(r.output.substr(pos + 15)), 0.85, 0.01);
  EXPECT_TRUE(fs::exists(dir / "pruned.cbwb"));
  EXPECT_NE(read_all(dir / "prune_report.csv").find("ratio_achieved"), std::string::npos);
}

TEST(Cli, SeedControlsSynthesis) {
  TempDir a, b, c;
  const auto cfg = config("toy.ini");
  ASSERT_EQ(run("synth --seed 3 --config " + cfg + " --out " + a.path().string()).code, 0);
  ASSERT_EQ(run("synth --seed 3 --config " + cfg + " --out " + b.path().string()).code, 0);
  ASSERT_EQ(run("synth --seed 4 --config " + cfg + " --out " + c.path().string()).code, 0);
  EXPECT_EQ(read_all(a / "raw_0.cbtf"), read_all(b / "raw_0.cbtf"));
  EXPECT_NE(read_all(a / "raw_0.cbtf"), read_all(c / "raw_0.cbtf"));
  EXPECT_EQ(read_all(a / "manifest.txt"), read_all(b / "manifest.txt"));
}

TEST(Cli, CompareIdenticalRunsHasZeroDeltas) {
  TempDir dir;
  const auto out = dir.path().string(), cfg = config("toy.ini");
  ASSERT_EQ(run("synth --config " + cfg + " --out " + out).code, 0);
  ASSERT_EQ(run("tofc --config " + cfg + " --in " + out + "/raw_1.cbtf --out " + out).code, 0);
  ASSERT_EQ(run("beamform --method das --config " + cfg + " --in " + out + "/rf_1.cbtf --out " + out).code, 0);
  ASSERT_EQ(run("metrics --config " + cfg + " --in " + out + "/das.cbtf --out " + out).code, 0);
  const auto r = run("compare --a " + out + " --b " + out + "/metrics.csv --out " + out);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = capsbeam::read_metrics_csv(dir / "metrics.csv");
  EXPECT_EQ(rows.size(), 3u);
  std::istringstream table(read_all(dir / "comparison.csv"));
  std::string line;
  std::getline(table, line);  // domain
  std::getline(table, line);  // header
  int n = 0;
  while (std::getline(table, line)) {
    ++n;
    EXPECT_NE(line.find(",0,0"), std::string::npos) << line;
  }
  EXPECT_EQ(n, 3);
}
