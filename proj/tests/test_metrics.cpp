#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "capsbeam/metrics.hpp"
#include "test_util.hpp"

using namespace capsbeam;

namespace {

PixelGrid small_grid(std::size_t rows = 40, std::size_t cols = 30) {
  PixelGrid g;
  g.num_rows = rows;
  g.num_cols = cols;
  g.row_spacing_m = 1e-4;
  g.col_spacing_m = 1e-4;
  g.depth_origin_m = 1e-3;
  return g;
}

EnvelopeImage image_from(const PixelGrid& g, const std::function<double(std::size_t, std::size_t)>& f) {
  EnvelopeImage e(g);
  for (std::size_t r = 0; r < g.num_rows; ++r)
    for (std::size_t c = 0; c < g.num_cols; ++c) e.i_part.f32()[r * g.num_cols + c] = static_cast<float>(f(r, c));
  return e;
}

RegionSpec rect(const std::string& id, RegionRole role, double x, double z, double hw, double hh) {
  return {id, RegionKind::Rectangle, role, x, z, 0, hw, hh};
}

}  // namespace

TEST(Fwhm, TriangleIsOneMillimetre) {
  std::vector<double> p(21);
  for (int k = 0; k <= 20; ++k) p[k] = 1.0 - std::abs(k - 10) / 10.0;
  EXPECT_NEAR(fwhm(p, 0.1e-3), 1.0e-3, 1e-15);
}

TEST(Fwhm, GaussianClosedForm) {
  std::vector<double> p(81);
  for (int k = 0; k <= 80; ++k) p[k] = std::exp(-(k - 40.0) * (k - 40.0) / (2 * 16.0));
  EXPECT_NEAR(fwhm(p, 1.0), 2 * 4 * std::sqrt(2 * std::numbers::ln2), 0.1);
}

TEST(Fwhm, PlateauIsBracketed) {
  const std::vector<double> p{0, 0.2, 1, 1, 0.2, 0};
  EXPECT_GE(fwhm(p, 1.0), 1.0);
}

TEST(Fwhm, ScaleAndReversalInvariant) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 0.4);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(31);
    for (auto& v : p) v = u(rng);
    p[5 + rng() % 20] = 1.0;
    const double w = fwhm(p, 1.0);
    std::vector<double> scaled(p), rev(p.rbegin(), p.rend());
    for (auto& v : scaled) v *= 7.25;
    EXPECT_NEAR(fwhm(scaled, 1.0), w, 1e-12);
    EXPECT_NEAR(fwhm(rev, 1.0), w, 1e-12);
    EXPECT_GT(w, 0);
  }
}

TEST(Fwhm, Errors) {
  expect_errc([] { fwhm(std::vector<double>{0, 0, 0}, 1.0); }, Errc::NoPeak);
  expect_errc([] { fwhm(std::vector<double>{1, 0.9, 0.2}, 1.0); }, Errc::NoCrossing);
  expect_errc([] { fwhm(std::vector<double>{0.2, 0.9, 1}, 1.0); }, Errc::NoCrossing);
}

TEST(Contrast, CrExamples) {
  const std::vector<double> a{1, 2, 3}, b{10, 20, 30};
  EXPECT_NEAR(contrast_ratio(a, a), 0.0, 1e-12);
  EXPECT_NEAR(contrast_ratio(a, b), 20.0, 1e-12);
  EXPECT_NEAR(contrast_ratio(b, a), 20.0, 1e-12);
  expect_errc([&] { contrast_ratio(std::vector<double>{0, 0}, b); }, Errc::ZeroMean);
  expect_errc([&] { contrast_ratio(std::vector<double>{}, b); }, Errc::EmptyRegion);
}

TEST(Contrast, CnrExamples) {
  // means 3 apart, each population sigma = 3*sqrt(0.5)
  const double s = 3 * std::sqrt(0.5);
  const std::vector<double> in{5 - s, 5 + s}, out{2 - s, 2 + s};
  EXPECT_NEAR(cnr(in, out), 1.0, 1e-12);
  EXPECT_NEAR(cnr(in, in), 0.0, 1e-12);
  expect_errc([] { cnr(std::vector<double>{1, 1}, std::vector<double>{2, 2}); }, Errc::ZeroVariance);
}

TEST(Contrast, GcnrExamples) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> a(200000), b(200000);
  for (auto& v : a) v = u(rng);
  for (auto& v : b) v = u(rng) + 0.5;
  EXPECT_NEAR(gcnr(a, b), 0.5, 0.03);
  EXPECT_NEAR(gcnr(a, a), 0.0, 1e-12);
  const std::vector<double> lo{0, 0.1, 0.2}, hi{5, 6, 7};
  EXPECT_NEAR(gcnr(lo, hi), 1.0, 1e-12);
  expect_errc([&] { gcnr(lo, hi, 1); }, Errc::InvalidConfig);
  expect_errc([&] { gcnr(lo, std::vector<double>{}); }, Errc::EmptyRegion);
}

TEST(Contrast, GcnrBoundsAndInvariances) {
  std::mt19937_64 rng(3);
  std::exponential_distribution<double> e(1.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(1 + rng() % 300), b(1 + rng() % 300);
    const double sa = 0.2 + (rng() % 100) / 20.0;
    for (auto& v : a) v = sa * e(rng);
    for (auto& v : b) v = e(rng);
    const double g = gcnr(a, b);
    ASSERT_GE(g, 0.0);
    ASSERT_LE(g, 1.0);
    // affine map under linear binning
    std::vector<double> a2(a), b2(b);
    for (auto& v : a2) v = 3.0 * v + 2.0;
    for (auto& v : b2) v = 3.0 * v + 2.0;
    EXPECT_NEAR(gcnr(a2, b2), g, 1e-9);
    // any strictly increasing map under rank binning
    const double gr = gcnr(a, b, 256, GcnrBinning::Rank);
    for (auto& v : a2) v = std::log1p(std::pow(v, 3));
    for (auto& v : b2) v = std::log1p(std::pow(v, 3));
    EXPECT_NEAR(gcnr(a2, b2, 256, GcnrBinning::Rank), gr, 1e-12);
  }
}

TEST(Contrast, ScaleInvarianceOnImages) {
  const PixelGrid g = small_grid();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::vector<double> vals(g.num_rows * g.num_cols);
  for (auto& v : vals) v = u(rng);
  const auto in = rect("in", RegionRole::TargetIn, g.x(7), g.z(20), 0.5e-3, 0.5e-3);
  const auto out = rect("out", RegionRole::BackgroundOut, g.x(22), g.z(20), 0.5e-3, 0.5e-3);
  const auto e1 = image_from(g, [&](std::size_t r, std::size_t c) { return vals[r * g.num_cols + c] * (c < 15 ? 0.3 : 1.0); });
  for (const double alpha : {4.0, 42.0}) {
    const auto e2 = image_from(g, [&](std::size_t r, std::size_t c) {
      return alpha * vals[r * g.num_cols + c] * (c < 15 ? 0.3 : 1.0);
    });
    // a power of two scales the stored floats exactly; otherwise float rounding remains
    const double tol = alpha == 4.0 ? 1e-12 : 1e-5;
    EXPECT_NEAR(contrast_ratio(e1, in, out), contrast_ratio(e2, in, out), tol);
    EXPECT_NEAR(cnr(e1, in, out), cnr(e2, in, out), tol);
  }
  EXPECT_GT(contrast_ratio(e1, in, out), 5.0);
}

TEST(Regions, MembershipAndErrors) {
  const PixelGrid g = small_grid();
  RegionSpec c{"c", RegionKind::Circle, RegionRole::TargetIn, g.x(15), g.z(20), 0.25e-3};
  EXPECT_EQ(region_pixels(g, c).size(), 21u);  // lattice points within radius 2.5 px
  RegionSpec far = c;
  far.center_x_m = 1.0;
  expect_errc([&] { far.validate(g); }, Errc::OutOfField);
  RegionSpec tiny{"t", RegionKind::Circle, RegionRole::TargetIn, g.x(15) + 0.5e-4, g.z(20) + 0.5e-4, 1e-6};
  const auto env = image_from(g, [](auto, auto) { return 1.0; });
  expect_errc([&] { region_values(env, tiny); }, Errc::EmptyRegion);
  const auto bg = rect("bg", RegionRole::BackgroundOut, g.x(15), g.z(20), 1e-3, 1e-3);
  expect_errc([&] { compute_metrics(env, {c, bg}); }, Errc::InvalidConfig);
  expect_errc([] { parse_region_kind("ellipse"); }, Errc::InvalidConfig);
}

TEST(Profile, LateralProfile) {
  const PixelGrid g = small_grid();
  const auto flat = image_from(g, [](auto, auto) { return 3.0; });
  for (double v : lateral_profile(flat, g.z(10))) EXPECT_NEAR(v, 0.0, 1e-9);
  const auto point = image_from(g, [](std::size_t r, std::size_t c) {
    return std::exp(-0.5 * ((r - 12.0) * (r - 12.0) + (c - 17.0) * (c - 17.0)));
  });
  const auto p = lateral_profile(point, g.z(12) + 0.3 * g.row_spacing_m);
  EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(), 17);
  EXPECT_NEAR(p[17], 0.0, 1e-9);
  EXPECT_NEAR(p[18], 20 * std::log10(std::exp(-0.5)), 1e-5);
  expect_errc([&] { lateral_profile(flat, 0.0); }, Errc::DepthOutOfRange);
  expect_errc([&] { lateral_profile(flat, g.z(g.num_rows - 1) + g.row_spacing_m); }, Errc::DepthOutOfRange);
}

TEST(Resolution, MeasuresKnownGaussianSpot) {
  PixelGrid g = small_grid(60, 50);
  const auto env = image_from(g, [](std::size_t r, std::size_t c) {
    return std::exp(-(r - 30.0) * (r - 30.0) / (2 * 9.0)) * std::exp(-(c - 20.0) * (c - 20.0) / (2 * 4.0));
  });
  const auto rep = measure_resolution(env, {{g.x(21), g.z(29)}}, 0.5e-3);
  ASSERT_EQ(rep.points.size(), 1u);
  EXPECT_EQ(rep.points[0].peak_row, 30u);
  EXPECT_EQ(rep.points[0].peak_col, 20u);
  EXPECT_NEAR(rep.points[0].axial_fwhm_mm, 2 * 3 * std::sqrt(2 * std::numbers::ln2) * 0.1, 0.01);
  EXPECT_NEAR(rep.points[0].lateral_fwhm_mm, 2 * 2 * std::sqrt(2 * std::numbers::ln2) * 0.1, 0.01);
}

TEST(Csv, RoundTripAndCompare) {
  const std::vector<MetricRow> a{{"cr", 12.5, "dB", "cyst|bg"}, {"gcnr", 0.75, "1", "cyst|bg"}};
  std::vector<MetricRow> b = a;
  b[0].value = 15.0;
  TempDir dir;
  for (const auto& [name, rows] : {std::pair{"a.csv", a}, std::pair{"b.csv", b}}) {
    std::ofstream f(dir / name);
    write_metrics_csv(rows, f);
  }
  const auto ra = read_metrics_csv(dir / "a.csv");
  ASSERT_EQ(ra.size(), 2u);
  EXPECT_EQ(ra[0].metric, "cr");
  EXPECT_DOUBLE_EQ(ra[0].value, 12.5);
  EXPECT_EQ(ra[1].regions, "cyst|bg");
  for (const auto& r : compare_metrics(ra, ra)) EXPECT_EQ(r.delta, 0.0);
  const auto cmp = compare_metrics(ra, read_metrics_csv(dir / "b.csv"));
  EXPECT_DOUBLE_EQ(cmp[0].delta, 2.5);
  EXPECT_DOUBLE_EQ(cmp[0].pct_change, 20.0);
  expect_errc([&] { read_metrics_csv(dir / "missing.csv"); }, Errc::MissingMetrics);
  auto c = a;
  c[1].regions = "other|bg";
  expect_errc([&] { compare_metrics(a, c); }, Errc::RegionMismatch);
  auto d = a;
  d.pop_back();
  d.push_back({"cnr", 1.0, "1", "cyst|bg"});
  expect_errc([&] { compare_metrics(a, d); }, Errc::MissingMetrics);
}
