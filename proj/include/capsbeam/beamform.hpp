#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include "capsbeam/geometry.hpp"
#include "capsbeam/parallel.hpp"

namespace capsbeam {

// ---------------------------------------------------------------- apodization

inline Tensor uniform_apodization(std::size_t n) { return Tensor::from_floats({n}, std::vector<float>(n, 1.0f)); }

/// Hann window without the zero end points.
inline Tensor hann_apodization(std::size_t n) {
  std::vector<float> w(n);
  for (std::size_t e = 0; e < n; ++e)
    w[e] = static_cast<float>(0.5 - 0.5 * std::cos(2 * std::numbers::pi * (e + 1.0) / (n + 1.0)));
  return Tensor::from_floats({n}, std::move(w));
}

// ---------------------------------------------------------------- DAS

/// Normalized apodized sum across the channel axis.
inline BeamformedImage das(const RfVolume& rf, const Tensor& apodization) {
  rf.validate();
  if (apodization.size() != rf.num_channels)
    throw Error(Errc::ShapeMismatch, "apodization length must equal the channel count");
  const auto w = apodization.to_floats();
  double wsum = 0, wabs = 0;
  for (float v : w) {
    wsum += v;
    wabs += std::abs(v);
  }
  if (wabs == 0 || wsum == 0) throw Error(Errc::ZeroWeightSum, "apodization weights sum to zero");
  BeamformedImage img(rf.grid);
  auto out = img.values.f32();
  auto in = rf.samples.f32();
  const std::size_t n = rf.num_channels;
  parallel_for(out.size(), [&](std::size_t p) {
    const float* x = &in[p * n];
    double acc = 0;
    for (std::size_t e = 0; e < n; ++e) acc += w[e] * static_cast<double>(x[e]);
    out[p] = static_cast<float>(acc / wsum);
  });
  return img;
}

// ---------------------------------------------------------------- MVDR

struct MvdrParams {
  std::size_t subarray_len = 48;
  std::size_t temporal_half_window = 7;
  double diagonal_loading = 0.01;

  void validate(std::size_t num_channels) const {
    if (subarray_len < 1 || subarray_len > num_channels)
      throw Error(Errc::InvalidConfig, "subarray length must lie in [1, num_channels]");
    if (!(diagonal_loading > 0)) throw Error(Errc::InvalidConfig, "diagonal loading must be positive");
  }
};

struct MvdrResult {
  BeamformedImage image;
  double max_constraint_error = 0;  // max over pixels of |w^T a - 1|
};

namespace detail {

/// Minimum-variance weights for covariance r with all-ones steering vector.
/// Returns false when r is singular even after loading.
inline bool mvdr_weights(const Eigen::MatrixXd& r, Eigen::VectorXd& w) {
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(r.rows());
  Eigen::LLT<Eigen::MatrixXd> llt(r);
  Eigen::VectorXd y;
  if (llt.info() == Eigen::Success) {
    y = llt.solve(ones);
  } else {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(r);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return false;
    y = ldlt.solve(ones);
  }
  const double denom = ones.dot(y);
  if (!std::isfinite(denom) || denom == 0) return false;
  w = y / denom;
  return true;
}

}  // namespace detail

/// Spatially smoothed (subarray) and temporally averaged MVDR on real ToFC data.
///
/// Per pixel the covariance is the mean of outer products of every length-L
/// subarray over the 2K+1 rows centred on it (row indices clamped at the
/// image edges, so every pixel uses exactly 2K+1 snapshots). Diagonal loading
/// adds delta * trace(R) / L. The output applies the weights to the mean
/// subarray of the centre row.
inline MvdrResult mvdr_detailed(const RfVolume& rf, const MvdrParams& params) {
  rf.validate();
  params.validate(rf.num_channels);
  const std::size_t n = rf.num_channels, len = params.subarray_len, groups = n - len + 1;
  const std::size_t rows = rf.grid.num_rows, cols = rf.grid.num_cols;
  const auto k_half = static_cast<long>(params.temporal_half_window);
  const double norm = 1.0 / (static_cast<double>(groups) * static_cast<double>(2 * k_half + 1));
  auto in = rf.samples.f32();
  MvdrResult result{BeamformedImage(rf.grid), 0.0};
  auto out = result.image.values.f32();
  std::vector<double> col_error(cols, 0.0);
  std::vector<int> col_failed(cols, 0);

  parallel_for(cols, [&](std::size_t c) {
    auto snapshot = [&](long r) {
      r = std::clamp(r, 0L, static_cast<long>(rows) - 1);
      Eigen::VectorXd x(n);
      const float* p = &in[(static_cast<std::size_t>(r) * cols + c) * n];
      for (std::size_t e = 0; e < n; ++e) x[e] = p[e];
      return x;
    };
    // Sliding sum of snapshot outer products. Removing a snapshot leaves
    // roundoff behind, so the sum is rebuilt exactly every kRebuild rows,
    // when its trace falls far below the largest trace since the last
    // rebuild, and zeroed whenever the window holds only zero snapshots.
    constexpr std::size_t kRebuild = 32;
    std::vector<std::uint8_t> zero_row(rows);
    for (std::size_t row = 0; row < rows; ++row) {
      const float* p = &in[(row * cols + c) * n];
      zero_row[row] = std::all_of(p, p + n, [](float v) { return v == 0.0f; });
    }
    Eigen::MatrixXd s(n, n);
    double trace_peak = 0;
    auto rebuild = [&](long centre) {
      s.setZero();
      for (long k = centre - k_half; k <= centre + k_half; ++k) s.selfadjointView<Eigen::Lower>().rankUpdate(snapshot(k));
      trace_peak = s.trace();
    };
    auto window_zero = [&](long centre) {
      for (long k = centre - k_half; k <= centre + k_half; ++k)
        if (!zero_row[static_cast<std::size_t>(std::clamp(k, 0L, static_cast<long>(rows) - 1))]) return false;
      return true;
    };
    rebuild(0);
    Eigen::MatrixXd r(len, len), prefix(len, n + 1);
    Eigen::VectorXd w;
    for (std::size_t row = 0; row < rows; ++row) {
      const auto ir = static_cast<long>(row);
      if (window_zero(ir)) {
        s.setZero();
        trace_peak = 0;
        out[row * cols + c] = 0.0f;
        continue;
      }
      if (row > 0) {
        if (row % kRebuild == 0) {
          rebuild(ir);
        } else {
          s.selfadjointView<Eigen::Lower>().rankUpdate(snapshot(ir + k_half), 1.0);
          s.selfadjointView<Eigen::Lower>().rankUpdate(snapshot(ir - 1 - k_half), -1.0);
          const double t = s.trace();
          if (t < 1e-6 * trace_peak)
            rebuild(ir);
          else
            trace_peak = std::max(trace_peak, t);
        }
      }
      // prefix(d, i): sum of s(j + d, j) for j < i  (lower triangle diagonals)
      for (std::size_t d = 0; d < len; ++d) {
        prefix(d, 0) = 0;
        for (std::size_t i = 0; i + d < n; ++i) prefix(d, i + 1) = prefix(d, i) + s(i + d, i);
      }
      for (std::size_t a = 0; a < len; ++a)
        for (std::size_t d = 0; a + d < len; ++d) {
          const double v = (prefix(d, a + groups) - prefix(d, a)) * norm;
          r(a + d, a) = v;
          r(a, a + d) = v;
        }
      const double trace = r.trace();
      const float* x = &in[(row * cols + c) * n];
      double out_v = 0;
      if (trace > 0) {
        r.diagonal().array() += params.diagonal_loading * trace / static_cast<double>(len);
        if (!detail::mvdr_weights(r, w)) {
          col_failed[c] = 1;
          continue;
        }
        col_error[c] = std::max(col_error[c], std::abs(w.sum() - 1.0));
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t e = 0; e < len; ++e) out_v += w[e] * x[g + e];
        out_v /= static_cast<double>(groups);
      }
      out[row * cols + c] = static_cast<float>(out_v);
    }
  });
  for (std::size_t c = 0; c < cols; ++c) {
    if (col_failed[c]) throw Error(Errc::SingularCovariance, "covariance stayed singular after diagonal loading");
    result.max_constraint_error = std::max(result.max_constraint_error, col_error[c]);
  }
  return result;
}

inline BeamformedImage mvdr(const RfVolume& rf, const MvdrParams& params) { return mvdr_detailed(rf, params).image; }

// ---------------------------------------------------------------- compounding

inline BeamformedImage compound(const std::vector<BeamformedImage>& images) {
  if (images.empty()) throw Error(Errc::EmptyList, "nothing to compound");
  const PixelGrid& g = images.front().grid;
  for (const auto& im : images)
    if (!(im.grid == g)) throw Error(Errc::GridMismatch, "compounded images must share a grid");
  BeamformedImage out(g);
  auto o = out.values.f32();
  std::vector<double> acc(o.size(), 0.0);
  for (const auto& im : images) {
    auto v = im.values.f32();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += v[k];
  }
  for (std::size_t k = 0; k < acc.size(); ++k) o[k] = static_cast<float>(acc[k] / static_cast<double>(images.size()));
  return out;
}

// ---------------------------------------------------------------- envelope

/// Analytic signal along depth for every column. The FFT length is the next
/// power of two >= rows (zero padded), so samples near either end carry a
/// small edge error.
inline EnvelopeImage envelope(const BeamformedImage& img) {
  const std::size_t rows = img.grid.num_rows, cols = img.grid.num_cols;
  if (rows < 4) throw Error(Errc::ShapeMismatch, "envelope needs at least 4 rows");
  std::size_t nfft = 1;
  while (nfft < rows) nfft <<= 1;
  EnvelopeImage env(img.grid);
  auto in = img.values.f32();
  auto iq_i = env.i_part.f32();
  auto iq_q = env.q_part.f32();
  parallel_for(cols, [&](std::size_t c) {
    Eigen::FFT<double> fft;
    std::vector<std::complex<double>> x(nfft), spec;
    for (std::size_t r = 0; r < rows; ++r) x[r] = in[r * cols + c];
    fft.fwd(spec, x);
    for (std::size_t k = 1; k < nfft / 2; ++k) spec[k] *= 2.0;
    for (std::size_t k = nfft / 2 + 1; k < nfft; ++k) spec[k] = 0.0;
    fft.inv(x, spec);
    for (std::size_t r = 0; r < rows; ++r) {
      iq_i[r * cols + c] = in[r * cols + c];
      iq_q[r * cols + c] = static_cast<float>(x[r].imag());
    }
  });
  return env;
}

/// 20 log10(mag / max mag), clamped to [-dynamic_range_db, 0].
inline Tensor log_compress(const EnvelopeImage& env, double dynamic_range_db) {
  if (!(dynamic_range_db > 0)) throw Error(Errc::InvalidConfig, "dynamic range must be positive");
  const auto mag = env.magnitudes();
  float peak = 0;
  for (float m : mag) peak = std::max(peak, m);
  if (peak <= 0) throw Error(Errc::AllZeroImage, "envelope is zero everywhere");
  Tensor out(Shape{env.rows(), env.cols()});
  auto o = out.f32();
  for (std::size_t k = 0; k < mag.size(); ++k) {
    const double db = mag[k] > 0 ? 20.0 * std::log10(static_cast<double>(mag[k]) / peak) : -dynamic_range_db;
    o[k] = static_cast<float>(std::clamp(db, -dynamic_range_db, 0.0));
  }
  return out;
}

/// Binary PGM (P5), linear map [-range, 0] dB -> [0, 255].
inline void write_pgm(const Tensor& db_image, double dynamic_range_db, const std::filesystem::path& path) {
  if (db_image.rank() != 2) throw Error(Errc::ShapeMismatch, "pgm export needs a 2-D image");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot create " + path.string());
  out << "P5\n" << db_image.dim(1) << ' ' << db_image.dim(0) << "\n255\n";
  for (float v : db_image.f32()) {
    const double t = std::clamp((v + dynamic_range_db) / dynamic_range_db, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
  }
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

}  // namespace capsbeam
