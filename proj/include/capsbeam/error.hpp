#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace capsbeam {

enum class Errc {
  BadMagic,
  TruncatedFile,
  UnknownDtype,
  DimOverflow,
  IoFailure,
  InvalidConfig,
  OutOfField,
  ZeroWeightSum,
  SingularCovariance,
  GridMismatch,
  EmptyList,
  AllZeroImage,
  ShapeMismatch,
  MissingWeight,
  IndexOutOfRange,
  RatioOutOfRange,
  MaskMismatch,
  EmptyCalibration,
  MissingScale,
  BramOverflow,
  NoPeak,
  NoCrossing,
  EmptyRegion,
  ZeroMean,
  ZeroVariance,
  DepthOutOfRange,
  MissingMetrics,
  RegionMismatch,
};

constexpr std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::BadMagic: return "BadMagic";
    case Errc::TruncatedFile: return "TruncatedFile";
    case Errc::UnknownDtype: return "UnknownDtype";
    case Errc::DimOverflow: return "DimOverflow";
    case Errc::IoFailure: return "IoFailure";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::OutOfField: return "OutOfField";
    case Errc::ZeroWeightSum: return "ZeroWeightSum";
    case Errc::SingularCovariance: return "SingularCovariance";
    case Errc::GridMismatch: return "GridMismatch";
    case Errc::EmptyList: return "EmptyList";
    case Errc::AllZeroImage: return "AllZeroImage";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::MissingWeight: return "MissingWeight";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::RatioOutOfRange: return "RatioOutOfRange";
    case Errc::MaskMismatch: return "MaskMismatch";
    case Errc::EmptyCalibration: return "EmptyCalibration";
    case Errc::MissingScale: return "MissingScale";
    case Errc::BramOverflow: return "BramOverflow";
    case Errc::NoPeak: return "NoPeak";
    case Errc::NoCrossing: return "NoCrossing";
    case Errc::EmptyRegion: return "EmptyRegion";
    case Errc::ZeroMean: return "ZeroMean";
    case Errc::ZeroVariance: return "ZeroVariance";
    case Errc::DepthOutOfRange: return "DepthOutOfRange";
    case Errc::MissingMetrics: return "MissingMetrics";
    case Errc::RegionMismatch: return "RegionMismatch";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace capsbeam
