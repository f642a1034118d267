#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capsbeam/error.hpp"

namespace capsbeam {

enum class DType : std::uint8_t { Float32 = 0, Fixed16 = 1 };

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

/// Dense row-major tensor, either float32 or 16-bit fixed point with a
/// power-of-two scale (value = raw * 2^-scale_exp).
class Tensor {
 public:
  Tensor() : Tensor(Shape{1}) {}

  explicit Tensor(Shape dims, DType dtype = DType::Float32, int scale_exp = 0)
      : dims_(std::move(dims)), dtype_(dtype), scale_exp_(scale_exp) {
    validate_dims(dims_);
    if (dtype_ == DType::Float32)
      f32_.assign(element_count(dims_), 0.0f);
    else
      i16_.assign(element_count(dims_), 0);
  }

  static Tensor from_floats(Shape dims, std::vector<float> values) {
    Tensor t(std::move(dims));
    if (values.size() != t.size())
      throw Error(Errc::ShapeMismatch, "payload length " + std::to_string(values.size()) +
                                           " does not match dims " + shape_string(t.dims_));
    t.f32_ = std::move(values);
    return t;
  }

  static Tensor from_fixed(Shape dims, std::vector<std::int16_t> raw, int scale_exp) {
    Tensor t(std::move(dims), DType::Fixed16, scale_exp);
    if (raw.size() != t.size())
      throw Error(Errc::ShapeMismatch, "payload length " + std::to_string(raw.size()) +
                                           " does not match dims " + shape_string(t.dims_));
    t.i16_ = std::move(raw);
    return t;
  }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return dtype_ == DType::Float32 ? f32_.size() : i16_.size(); }
  DType dtype() const noexcept { return dtype_; }
  int scale_exp() const noexcept { return scale_exp_; }
  void set_scale_exp(int f) noexcept { scale_exp_ = f; }

  std::span<float> f32() {
    require(DType::Float32);
    return f32_;
  }
  std::span<const float> f32() const {
    require(DType::Float32);
    return f32_;
  }
  std::span<std::int16_t> i16() {
    require(DType::Fixed16);
    return i16_;
  }
  std::span<const std::int16_t> i16() const {
    require(DType::Fixed16);
    return i16_;
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != dims_.size())
      throw Error(Errc::ShapeMismatch, "index rank mismatch for " + shape_string(dims_));
    std::size_t off = 0, a = 0;
    for (std::size_t i : idx) {
      if (i >= dims_[a]) throw Error(Errc::IndexOutOfRange, "index out of range");
      off = off * dims_[a++] + i;
    }
    return off;
  }

  float& at(std::initializer_list<std::size_t> idx) { return f32()[offset(idx)]; }
  float at(std::initializer_list<std::size_t> idx) const { return f32()[offset(idx)]; }

  /// Float view of either dtype (fixed16 values are dequantized).
  std::vector<float> to_floats() const {
    if (dtype_ == DType::Float32) return f32_;
    std::vector<float> out(i16_.size());
    const double s = std::ldexp(1.0, -scale_exp_);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(i16_[i] * s);
    return out;
  }

  Tensor reshaped(Shape dims) const {
    Tensor t = *this;
    validate_dims(dims);
    if (element_count(dims) != size())
      throw Error(Errc::ShapeMismatch, "cannot reshape " + shape_string(dims_) + " to " + shape_string(dims));
    t.dims_ = std::move(dims);
    return t;
  }

  /// Bitwise equality: same dims, dtype, scale and payload bytes.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.dims_ != b.dims_ || a.dtype_ != b.dtype_ || a.scale_exp_ != b.scale_exp_) return false;
    if (a.dtype_ == DType::Float32)
      return std::memcmp(a.f32_.data(), b.f32_.data(), a.f32_.size() * sizeof(float)) == 0;
    return a.i16_ == b.i16_;
  }

  static std::size_t element_count(const Shape& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) {
      if (d != 0 && n > SIZE_MAX / d) throw Error(Errc::DimOverflow, "element count overflows");
      n *= d;
    }
    return n;
  }

 private:
  static void validate_dims(const Shape& dims) {
    if (dims.empty()) throw Error(Errc::ShapeMismatch, "tensor needs at least one dim");
    for (std::size_t d : dims)
      if (d == 0) throw Error(Errc::ShapeMismatch, "zero extent in " + shape_string(dims));
  }

  void require(DType want) const {
    if (dtype_ != want)
      throw Error(Errc::UnknownDtype, want == DType::Float32 ? "tensor is not float32" : "tensor is not fixed16");
  }

  Shape dims_;
  DType dtype_;
  int scale_exp_;
  std::vector<float> f32_;
  std::vector<std::int16_t> i16_;
};

}  // namespace capsbeam
