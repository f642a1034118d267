#pragma once

// Binary tensor (CBTF) and weight-bundle (CBWB) files. All integers are
// little-endian regardless of host order.
//
//   CBTF: "CBTF" | u32 version=1 | u8 dtype | i8 scale_exp | u8 ndim | u8 reserved[2]
//         | u64 dims[ndim] | payload (float32 or int16)
//   CBWB: "CBWB" | u32 version=1 | u32 entry_count
//         | { u16 name_len | name bytes | CBTF record } * entry_count

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "capsbeam/tensor.hpp"

namespace capsbeam {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kTensorHeaderFixedBytes = 13;

/// Named tensors plus string metadata. Names are unique (map keys).
struct WeightBundle {
  std::map<std::string, Tensor> entries;
  std::map<std::string, std::string> metadata;

  bool contains(const std::string& name) const { return entries.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw Error(Errc::MissingWeight, "bundle has no entry '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) throw Error(Errc::MissingWeight, "bundle has no entry '" + name + "'");
    return it->second;
  }
  void set(const std::string& name, Tensor t) { entries.insert_or_assign(name, std::move(t)); }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  const std::vector<std::uint8_t>& data() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw Error(Errc::TruncatedFile, "unexpected end of file");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline void put_tensor(ByteWriter& w, const Tensor& t) {
  w.bytes("CBTF", 4);
  w.u32(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(t.dtype()));
  w.u8(static_cast<std::uint8_t>(static_cast<std::int8_t>(t.scale_exp())));
  w.u8(static_cast<std::uint8_t>(t.rank()));
  w.u8(0);
  w.u8(0);
  for (std::size_t d : t.dims()) w.u64(d);
  if (t.dtype() == DType::Float32) {
    for (float v : t.f32()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      w.u32(bits);
    }
  } else {
    for (std::int16_t v : t.i16()) w.u16(static_cast<std::uint16_t>(v));
  }
}

inline Tensor get_tensor(ByteReader& r) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "CBTF", 4) != 0) throw Error(Errc::BadMagic, "tensor record lacks CBTF magic");
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw Error(Errc::UnknownDtype, "unsupported tensor version " + std::to_string(version));
  const std::uint8_t dtype = r.u8();
  if (dtype > 1) throw Error(Errc::UnknownDtype, "dtype byte " + std::to_string(dtype));
  const int scale = static_cast<std::int8_t>(r.u8());
  const std::uint8_t ndim = r.u8();
  r.u8();
  r.u8();
  if (ndim == 0) throw Error(Errc::DimOverflow, "tensor record has zero dims");
  Shape dims(ndim);
  std::uint64_t count = 1;
  const std::size_t elem = dtype == 0 ? 4 : 2;
  for (auto& d : dims) {
    const std::uint64_t v = r.u64();
    if (v == 0) throw Error(Errc::DimOverflow, "zero extent");
    if (count > std::numeric_limits<std::uint64_t>::max() / v) throw Error(Errc::DimOverflow, "dims product overflows");
    count *= v;
    if (count > std::numeric_limits<std::size_t>::max() / elem) throw Error(Errc::DimOverflow, "payload too large");
    d = static_cast<std::size_t>(v);
  }
  if (count * elem > r.remaining()) throw Error(Errc::TruncatedFile, "payload shorter than dims imply");
  if (dtype == 0) {
    std::vector<float> vals(count);
    for (auto& v : vals) {
      const std::uint32_t bits = r.u32();
      std::memcpy(&v, &bits, 4);
    }
    return Tensor::from_floats(std::move(dims), std::move(vals));
  }
  std::vector<std::int16_t> raw(count);
  for (auto& v : raw) v = static_cast<std::int16_t>(r.u16());
  return Tensor::from_fixed(std::move(dims), std::move(raw), scale);
}

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spill(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoFailure, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoFailure, "write failed for " + path.string());
}

inline constexpr const char* kMetaPrefix = "meta/";

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  detail::ByteWriter w;
  detail::put_tensor(w, t);
  return w.data();
}

inline void write_tensor_file(const Tensor& t, const std::filesystem::path& path) {
  detail::spill(path, encode_tensor(t));
}

inline Tensor read_tensor_file(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  detail::ByteReader r(bytes);
  return detail::get_tensor(r);
}

// Metadata travels as "meta/<key>" entries holding UTF-8 bytes in a 1-D
// fixed16 tensor with scale 0.
inline std::vector<std::uint8_t> encode_bundle(const WeightBundle& b) {
  detail::ByteWriter w;
  w.bytes("CBWB", 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(b.entries.size() + b.metadata.size()));
  auto put_name = [&](const std::string& name) {
    if (name.size() > 0xFFFF) throw Error(Errc::IoFailure, "entry name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
  };
  for (const auto& [name, t] : b.entries) {
    put_name(name);
    detail::put_tensor(w, t);
  }
  for (const auto& [key, value] : b.metadata) {
    put_name(detail::kMetaPrefix + key);
    std::vector<std::int16_t> chars(value.begin(), value.end());
    if (chars.empty()) chars.push_back(0);
    detail::put_tensor(w, Tensor::from_fixed({chars.size()}, chars, value.empty() ? 1 : 0));
  }
  return w.data();
}

inline void write_bundle_file(const WeightBundle& b, const std::filesystem::path& path) {
  detail::spill(path, encode_bundle(b));
}

inline WeightBundle read_bundle_file(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  detail::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "CBWB", 4) != 0) throw Error(Errc::BadMagic, path.string() + " is not a CBWB bundle");
  if (r.u32() != kFormatVersion) throw Error(Errc::UnknownDtype, "unsupported bundle version");
  const std::uint32_t n = r.u32();
  WeightBundle b;
  const std::string meta = detail::kMetaPrefix;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name(r.u16(), '\0');
    r.bytes(name.data(), name.size());
    Tensor t = detail::get_tensor(r);
    if (name.rfind(meta, 0) == 0) {
      std::string value;
      // scale 1 marks the empty-string placeholder
      if (t.scale_exp() == 0)
        for (std::int16_t c : t.i16()) value.push_back(static_cast<char>(c));
      b.metadata[name.substr(meta.size())] = value;
    } else {
      if (b.entries.count(name)) throw Error(Errc::IoFailure, "duplicate entry '" + name + "'");
      b.entries.emplace(std::move(name), std::move(t));
    }
  }
  return b;
}

}  // namespace capsbeam
