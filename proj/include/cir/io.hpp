#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace cir::io {

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string hex64(std::uint64_t value);

/// Little-endian append-only encoder.
class ByteWriter {
 public:
  void bytes(std::string_view b) { out_.append(b); }
  void u16(std::uint16_t v) { raw(v); }
  void u32(std::uint32_t v) { raw(v); }
  void f32(float v) { raw(v); }
  void f64(double v) { raw(v); }

  const std::string& str() const { return out_; }
  std::string take() { return std::move(out_); }

 private:
  template <typename T>
  void raw(T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    out_.append(reinterpret_cast<const char*>(buf), sizeof(T));
  }
  std::string out_;
};

/// Little-endian bounds-checked decoder. Running off the end throws TruncatedFile.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::string_view bytes(std::size_t n);
  std::uint16_t u16() { return raw<std::uint16_t>(); }
  std::uint32_t u32() { return raw<std::uint32_t>(); }
  float f32() { return raw<float>(); }
  double f64() { return raw<double>(); }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  template <typename T>
  T raw() {
    auto b = bytes(sizeof(T));
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, b.data(), sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace cir::io
