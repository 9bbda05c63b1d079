#pragma once

// Little-endian byte encoding used by every binary format in the library.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "regconsist/error.hpp"

namespace regconsist::detail {

class ByteWriter {
 public:
  void raw(const void* data, std::size_t size) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + size);
  }

  template <typename T>
    requires std::is_integral_v<T>
  void uint(T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
  }

  void f32(float value) { uint(std::bit_cast<std::uint32_t>(value)); }
  void f64(double value) { uint(std::bit_cast<std::uint64_t>(value)); }

  void string(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

// Bounds-checked reader; failures name the byte offset.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return bytes_.size() - offset_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(context_ + ": truncated " + what + " at byte offset " +
                        std::to_string(offset_));
    }
  }

  template <typename T>
    requires std::is_integral_v<T>
  T uint(const char* what = "integer") {
    need(sizeof(T), what);
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<U>(static_cast<U>(bytes_[offset_ + i]) << (8 * i));
    }
    offset_ += sizeof(T);
    return static_cast<T>(u);
  }

  float f32(const char* what = "float") { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  double f64(const char* what = "double") {
    return std::bit_cast<double>(uint<std::uint64_t>(what));
  }

  std::string string(const char* what = "string") {
    const auto len = uint<std::uint32_t>(what);
    need(len, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + offset_), len);
    offset_ += len;
    return s;
  }

  void raw(void* out, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(out, bytes_.data() + offset_, n);
    offset_ += n;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw FormatError(context_ + ": " + message + " at byte offset " + std::to_string(offset_));
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string context_;
  std::size_t offset_ = 0;
};

}  // namespace regconsist::detail
