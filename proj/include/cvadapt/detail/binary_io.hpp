#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cvadapt/error.hpp"

namespace cvadapt::detail {

// Little-endian byte sink. Values are encoded byte by byte so the on-disk
// layout does not depend on host endianness.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename UInt>
  void uint(UInt v) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      buf_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
    }
  }

  void u16(std::uint16_t v) { uint(v); }
  void u32(std::uint32_t v) { uint(v); }
  void u64(std::uint64_t v) { uint(v); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  const std::vector<char>& buffer() const { return buf_; }

  void write_file(const std::string& path) const;

 private:
  std::vector<char> buf_;
};

inline void write_file(const std::string& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path + "'");
}

inline void ByteWriter::write_file(const std::string& path) const { detail::write_file(path, buf_); }

// Bounds-checked little-endian reader over an in-memory file image. Running
// past the end throws `Error(truncated_message)`.
class ByteReader {
 public:
  ByteReader(std::vector<char> data, std::string truncated_message)
      : data_(std::move(data)), truncated_(std::move(truncated_message)) {}

  static std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  std::string_view bytes(std::size_t n) {
    require(n);
    std::string_view out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }

  template <typename UInt>
  UInt uint() {
    require(sizeof(UInt));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(UInt);
    return static_cast<UInt>(v);
  }

  std::uint16_t u16() { return uint<std::uint16_t>(); }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::uint64_t u64() { return uint<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  // Throws unless at least `count * width` bytes remain; guards allocations
  // sized from untrusted headers.
  void require_elements(std::uint64_t count, std::size_t width) const {
    if (width != 0 && count > remaining() / width) throw Error(truncated_);
  }

 private:
  void require(std::size_t n) const {
    if (n > remaining()) throw Error(truncated_);
  }

  std::vector<char> data_;
  std::string truncated_;
  std::size_t pos_ = 0;
};

}  // namespace cvadapt::detail
