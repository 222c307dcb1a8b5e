#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mqmk/common/error.hpp"

namespace mqmk::io {

// Little-endian byte stream writer/reader for the PCLB / PCLP / PCLD
// containers. Byte order is explicit so the files are portable.

class ByteWriter {
 public:
  void put_u8(std::uint8_t v) { buf_.push_back(v); }
  void put_u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(bits);
  }
  void put_f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(bits);
  }
  void put_magic(const char m[4]) {
    buf_.insert(buf_.end(), m, m + 4);
  }
  void put_string(const std::string& s) {
    put_u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::string source)
      : data_(data), size_(size), source_(std::move(source)) {}
  explicit ByteReader(const std::vector<std::uint8_t>& b, std::string source = "<memory>")
      : ByteReader(b.data(), b.size(), std::move(source)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }

  std::uint8_t get_u8() {
    need(1, "u8");
    return data_[pos_++];
  }
  std::uint32_t get_u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t get_u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float get_f32() {
    std::uint32_t bits = get_u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double get_f64() {
    std::uint64_t bits = get_u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void expect_magic(const char m[4]) {
    need(4, "magic");
    if (std::memcmp(data_ + pos_, m, 4) != 0) {
      throw FormatError(source_ + ": bad magic at offset " + std::to_string(pos_) +
                        ", expected \"" + std::string(m, 4) + "\"");
    }
    pos_ += 4;
  }
  std::string get_string() {
    std::uint32_t n = get_u32();
    need(n, "string payload");
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  void expect_end() const {
    if (pos_ != size_) {
      throw FormatError(source_ + ": " + std::to_string(size_ - pos_) +
                        " trailing bytes at offset " + std::to_string(pos_));
    }
  }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > size_) {
      throw FormatError(source_ + ": truncated, need " + std::to_string(n) + " bytes for " +
                        what + " at offset " + std::to_string(pos_) + " but only " +
                        std::to_string(size_ - pos_) + " remain");
    }
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string source_;
};

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::string& path);

}  // namespace mqmk::io
