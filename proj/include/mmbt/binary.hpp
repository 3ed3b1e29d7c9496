// Little-endian byte encoding shared by the spectrogram, clip and checkpoint formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>

#include "mmbt/tensor.hpp"

namespace mmbt::detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) { return p[0] | (p[1] << 8); }

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& s, float v) { put_u32(s, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& s, double v) { put_u64(s, std::bit_cast<std::uint64_t>(v)); }
inline void put_string(std::string& s, const std::string& v) {
  put_u64(s, v.size());
  s += v;
}

/// Bounds-checked cursor; truncation raises InputError naming `what`.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  void expect(const std::string& magic) {
    if (take(magic.size()) != magic) throw InputError(what_ + ": bad magic");
  }
  std::string take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw InputError(what_ + ": truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint32_t u32() {
    auto s = take(4);
    return read_u32(reinterpret_cast<const unsigned char*>(s.data()));
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | (std::uint64_t(u32()) << 32);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string string() { return take(static_cast<std::size_t>(u64())); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace mmbt::detail
