#pragma once

// Little-endian primitives shared by the checkpoint and optimizer-state files.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>

namespace deidforge::io {

template <typename T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void write_le(std::ostream& os, T v) {
  v = to_little_endian(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_floats(std::ostream& os, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) write_le(os, f);
  }
}

// Readers return false on a short read and leave the value unspecified.
template <typename T>
bool read_le(std::istream& is, T& v) {
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) return false;
  v = to_little_endian(v);
  return true;
}

inline bool read_string(std::istream& is, std::string& s, std::uint32_t max_len = 1u << 20) {
  std::uint32_t n = 0;
  if (!read_le(is, n) || n > max_len) return false;
  s.resize(n);
  return static_cast<bool>(is.read(s.data(), n));
}

inline bool read_floats(std::istream& is, std::span<float> out) {
  if (!is.read(reinterpret_cast<char*>(out.data()),
               static_cast<std::streamsize>(out.size() * sizeof(float))))
    return false;
  if constexpr (std::endian::native == std::endian::big) {
    for (float& f : out) f = to_little_endian(f);
  }
  return true;
}

}  // namespace deidforge::io
