#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>

#include "mmnt/error.hpp"

namespace mmnt {

// Little-endian fixed-width encoder over an output stream. Counts bytes written.
class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& out) : out_(out) {}

  template <typename T>
    requires std::is_integral_v<T>
  void put(T value) {
    using U = std::make_unsigned_t<T>;
    auto bits = static_cast<U>(value);
    char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
    }
    write_raw(buf, sizeof(T));
  }

  void put_f64(double value) { put(std::bit_cast<std::uint64_t>(value)); }
  void put_f32(float value) { put(std::bit_cast<std::uint32_t>(value)); }

  void put_bytes(std::span<const std::uint8_t> bytes) {
    write_raw(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  }

  void put_string(const std::string& s) { write_raw(s.data(), s.size()); }

  std::uint64_t written() const noexcept { return written_; }

 private:
  void write_raw(const char* data, std::size_t n) {
    out_.write(data, static_cast<std::streamsize>(n));
    if (!out_) throw std::runtime_error("write failed");
    written_ += n;
  }

  std::ostream& out_;
  std::uint64_t written_ = 0;
};

// Little-endian decoder that tracks the current byte offset so format errors
// can point at the failing position.
class ByteReader {
 public:
  explicit ByteReader(std::istream& in) : in_(in) {}

  template <typename T>
    requires std::is_integral_v<T>
  T get(const char* what) {
    using U = std::make_unsigned_t<T>;
    unsigned char buf[sizeof(T)];
    read_raw(reinterpret_cast<char*>(buf), sizeof(T), what);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
    }
    return static_cast<T>(bits);
  }

  double get_f64(const char* what) {
    return std::bit_cast<double>(get<std::uint64_t>(what));
  }
  float get_f32(const char* what) {
    return std::bit_cast<float>(get<std::uint32_t>(what));
  }

  void get_bytes(std::span<std::uint8_t> out, const char* what) {
    read_raw(reinterpret_cast<char*>(out.data()), out.size(), what);
  }

  std::string get_string(std::size_t n, const char* what) {
    std::string s(n, '\0');
    read_raw(s.data(), n, what);
    return s;
  }

  // True when no further byte can be read.
  bool at_end() {
    return in_.peek() == std::char_traits<char>::eof();
  }

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  void read_raw(char* data, std::size_t n, const char* what) {
    in_.read(data, static_cast<std::streamsize>(n));
    auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n) {
      throw FormatError(std::string("truncated stream while reading ") + what,
                        offset_ + got);
    }
    offset_ += n;
  }

  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace mmnt
