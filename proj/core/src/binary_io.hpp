#pragma once

// Little-endian primitives shared by the trace, weight and similarity-cache
// readers and writers.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "d2m/error.hpp"

namespace d2m::detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) fail(ErrorCode::IoFailure, "write failed after " + std::to_string(count_) + " bytes");
    count_ += n;
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void f32(float v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }

  [[nodiscard]] std::size_t count() const noexcept { return count_; }

 private:
  std::ostream& out_;
  std::size_t count_ = 0;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  // Reads exactly n bytes or throws TruncatedPayload naming `what`.
  void bytes(void* data, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      fail(ErrorCode::TruncatedPayload, std::string("stream ended while reading ") + what);
    }
  }
  void expect_magic(std::string_view m) {
    std::array<char, 4> got{};
    in_.read(got.data(), static_cast<std::streamsize>(m.size()));
    if (static_cast<std::size_t>(in_.gcount()) != m.size() ||
        std::string_view(got.data(), m.size()) != m) {
      fail(ErrorCode::BadMagic, "expected magic '" + std::string(m) + "'");
    }
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v = 0;
    bytes(&v, sizeof v, what);
    return v;
  }
  float f32(const char* what) {
    float v = 0;
    bytes(&v, sizeof v, what);
    return v;
  }
  double f64(const char* what) {
    double v = 0;
    bytes(&v, sizeof v, what);
    return v;
  }
  // True when no further bytes are available.
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
};

}  // namespace d2m::detail
