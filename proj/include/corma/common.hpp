#pragma once
// Shared vocabulary: small vector type, error types, digests, and
// little-endian binary helpers used by every module.

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace corma {

/// Raised when an input violates an operation's precondition.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed files, digest mismatches and other I/O level faults.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  constexpr Vec3& operator+=(const Vec3& o) {
    x += o.x; y += o.y; z += o.z;
    return *this;
  }
  constexpr bool operator==(const Vec3&) const = default;

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
  double norm_xy() const { return std::hypot(x, y); }
  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
  std::array<double, 3> arr() const { return {x, y, z}; }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// ---------------------------------------------------------------- digests

inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw std::runtime_error("sha256: EVP_MD_CTX_new failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md.data(), &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha256: digest failed");
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(md[i]);
  return os.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path);
}

inline std::string file_digest(const std::string& path) { return sha256_hex(read_file(path)); }

// ------------------------------------------------------- little-endian I/O

namespace le {

static_assert(sizeof(double) == 8);

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> b{};
  std::memcpy(b.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  os.write(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  std::array<unsigned char, sizeof(T)> b{};
  is.read(reinterpret_cast<char*>(b.data()), sizeof(T));
  if (!is) throw FormatError("unexpected end of binary stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  T v;
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

inline void put_f64s(std::ostream& os, const std::vector<double>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
  } else {
    for (double d : v) put(os, d);
  }
}

inline void get_f64s(std::istream& is, std::vector<double>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
    if (!is) throw FormatError("unexpected end of binary stream");
  } else {
    for (double& d : v) d = get<double>(is);
  }
}

}  // namespace le

}  // namespace corma
