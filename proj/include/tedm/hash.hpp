#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace tedm {

// 64-bit FNV-1a. Used for content hashes of checkpoints, caches and configs;
// not cryptographic.
class Hasher {
 public:
  Hasher& bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= b[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Hasher& text(std::string_view s) {
    bytes(s.data(), s.size());
    return u64(s.size());
  }
  Hasher& u64(std::uint64_t v) { return bytes(&v, sizeof v); }
  template <typename T>
  Hasher& span(std::span<const T> values) {
    return bytes(values.data(), values.size_bytes());
  }

  std::uint64_t digest() const noexcept { return state_; }
  std::string hex() const { return to_hex(state_); }

  static std::string to_hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hash_file(const std::string& path);

}  // namespace tedm
