#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace qlab {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

/// Incremental 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(std::span<const std::uint8_t> bytes) noexcept {
    for (std::uint8_t b : bytes) {
      h_ ^= b;
      h_ *= kFnvPrime;
    }
  }
  void update(std::string_view s) noexcept {
    update({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = kFnvOffset;
};

inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) noexcept {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

std::string to_hex(std::uint64_t v);

}  // namespace qlab
