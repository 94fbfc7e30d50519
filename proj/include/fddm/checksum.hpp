#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace fddm {

// CRC-32 (IEEE 802.3, reflected, poly 0xEDB88320), as used by zip/png.
class Crc32 {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i)
      state_ = table()[(state_ ^ p[i]) & 0xFFu] ^ (state_ >> 8);
  }

  [[nodiscard]] std::uint32_t value() const { return state_ ^ 0xFFFFFFFFu; }

  static std::uint32_t of(const void* data, std::size_t len) {
    Crc32 c;
    c.update(data, len);
    return c.value();
  }

  static std::uint32_t of(const std::vector<std::uint8_t>& bytes) { return of(bytes.data(), bytes.size()); }

 private:
  static const std::array<std::uint32_t, 256>& table() {
    static const std::array<std::uint32_t, 256> t = [] {
      std::array<std::uint32_t, 256> tt{};
      for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        tt[i] = c;
      }
      return tt;
    }();
    return t;
  }

  std::uint32_t state_ = 0xFFFFFFFFu;
};

}  // namespace fddm
