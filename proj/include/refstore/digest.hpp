#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace refstore {

// 64-bit content digest used for manifest entries, packed groups, and
// transfer verification. Algorithm: XXH64, seed 0. The wire protocol carries
// an algorithm tag alongside every digest so this can evolve.
inline constexpr std::uint8_t kDigestAlgXxh64 = 1;

std::uint64_t digest64(const void* data, std::size_t len);

inline std::uint64_t digest64(std::span<const std::byte> data) {
  return digest64(data.data(), data.size());
}
inline std::uint64_t digest64(std::string_view data) {
  return digest64(data.data(), data.size());
}

// Incremental form for digesting discontiguous regions in one pass.
class Digest64Stream {
 public:
  Digest64Stream() { reset(); }
  void reset();
  void update(const void* data, std::size_t len);
  void update(std::span<const std::byte> data) { update(data.data(), data.size()); }
  std::uint64_t finish() const;

 private:
  std::uint64_t v1_, v2_, v3_, v4_;
  std::uint64_t total_len_;
  unsigned char buf_[32];
  std::size_t buf_used_;
};

}  // namespace refstore
