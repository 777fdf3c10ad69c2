#include "refstore/digest.hpp"

#include <cstring>

namespace refstore {
namespace {

constexpr std::uint64_t kP1 = 0x9E3779B185EBCA87ULL;
constexpr std::uint64_t kP2 = 0xC2B2AE3D27D4EB4FULL;
constexpr std::uint64_t kP3 = 0x165667B19E3779F9ULL;
constexpr std::uint64_t kP4 = 0x85EBCA77C2B2AE63ULL;
constexpr std::uint64_t kP5 = 0x27D4EB2F165667C5ULL;

inline std::uint64_t rotl64(std::uint64_t x, int r) {
  return (x << r) | (x >> (64 - r));
}

inline std::uint64_t read64(const unsigned char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return v;  // little-endian hosts only (asserted in tests via fixed vectors)
}

inline std::uint32_t read32(const unsigned char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

inline std::uint64_t round64(std::uint64_t acc, std::uint64_t input) {
  acc += input * kP2;
  acc = rotl64(acc, 31);
  acc *= kP1;
  return acc;
}

inline std::uint64_t merge_round(std::uint64_t acc, std::uint64_t val) {
  val = round64(0, val);
  acc ^= val;
  acc = acc * kP1 + kP4;
  return acc;
}

inline std::uint64_t avalanche(std::uint64_t h) {
  h ^= h >> 33;
  h *= kP2;
  h ^= h >> 29;
  h *= kP3;
  h ^= h >> 32;
  return h;
}

// Digest the trailing <32 bytes and finalize.
std::uint64_t finalize(std::uint64_t h, const unsigned char* p,
                       std::size_t len) {
  while (len >= 8) {
    h ^= round64(0, read64(p));
    h = rotl64(h, 27) * kP1 + kP4;
    p += 8;
    len -= 8;
  }
  if (len >= 4) {
    h ^= static_cast<std::uint64_t>(read32(p)) * kP1;
    h = rotl64(h, 23) * kP2 + kP3;
    p += 4;
    len -= 4;
  }
  while (len > 0) {
    h ^= static_cast<std::uint64_t>(*p) * kP5;
    h = rotl64(h, 11) * kP1;
    ++p;
    --len;
  }
  return avalanche(h);
}

}  // namespace

std::uint64_t digest64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  const unsigned char* end = p + len;
  std::uint64_t h;
  if (len >= 32) {
    std::uint64_t v1 = kP1 + kP2;
    std::uint64_t v2 = kP2;
    std::uint64_t v3 = 0;
    std::uint64_t v4 = 0 - kP1;
    const unsigned char* limit = end - 32;
    do {
      v1 = round64(v1, read64(p));
      v2 = round64(v2, read64(p + 8));
      v3 = round64(v3, read64(p + 16));
      v4 = round64(v4, read64(p + 24));
      p += 32;
    } while (p <= limit);
    h = rotl64(v1, 1) + rotl64(v2, 7) + rotl64(v3, 12) + rotl64(v4, 18);
    h = merge_round(h, v1);
    h = merge_round(h, v2);
    h = merge_round(h, v3);
    h = merge_round(h, v4);
  } else {
    h = kP5;
  }
  h += static_cast<std::uint64_t>(len);
  return finalize(h, p, static_cast<std::size_t>(end - p));
}

void Digest64Stream::reset() {
  v1_ = kP1 + kP2;
  v2_ = kP2;
  v3_ = 0;
  v4_ = 0 - kP1;
  total_len_ = 0;
  buf_used_ = 0;
}

void Digest64Stream::update(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  total_len_ += len;
  if (buf_used_ + len < 32) {
    std::memcpy(buf_ + buf_used_, p, len);
    buf_used_ += len;
    return;
  }
  if (buf_used_ > 0) {
    std::size_t take = 32 - buf_used_;
    std::memcpy(buf_ + buf_used_, p, take);
    v1_ = round64(v1_, read64(buf_));
    v2_ = round64(v2_, read64(buf_ + 8));
    v3_ = round64(v3_, read64(buf_ + 16));
    v4_ = round64(v4_, read64(buf_ + 24));
    p += take;
    len -= take;
    buf_used_ = 0;
  }
  while (len >= 32) {
    v1_ = round64(v1_, read64(p));
    v2_ = round64(v2_, read64(p + 8));
    v3_ = round64(v3_, read64(p + 16));
    v4_ = round64(v4_, read64(p + 24));
    p += 32;
    len -= 32;
  }
  if (len > 0) {
    std::memcpy(buf_, p, len);
    buf_used_ = len;
  }
}

std::uint64_t Digest64Stream::finish() const {
  std::uint64_t h;
  if (total_len_ >= 32) {
    h = rotl64(v1_, 1) + rotl64(v2_, 7) + rotl64(v3_, 12) + rotl64(v4_, 18);
    h = merge_round(h, v1_);
    h = merge_round(h, v2_);
    h = merge_round(h, v3_);
    h = merge_round(h, v4_);
  } else {
    h = kP5;
  }
  h += total_len_;
  return finalize(h, buf_, buf_used_);
}

}  // namespace refstore
