#include <cstdint>
#include <string>
#include <vector>

#include "doctest.h"
#include "refstore/digest.hpp"

using namespace refstore;

namespace {

// Deterministic byte stream: low byte of a splitmix64 sequence.
std::string splitmix_bytes(std::uint64_t seed, std::size_t n) {
  std::string out;
  out.reserve(n);
  std::uint64_t x = seed;
  for (std::size_t i = 0; i < n; ++i) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z = z ^ (z >> 31);
    out.push_back(static_cast<char>(z & 0xFF));
  }
  return out;
}

std::string pattern_bytes(std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(static_cast<char>((i * 17 + 3) & 0xFF));
  return out;
}

}  // namespace

TEST_SUITE("digest") {

// Frozen vectors produced with the canonical xxhash reference (seed 0);
// these pin the exact algorithm across any future refactor.
TEST_CASE("frozen reference vectors") {
  CHECK(digest64("") == 0xEF46DB3751D8E999ull);
  CHECK(digest64("a") == 0xD24EC4F1A98C6E5Bull);
  CHECK(digest64("abc") == 0x44BC2CF5AD770999ull);
  CHECK(digest64("Hello, world!") == 0xF58336A78B6F9476ull);
}

TEST_CASE("frozen vectors across block boundaries") {
  struct Vec {
    std::size_t len;
    std::uint64_t want;
  };
  const Vec vecs[] = {
      {3, 0xC2D5FE9E5E827296ull},  {4, 0x6F20103DC53D2B38ull},
      {7, 0xDBCF5F2C174ED056ull},  {8, 0xFFB16F759C44D7C3ull},
      {15, 0xC959035ACD9D294Bull}, {16, 0x6AAEBC48FDDBE290ull},
      {31, 0xC55294C726A80342ull}, {32, 0x0FACD3340FF96628ull},
      {33, 0x851A6EA9CBE767ABull}, {63, 0xAD40449420FCEAC3ull},
      {64, 0x342FC0C8324C6C58ull},
  };
  for (const auto& v : vecs) {
    CAPTURE(v.len);
    CHECK(digest64(pattern_bytes(v.len)) == v.want);
  }
}

TEST_CASE("frozen vectors for bulk streams") {
  CHECK(digest64(splitmix_bytes(1, 1024)) == 0x2CED67D3BBC7413Bull);
  CHECK(digest64(splitmix_bytes(7, 1u << 20)) == 0x2C74017032DC0470ull);
}

TEST_CASE("streaming matches one-shot at every split point") {
  std::string data = splitmix_bytes(3, 257);
  std::uint64_t want = digest64(data);
  for (std::size_t split = 0; split <= data.size(); split += 13) {
    Digest64Stream ds;
    ds.update(data.data(), split);
    ds.update(data.data() + split, data.size() - split);
    CHECK(ds.finish() == want);
  }
}

TEST_CASE("streaming with many tiny updates") {
  std::string data = splitmix_bytes(11, 1000);
  Digest64Stream ds;
  for (std::size_t i = 0; i < data.size(); i += 7)
    ds.update(data.data() + i, std::min<std::size_t>(7, data.size() - i));
  CHECK(ds.finish() == digest64(data));
}

}  // TEST_SUITE
