#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "refstore/types.hpp"

namespace refstore {

// Field-tagged binary encoding, big-endian integers.
//
//   field     := tag:u8  wire_type:u8  payload
//   wt_u64    (1): payload = 8-byte big-endian value
//   wt_bytes  (2): payload = u32be length + raw bytes
//   wt_list   (3): payload = u32be count + count * (u32be length + raw bytes)
//
// Canonical form: fields appear in strictly ascending tag order, absent
// optional fields are omitted. Every encoder here emits canonical form, so
// equal logical values encode to identical bytes.

enum : std::uint8_t { wt_u64 = 1, wt_bytes = 2, wt_list = 3 };

void append_u32be(std::string& out, std::uint32_t v);
void append_u64be(std::string& out, std::uint64_t v);
std::uint32_t load_u32be(const unsigned char* p);
std::uint64_t load_u64be(const unsigned char* p);

class FieldWriter {
 public:
  void put_u64(std::uint8_t tag, std::uint64_t v);
  void put_u32(std::uint8_t tag, std::uint32_t v) { put_u64(tag, v); }
  void put_u8(std::uint8_t tag, std::uint8_t v) { put_u64(tag, v); }
  void put_bool(std::uint8_t tag, bool v) { put_u64(tag, v ? 1 : 0); }
  void put_bytes(std::uint8_t tag, std::string_view payload);
  void put_str(std::uint8_t tag, std::string_view s) { put_bytes(tag, s); }
  void put_list(std::uint8_t tag, const std::vector<std::string>& elems);

  const std::string& bytes() const { return out_; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
  int last_tag_ = -1;  // enforces canonical ascending order
};

class FieldReader {
 public:
  // Parses the whole buffer; ok() false on malformed input.
  explicit FieldReader(std::string_view data);

  bool ok() const { return ok_; }
  bool has(std::uint8_t tag) const;

  std::optional<std::uint64_t> get_u64(std::uint8_t tag) const;
  std::optional<std::string_view> get_bytes(std::uint8_t tag) const;
  std::optional<std::vector<std::string_view>> get_list(std::uint8_t tag) const;

  // Required accessors: set fail flag (checked via all_found) when missing.
  std::uint64_t req_u64(std::uint8_t tag);
  std::uint32_t req_u32(std::uint8_t tag) {
    return static_cast<std::uint32_t>(req_u64(tag));
  }
  std::uint8_t req_u8(std::uint8_t tag) {
    return static_cast<std::uint8_t>(req_u64(tag));
  }
  bool req_bool(std::uint8_t tag) { return req_u64(tag) != 0; }
  std::string req_str(std::uint8_t tag);
  std::string_view req_bytes(std::uint8_t tag);

  // True iff parse succeeded and no required accessor missed.
  bool all_found() const { return ok_ && !missing_; }

 private:
  struct Field {
    std::uint8_t tag;
    std::uint8_t type;
    std::string_view payload;  // for u64: 8 raw bytes; bytes: payload; list: raw region
  };
  const Field* find(std::uint8_t tag) const;

  std::vector<Field> fields_;
  bool ok_ = true;
  bool missing_ = false;
};

// One control-plane message: a type byte plus an encoded field body.
// Stream framing prepends a u32be length of (type + body).
struct Frame {
  std::uint8_t type = 0;
  std::string body;
};

inline constexpr std::size_t kMaxFrameBytes = 64u << 20;

std::string encode_frame(const Frame& f);

// Incremental decoder for a byte stream; feed() appends, next() pops frames.
class FrameDecoder {
 public:
  void feed(std::string_view data) { buf_.append(data.data(), data.size()); }
  // Returns nullopt when no complete frame is buffered. Sets error on
  // oversized or malformed frames.
  std::optional<Frame> next();
  bool error() const { return error_; }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
  bool error_ = false;
};

}  // namespace refstore
