#include "refstore/codec.hpp"

#include <cassert>

namespace refstore {

void append_u32be(std::string& out, std::uint32_t v) {
  unsigned char b[4] = {
      static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
      static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.append(reinterpret_cast<const char*>(b), 4);
}

void append_u64be(std::string& out, std::uint64_t v) {
  append_u32be(out, static_cast<std::uint32_t>(v >> 32));
  append_u32be(out, static_cast<std::uint32_t>(v));
}

std::uint32_t load_u32be(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

std::uint64_t load_u64be(const unsigned char* p) {
  return (std::uint64_t(load_u32be(p)) << 32) | load_u32be(p + 4);
}

void FieldWriter::put_u64(std::uint8_t tag, std::uint64_t v) {
  assert(static_cast<int>(tag) > last_tag_);
  last_tag_ = tag;
  out_.push_back(static_cast<char>(tag));
  out_.push_back(static_cast<char>(wt_u64));
  append_u64be(out_, v);
}

void FieldWriter::put_bytes(std::uint8_t tag, std::string_view payload) {
  assert(static_cast<int>(tag) > last_tag_);
  last_tag_ = tag;
  out_.push_back(static_cast<char>(tag));
  out_.push_back(static_cast<char>(wt_bytes));
  append_u32be(out_, static_cast<std::uint32_t>(payload.size()));
  out_.append(payload.data(), payload.size());
}

void FieldWriter::put_list(std::uint8_t tag,
                           const std::vector<std::string>& elems) {
  assert(static_cast<int>(tag) > last_tag_);
  last_tag_ = tag;
  out_.push_back(static_cast<char>(tag));
  out_.push_back(static_cast<char>(wt_list));
  append_u32be(out_, static_cast<std::uint32_t>(elems.size()));
  for (const auto& e : elems) {
    append_u32be(out_, static_cast<std::uint32_t>(e.size()));
    out_.append(e);
  }
}

FieldReader::FieldReader(std::string_view data) {
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  std::size_t n = data.size();
  std::size_t i = 0;
  while (i < n) {
    if (n - i < 2) { ok_ = false; return; }
    Field f;
    f.tag = p[i];
    f.type = p[i + 1];
    i += 2;
    switch (f.type) {
      case wt_u64: {
        if (n - i < 8) { ok_ = false; return; }
        f.payload = data.substr(i, 8);
        i += 8;
        break;
      }
      case wt_bytes: {
        if (n - i < 4) { ok_ = false; return; }
        std::uint32_t len = load_u32be(p + i);
        i += 4;
        if (n - i < len) { ok_ = false; return; }
        f.payload = data.substr(i, len);
        i += len;
        break;
      }
      case wt_list: {
        if (n - i < 4) { ok_ = false; return; }
        std::size_t start = i;
        std::uint32_t count = load_u32be(p + i);
        i += 4;
        for (std::uint32_t k = 0; k < count; ++k) {
          if (n - i < 4) { ok_ = false; return; }
          std::uint32_t len = load_u32be(p + i);
          i += 4;
          if (n - i < len) { ok_ = false; return; }
          i += len;
        }
        f.payload = data.substr(start, i - start);
        break;
      }
      default:
        ok_ = false;
        return;
    }
    fields_.push_back(f);
  }
}

const FieldReader::Field* FieldReader::find(std::uint8_t tag) const {
  for (const auto& f : fields_)
    if (f.tag == tag) return &f;
  return nullptr;
}

bool FieldReader::has(std::uint8_t tag) const { return find(tag) != nullptr; }

std::optional<std::uint64_t> FieldReader::get_u64(std::uint8_t tag) const {
  const Field* f = find(tag);
  if (!f || f->type != wt_u64) return std::nullopt;
  return load_u64be(reinterpret_cast<const unsigned char*>(f->payload.data()));
}

std::optional<std::string_view> FieldReader::get_bytes(std::uint8_t tag) const {
  const Field* f = find(tag);
  if (!f || f->type != wt_bytes) return std::nullopt;
  return f->payload;
}

std::optional<std::vector<std::string_view>> FieldReader::get_list(
    std::uint8_t tag) const {
  const Field* f = find(tag);
  if (!f || f->type != wt_list) return std::nullopt;
  std::vector<std::string_view> out;
  const auto* p = reinterpret_cast<const unsigned char*>(f->payload.data());
  std::uint32_t count = load_u32be(p);
  std::size_t i = 4;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::uint32_t len = load_u32be(p + i);
    i += 4;
    out.push_back(f->payload.substr(i, len));
    i += len;
  }
  return out;
}

std::uint64_t FieldReader::req_u64(std::uint8_t tag) {
  auto v = get_u64(tag);
  if (!v) { missing_ = true; return 0; }
  return *v;
}

std::string FieldReader::req_str(std::uint8_t tag) {
  auto v = get_bytes(tag);
  if (!v) { missing_ = true; return {}; }
  return std::string(*v);
}

std::string_view FieldReader::req_bytes(std::uint8_t tag) {
  auto v = get_bytes(tag);
  if (!v) { missing_ = true; return {}; }
  return *v;
}

std::string encode_frame(const Frame& f) {
  std::string out;
  append_u32be(out, static_cast<std::uint32_t>(1 + f.body.size()));
  out.push_back(static_cast<char>(f.type));
  out.append(f.body);
  return out;
}

std::optional<Frame> FrameDecoder::next() {
  if (error_) return std::nullopt;
  // Compact consumed prefix occasionally.
  if (pos_ > 0 && (pos_ > buf_.size() / 2 || pos_ > (1u << 20))) {
    buf_.erase(0, pos_);
    pos_ = 0;
  }
  if (buf_.size() - pos_ < 4) return std::nullopt;
  std::uint32_t len = load_u32be(
      reinterpret_cast<const unsigned char*>(buf_.data() + pos_));
  if (len < 1 || len > kMaxFrameBytes) {
    error_ = true;
    return std::nullopt;
  }
  if (buf_.size() - pos_ < 4 + static_cast<std::size_t>(len)) return std::nullopt;
  Frame f;
  f.type = static_cast<std::uint8_t>(buf_[pos_ + 4]);
  f.body.assign(buf_, pos_ + 5, len - 1);
  pos_ += 4 + len;
  return f;
}

}  // namespace refstore
