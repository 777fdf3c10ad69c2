#include "refstore/manifest.hpp"

#include <algorithm>
#include <cstring>
#include <unordered_set>

#include "refstore/codec.hpp"
#include "refstore/digest.hpp"

namespace refstore {

Status TensorManifest::finalize() {
  items_.clear();
  member_of_.assign(entries.size(), -1);
  total_bytes_ = 0;

  std::unordered_set<std::string_view> names;
  for (const auto& e : entries) {
    if (e.name.empty() || e.length == 0) return Status::invalid_argument;
    if (!names.insert(e.name).second) return Status::invalid_argument;
    total_bytes_ += e.length;
  }

  for (std::uint32_t g = 0; g < groups.size(); ++g) {
    const auto& grp = groups[g];
    if (grp.members.empty()) return Status::invalid_argument;
    std::uint64_t off = 0;
    std::uint32_t prev = 0;
    bool first = true;
    for (const auto& mem : grp.members) {
      if (mem.entry_idx >= entries.size()) return Status::invalid_argument;
      if (!first && mem.entry_idx <= prev) return Status::invalid_argument;
      if (member_of_[mem.entry_idx] != -1) return Status::invalid_argument;
      if (mem.offset != off) return Status::invalid_argument;
      member_of_[mem.entry_idx] = static_cast<std::int32_t>(g);
      off += entries[mem.entry_idx].length;
      prev = mem.entry_idx;
      first = false;
    }
    if (off != grp.packed_length) return Status::invalid_argument;
  }

  // Groups must be ordered by their first member.
  for (std::uint32_t g = 1; g < groups.size(); ++g) {
    if (groups[g].members.front().entry_idx <=
        groups[g - 1].members.front().entry_idx)
      return Status::invalid_argument;
  }

  std::uint64_t stream = 0;
  for (std::uint32_t i = 0; i < entries.size(); ++i) {
    std::int32_t g = member_of_[i];
    TransferItem item;
    if (g < 0) {
      item.is_group = false;
      item.index = i;
      item.length = entries[i].length;
      item.digest = entries[i].digest;
    } else if (groups[g].members.front().entry_idx == i) {
      item.is_group = true;
      item.index = static_cast<std::uint32_t>(g);
      item.length = groups[g].packed_length;
      item.digest = groups[g].digest;
    } else {
      continue;  // non-leading member, carried by its group's item
    }
    item.stream_offset = stream;
    stream += item.length;
    items_.push_back(item);
  }
  return Status::ok;
}

std::optional<std::uint32_t> TensorManifest::group_of_entry(
    std::uint32_t entry_idx) const {
  if (entry_idx >= member_of_.size() || member_of_[entry_idx] < 0)
    return std::nullopt;
  return static_cast<std::uint32_t>(member_of_[entry_idx]);
}

TensorManifest::ItemRef TensorManifest::item_of_entry(
    std::uint32_t entry_idx) const {
  std::int32_t g = member_of_[entry_idx];
  for (std::uint32_t i = 0; i < items_.size(); ++i) {
    const auto& item = items_[i];
    if (g < 0) {
      if (!item.is_group && item.index == entry_idx) return {i, 0};
    } else if (item.is_group && item.index == static_cast<std::uint32_t>(g)) {
      for (const auto& mem : groups[g].members)
        if (mem.entry_idx == entry_idx) return {i, mem.offset};
    }
  }
  return {0, 0};  // unreachable for finalized manifests
}

void TensorManifest::set_group_digest(std::uint32_t group_idx,
                                      std::uint64_t digest) {
  groups[group_idx].digest = digest;
  for (auto& item : items_)
    if (item.is_group && item.index == group_idx) item.digest = digest;
}

std::string TensorManifest::encode() const {
  FieldWriter w;
  w.put_u8(1, 1);  // format version
  w.put_u8(2, kDigestAlgXxh64);
  std::vector<std::string> entry_blobs;
  entry_blobs.reserve(entries.size());
  for (const auto& e : entries) {
    FieldWriter ew;
    ew.put_str(1, e.name);
    ew.put_u64(2, e.length);
    ew.put_u64(3, e.digest);
    entry_blobs.push_back(ew.take());
  }
  w.put_list(3, entry_blobs);
  std::vector<std::string> group_blobs;
  group_blobs.reserve(groups.size());
  for (const auto& g : groups) {
    FieldWriter gw;
    gw.put_u64(1, g.packed_length);
    gw.put_u64(2, g.digest);
    std::string members;
    for (const auto& mem : g.members) {
      append_u32be(members, mem.entry_idx);
      append_u64be(members, mem.offset);
    }
    gw.put_bytes(3, members);
    group_blobs.push_back(gw.take());
  }
  w.put_list(4, group_blobs);
  return w.take();
}

Result<TensorManifest> TensorManifest::decode(std::string_view data) {
  FieldReader r(data);
  if (!r.ok()) return Status::protocol_error;
  if (r.get_u64(1).value_or(0) != 1) return Status::protocol_error;
  if (r.get_u64(2).value_or(0) != kDigestAlgXxh64) return Status::protocol_error;
  auto entry_blobs = r.get_list(3);
  auto group_blobs = r.get_list(4);
  if (!entry_blobs || !group_blobs) return Status::protocol_error;

  TensorManifest m;
  for (auto blob : *entry_blobs) {
    FieldReader er(blob);
    TensorEntry e;
    e.name = er.req_str(1);
    e.length = er.req_u64(2);
    e.digest = er.req_u64(3);
    if (!er.all_found()) return Status::protocol_error;
    m.entries.push_back(std::move(e));
  }
  for (auto blob : *group_blobs) {
    FieldReader gr(blob);
    PackedGroup g;
    g.packed_length = gr.req_u64(1);
    g.digest = gr.req_u64(2);
    std::string_view members = gr.req_bytes(3);
    if (!gr.all_found() || members.size() % 12 != 0)
      return Status::protocol_error;
    const auto* p = reinterpret_cast<const unsigned char*>(members.data());
    for (std::size_t i = 0; i < members.size(); i += 12) {
      PackedMember mem;
      mem.entry_idx = load_u32be(p + i);
      mem.offset = load_u64be(p + i + 4);
      g.members.push_back(mem);
    }
    m.groups.push_back(std::move(g));
  }
  if (Status s = m.finalize(); s != Status::ok) return s;
  return m;
}

bool TensorManifest::same_as(const TensorManifest& other) const {
  return encode() == other.encode();
}

Result<TensorManifest> assemble_manifest(std::span<const EntryDesc> descs,
                                         const ManifestLimits& limits) {
  TensorManifest m;
  PackedGroup open;
  auto close_open = [&] {
    if (!open.members.empty()) {
      m.groups.push_back(std::move(open));
      open = PackedGroup{};
    }
  };
  for (std::uint32_t i = 0; i < descs.size(); ++i) {
    const auto& d = descs[i];
    m.entries.push_back({d.name, d.length, d.digest});
    if (d.length >= limits.tiny_threshold) continue;
    if (!open.members.empty() &&
        open.packed_length + d.length > limits.group_target)
      close_open();
    open.members.push_back({i, open.packed_length});
    open.packed_length += d.length;
  }
  close_open();
  if (Status s = m.finalize(); s != Status::ok) return s;
  return m;
}

std::uint64_t pack_group(TensorManifest& m, std::uint32_t group_idx,
                         std::span<const std::span<const std::byte>> entry_regions,
                         std::span<std::byte> staging) {
  auto& g = m.groups[group_idx];
  for (const auto& mem : g.members) {
    auto src = entry_regions[mem.entry_idx];
    std::memcpy(staging.data() + mem.offset, src.data(), src.size());
  }
  std::uint64_t d = digest64(staging.data(), g.packed_length);
  m.set_group_digest(group_idx, d);
  return d;
}

void unpack_group(const TensorManifest& m, std::uint32_t group_idx,
                  std::span<const std::byte> staging,
                  std::span<const std::span<std::byte>> entry_regions) {
  const auto& g = m.groups[group_idx];
  for (const auto& mem : g.members) {
    auto dst = entry_regions[mem.entry_idx];
    std::memcpy(dst.data(), staging.data() + mem.offset, dst.size());
  }
}

void seal_groups_modeled(TensorManifest& m) {
  for (std::uint32_t g = 0; g < m.groups.size(); ++g) {
    Digest64Stream ds;
    for (const auto& mem : m.groups[g].members) {
      std::string buf;
      append_u64be(buf, m.entries[mem.entry_idx].digest);
      append_u64be(buf, m.entries[mem.entry_idx].length);
      ds.update(buf.data(), buf.size());
    }
    m.set_group_digest(g, ds.finish());
  }
}

std::uint64_t modeled_entry_digest(std::string_view name, VersionId version,
                                   std::uint64_t length) {
  std::string buf(name);
  buf.push_back('\0');
  append_u64be(buf, version);
  append_u64be(buf, length);
  return digest64(buf);
}

}  // namespace refstore
