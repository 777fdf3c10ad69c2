#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "refstore/types.hpp"

namespace refstore {

// Describes one shard's tensor set for one version: per-tensor byte lengths
// and digests, plus the packing of tiny tensors into transfer groups.
// Manifests are value objects; equality of encoded bytes is identity.

struct TensorEntry {
  std::string name;
  std::uint64_t length = 0;
  std::uint64_t digest = 0;
};

struct PackedMember {
  std::uint32_t entry_idx = 0;
  std::uint64_t offset = 0;  // into the packed group buffer
};

struct PackedGroup {
  std::uint64_t packed_length = 0;
  std::uint64_t digest = 0;  // digest of the packed buffer
  std::vector<PackedMember> members;
};

// Unit of transfer and of progress accounting: either one big entry or one
// packed group. Items are ordered by their first entry's registration order;
// a replica's transferred prefix is "the first `progress` items".
struct TransferItem {
  bool is_group = false;
  std::uint32_t index = 0;  // entry index or group index
  std::uint64_t length = 0;
  std::uint64_t digest = 0;
  std::uint64_t stream_offset = 0;  // byte offset in the concatenated stream
};

struct ManifestLimits {
  std::uint64_t tiny_threshold = 2ull << 20;  // entries below this get packed
  std::uint64_t group_target = 64ull << 20;   // close a group at this size
};

class TensorManifest {
 public:
  std::vector<TensorEntry> entries;
  std::vector<PackedGroup> groups;

  // Rebuilds derived state (items, lookups). Returns structural validity.
  Status finalize();

  const std::vector<TransferItem>& items() const { return items_; }
  std::uint64_t total_bytes() const { return total_bytes_; }

  // Group that packs this entry, if any.
  std::optional<std::uint32_t> group_of_entry(std::uint32_t entry_idx) const;

  struct ItemRef {
    std::uint32_t item = 0;
    std::uint64_t offset = 0;  // entry's offset within the item
  };
  ItemRef item_of_entry(std::uint32_t entry_idx) const;

  // Updates a group digest in both the group and its derived item.
  void set_group_digest(std::uint32_t group_idx, std::uint64_t digest);

  // Canonical byte encoding (see docs/protocol.md). decode() finalizes.
  std::string encode() const;
  static Result<TensorManifest> decode(std::string_view data);

  bool same_as(const TensorManifest& other) const;

 private:
  std::vector<TransferItem> items_;
  std::vector<std::int32_t> member_of_;  // entry -> group index or -1
  std::uint64_t total_bytes_ = 0;
};

// Forms entries and packed groups from (name, length, digest) descriptors in
// registration order. Group digests are left 0; fill them with pack_group()
// (real payloads) or seal_groups_modeled() (modeled payloads).
struct EntryDesc {
  std::string name;
  std::uint64_t length = 0;
  std::uint64_t digest = 0;
};
Result<TensorManifest> assemble_manifest(std::span<const EntryDesc> descs,
                                         const ManifestLimits& limits);

// Copies member bytes into the group's staging buffer and returns its digest
// (also stored into the manifest). entry_regions is indexed by entry index.
std::uint64_t pack_group(TensorManifest& m, std::uint32_t group_idx,
                         std::span<const std::span<const std::byte>> entry_regions,
                         std::span<std::byte> staging);

// Scatters a packed buffer back into member regions.
void unpack_group(const TensorManifest& m, std::uint32_t group_idx,
                  std::span<const std::byte> staging,
                  std::span<const std::span<std::byte>> entry_regions);

// Deterministic group digests for size-only payloads.
void seal_groups_modeled(TensorManifest& m);

// Deterministic per-entry pseudo digest for size-only payloads.
std::uint64_t modeled_entry_digest(std::string_view name, VersionId version,
                                   std::uint64_t length);

}  // namespace refstore
