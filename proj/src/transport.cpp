#include "refstore/transport.hpp"

#include <algorithm>
#include <cstring>

namespace refstore {

ServeRegistry::Key ServeRegistry::key(const std::string& model,
                                      const std::string& replica,
                                      std::uint32_t shard) {
  return model + "|" + replica + "|" + std::to_string(shard);
}

std::shared_ptr<PeerServeState> ServeRegistry::ensure(const Key& k) {
  std::lock_guard lock(m_);
  auto& slot = map_[k];
  if (!slot) slot = std::make_shared<PeerServeState>();
  return slot;
}

std::shared_ptr<PeerServeState> ServeRegistry::find(const Key& k) const {
  std::lock_guard lock(m_);
  auto it = map_.find(k);
  return it == map_.end() ? nullptr : it->second;
}

void ServeRegistry::erase(const Key& k) {
  std::lock_guard lock(m_);
  map_.erase(k);
}

ServeSlice compute_slice(PeerServeState& st, VersionId version,
                         std::uint64_t offset, std::uint64_t max_bytes) {
  std::lock_guard lock(st.m);
  ServeSlice out;
  if (!st.serving || st.version != version) {
    out.status = Status::not_serving;
    return out;
  }
  out.progress = st.progress;
  out.complete = st.complete;
  std::uint64_t safe = st.safe_end_locked();
  if (offset >= safe) {
    out.bytes = 0;  // nothing readable yet; caller long-polls
    return out;
  }
  out.bytes = std::min(max_bytes, safe - offset);
  return out;
}

void copy_slice_locked(const PeerServeState& st, std::uint64_t offset,
                       std::uint64_t len, std::byte* out) {
  // Locate the first item containing `offset` via the end-offset table.
  std::size_t idx =
      std::upper_bound(st.item_ends.begin(), st.item_ends.end(), offset) -
      st.item_ends.begin();
  std::uint64_t produced = 0;
  while (produced < len && idx < st.item_spans.size()) {
    std::uint64_t item_start = idx == 0 ? 0 : st.item_ends[idx - 1];
    std::uint64_t in_item = offset + produced - item_start;
    auto span = st.item_spans[idx];
    std::uint64_t take =
        std::min<std::uint64_t>(len - produced, span.size() - in_item);
    std::memcpy(out + produced, span.data() + in_item, take);
    produced += take;
    ++idx;
  }
}

}  // namespace refstore
