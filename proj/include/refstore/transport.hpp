#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "refstore/codec.hpp"
#include "refstore/executor.hpp"
#include "refstore/types.hpp"

namespace refstore {

// ---------------------------------------------------------------------------
// Control plane: one ordered frame connection per shard handle.

class Channel {
 public:
  virtual ~Channel() = default;
  virtual bool send(const Frame& f) = 0;  // false once disconnected
  virtual void close() = 0;
};

struct ChannelCallbacks {
  // Both run on the executor passed to connect().
  std::function<void(Frame)> on_frame;
  std::function<void()> on_disconnect;
};

// Dials control connections to a named server address.
class ControlPlane {
 public:
  virtual ~ControlPlane() = default;
  virtual Result<std::shared_ptr<Channel>> connect(const std::string& server,
                                                   Executor* exec,
                                                   ChannelCallbacks cbs) = 0;
};

// ---------------------------------------------------------------------------
// Data plane: peers pull byte ranges of a (replica, version, shard) item
// stream from each other. Serving is prefix-safe: only bytes belonging to
// the first `progress` items may be read.

// State a shard publishes for peers to pull from. The owning client core
// mutates it; transport threads read it under the lock. `epoch` bumps when
// serving stops or retargets so long-polls can bail out.
struct PeerServeState {
  std::mutex m;
  std::condition_variable cv;
  bool serving = false;
  VersionId version = 0;
  std::uint64_t progress = 0;  // items readable
  bool complete = false;
  std::uint64_t epoch = 0;
  // Per item: end offset in the concatenated stream, and (real payload mode)
  // the backing bytes. spans empty in modeled mode.
  std::vector<std::uint64_t> item_ends;
  std::vector<std::span<const std::byte>> item_spans;

  std::uint64_t safe_end_locked() const {
    return progress == 0 ? 0 : item_ends[progress - 1];
  }
};

// (model, replica, shard) -> serve state, for every shard this process hosts.
class ServeRegistry {
 public:
  using Key = std::string;  // "model|replica|shard"
  static Key key(const std::string& model, const std::string& replica,
                 std::uint32_t shard);

  std::shared_ptr<PeerServeState> ensure(const Key& k);
  std::shared_ptr<PeerServeState> find(const Key& k) const;
  void erase(const Key& k);

 private:
  mutable std::mutex m_;
  std::map<Key, std::shared_ptr<PeerServeState>> map_;
};

struct PullSpec {
  std::string model, replica;
  VersionId version = 0;
  std::uint32_t shard = 0;
  std::uint64_t offset = 0;     // into the item stream
  std::uint64_t max_bytes = 0;  // clamped to the source's safe prefix
  std::shared_ptr<std::atomic<bool>> cancel;  // best-effort
  // Bumped by the transport whenever the source shows signs of life (bytes
  // arriving, keepalive ticks). The puller's dead-man timer watches it.
  std::shared_ptr<std::atomic<std::uint64_t>> activity;
};

// Destination for pulled bytes: ordered spans covering the requested range.
// Empty in modeled mode (sizes only).
using PullDest = std::vector<std::span<std::byte>>;

struct PullResult {
  Status status = Status::ok;
  std::uint64_t source_progress = 0;  // items at serve time
  bool source_complete = false;
  std::uint64_t bytes = 0;  // actually transferred
  // Modeled-payload fault injection: the bytes "arrived" but are wrong, to be
  // caught at item verification. Real transports never set this; corruption
  // there is caught by actual digest checks.
  bool poisoned = false;
};

struct QuerySpec {
  std::string model, replica;
  VersionId version = 0;
  std::uint32_t shard = 0;
  std::uint64_t min_items = 0;  // long-poll until progress >= this
};

struct QueryResult {
  Status status = Status::ok;
  std::uint64_t progress = 0;
  bool complete = false;
};

class DataTransport {
 public:
  virtual ~DataTransport() = default;
  // Completion (and nothing else) is posted onto `exec`.
  virtual void async_pull(const std::string& endpoint, const PullSpec& spec,
                          PullDest dest, Executor* exec,
                          std::function<void(PullResult)> done) = 0;
  // Long-poll with a bounded server-side wait: replies with current progress
  // at the latest after the keepalive deadline, so a live source produces
  // periodic replies and a dead one produces silence.
  virtual void async_query(const std::string& endpoint, const QuerySpec& spec,
                           Executor* exec,
                           std::function<void(QueryResult)> done) = 0;
};

// Shared serve-side math: how many bytes of [offset, offset+max_bytes) are
// safe to serve right now. Returns not_serving / version mismatch errors.
struct ServeSlice {
  Status status = Status::ok;
  std::uint64_t progress = 0;
  bool complete = false;
  std::uint64_t bytes = 0;
};
ServeSlice compute_slice(PeerServeState& st, VersionId version,
                         std::uint64_t offset, std::uint64_t max_bytes);

// Copies [offset, offset+len) of the item stream out of the serve spans.
// Caller must hold st.m and have validated the range against safe_end.
void copy_slice_locked(const PeerServeState& st, std::uint64_t offset,
                       std::uint64_t len, std::byte* out);

}  // namespace refstore
