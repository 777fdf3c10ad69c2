#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "refstore/config.hpp"
#include "refstore/executor.hpp"
#include "refstore/manifest.hpp"
#include "refstore/messages.hpp"
#include "refstore/trace.hpp"
#include "refstore/transport.hpp"
#include "refstore/types.hpp"

namespace refstore {

// Client-side state machine for one replica whose shard handles all live in
// this process. Owns the control connection(s), heartbeat lease renewal with
// failover, the pull loops that materialize versions into registered tensor
// regions, host-memory offload buffers (retention parking and cross-link
// seeding), and the serve state peers pull from.
//
// Everything runs on the executor; public methods post onto it and invoke
// their callbacks there too. One operation is in flight at a time (the
// public API mirrors a single-caller handle); registration calls must happen
// before the op that needs them and are executed inline.
class ClientCore {
 public:
  struct OpResult {
    Status status = Status::ok;
    std::optional<VersionId> version;  // resolved/affected version
    bool changed = false;              // update: bytes moved
    ListingMap listing;                // list/wait_for
  };
  using OpFn = std::function<void(OpResult)>;

  struct Stats {
    std::uint64_t bytes_pulled = 0;
    std::uint64_t bytes_pulled_cross_dc = 0;
    std::uint64_t bytes_copied_local = 0;  // offload snapshots + seed consume
    std::uint64_t items_verified = 0;
    std::uint64_t checksum_failures = 0;
    std::uint64_t failure_reports = 0;
    std::uint64_t failovers = 0;
  };

  ClientCore(std::string model, std::string replica, std::uint32_t num_shards,
             ClientConfig cfg, Executor* exec, TraceSink* trace,
             ControlPlane* control, DataTransport* data,
             ServeRegistry* serves);
  ~ClientCore();

  ClientCore(const ClientCore&) = delete;
  ClientCore& operator=(const ClientCore&) = delete;

  // --- setup (before open) -------------------------------------------------
  // Per-shard advertised pull address; defaults to cfg.data_endpoint.
  void set_shard_endpoint(std::uint32_t shard, std::string endpoint);
  void set_retention(RetentionRule rule);
  // Registers one tensor of one shard, in registration order. The region is
  // caller-owned and must outlive the core (weights live in place).
  Status register_tensor(std::uint32_t shard, std::string name,
                         std::span<std::byte> region);
  // Size-only registration: the replica moves metadata and simulated bytes
  // but holds no real payload. A replica is either fully real or fully
  // modeled.
  Status register_tensor_modeled(std::uint32_t shard, std::string name,
                                 std::uint64_t length);
  Status unregister();  // all shards; rejected while published/replicating

  // Test hook: decides whether host memory for an offload copy can be
  // allocated (default: always yes).
  void set_offload_alloc_hook(std::function<bool()> hook);

  // --- operations ----------------------------------------------------------
  void open(OpFn done);
  void publish(VersionId version, OpFn done);
  void unpublish(OpFn done);
  void replicate(VersionSpec spec, OpFn done);
  void update(VersionSpec spec, OpFn done);
  void list(OpFn done);
  // Polls list() every cfg.wait_poll until pred(listing) holds; timeout <= 0
  // waits forever.
  void wait_for(std::function<bool(const ListingMap&)> pred, Duration timeout,
                OpFn done);
  void close(OpFn done);

  // --- introspection (executor context) ------------------------------------
  std::optional<VersionId> current_version() const { return current_version_; }
  bool is_published() const { return published_; }
  const Stats& stats() const { return stats_; }
  const std::string& model() const { return model_; }
  const std::string& replica() const { return replica_; }
  std::uint32_t num_shards() const { return num_shards_; }
  // Registered region bytes of one entry (real mode), for test verification.
  std::span<const std::byte> region_of(std::uint32_t shard,
                                       const std::string& name) const;

 private:
  class TransferTask;
  friend class TransferTask;

  // ---- registration & payloads ----
  struct RegEntry {
    std::string name;
    std::span<std::byte> region;  // empty in modeled mode
    std::uint64_t length = 0;
  };
  struct ShardSet {
    std::vector<RegEntry> entries;
    std::map<std::string, std::uint32_t> by_name;
    bool modeled = false;
  };
  // The bytes and packaging behind one served version: where each transfer
  // item's payload lives. Device payloads point big items at registered
  // regions and keep packed-group bytes in group_bufs; host payloads
  // (offload lanes) keep every item in item_bufs.
  struct Payload {
    TensorManifest manifest;
    std::string encoded;
    std::vector<std::string> group_bufs;  // by group index (device payloads)
    std::vector<std::string> item_bufs;   // by item index (host payloads)
  };
  using PayloadPtr = std::shared_ptr<Payload>;

  struct OffloadLane {
    OffloadPurpose purpose = OffloadPurpose::retention;
    VersionId version = 0;
    PayloadPtr payload;
    std::shared_ptr<PeerServeState> serve;
    ServeRegistry::Key key;
  };

  struct Shard {
    std::uint32_t idx = 0;
    std::string endpoint;
    std::uint64_t token = 0;
    ShardSet set;
    PayloadPtr holding;  // device payload being served / filled
    // Verified-prefix memory for resuming an interrupted fill.
    std::optional<VersionId> partial_version;
    std::uint64_t partial_items = 0;
    std::shared_ptr<PeerServeState> serve;  // primary lane
    std::map<VersionId, OffloadLane> retain_lanes;
    std::map<VersionId, OffloadLane> seed_lanes;
    std::shared_ptr<TransferTask> task;       // primary transfer
    std::shared_ptr<TransferTask> seed_task;  // background seed fill
  };

  // ---- op machinery ----
  enum class OpKind {
    none,
    open,
    publish,
    unpublish,
    replicate,
    update,
    list,
    close
  };
  struct ActiveOp {
    OpKind kind = OpKind::none;
    std::uint64_t gen = 0;     // start_op generation, for stale-closure checks
    std::uint64_t op_seq = 0;  // group ops only
    OpFn done;
    VersionSpec spec = VersionSpec::latest();
    VersionId publish_version = 0;
    std::vector<PayloadPtr> staged;               // publish: built payloads
    std::map<std::uint32_t, ResponseMsg> finals;  // shard -> final reply
    bool transfer_phase = false;
    std::uint32_t transfers_left = 0;
    bool failed = false;
    std::optional<VersionId> result_version;
    bool result_changed = false;
    ListingMap result_listing;
    int close_phase = 0;  // close: 0 = maybe unpublish first, 1 = teardown
    // wait_for state
    std::function<bool(const ListingMap&)> wait_pred;
    Time wait_deadline{0};
    std::function<void()> repoll;
  };

  // ---- connection ----
  enum class ConnState { down, ready };

  static const char* op_name(OpKind k);
  void trace(const std::string& kind, KV kv = {});
  Time now() const;

  // connection & routing
  bool ensure_channel();
  // Runs k(ok) once a channel is ready and every shard handle is open,
  // dialing/opening as needed; concurrent callers share one open sequence.
  void ensure_opened(std::function<void(Status)> k);
  void flush_open_waiters(Status st);
  void drop_channel();
  void handle_frame(std::uint64_t epoch, Frame f);
  void handle_disconnect(std::uint64_t epoch);
  void handle_response(const ResponseMsg& m);
  void handle_directive(const DirectiveMsg& d);
  void heartbeat_tick();
  void arm_heartbeat();
  void failover(const std::string& reason);
  bool send(const Frame& f);
  std::uint64_t next_req();

  // op flow
  void start_op(OpKind kind, OpFn done, std::function<void()> run);
  void finish_op(Status st);
  void fail_op(Status st);
  void run_open();
  void run_publish();
  void run_unpublish();
  void run_replicate();
  void run_update();
  void run_list();
  void run_close();
  void finish_close();
  // Sends the per-shard frames of the active group op and routes replies.
  void issue_group_requests();
  void on_group_reply(std::uint32_t shard, const ResponseMsg& m);
  void group_replies_done();
  void begin_transfers();
  void task_progress(std::uint32_t shard, TransferRole role,
                     std::uint64_t items);
  void task_done(std::uint32_t shard, TransferRole role, Status st,
                 bool server_knows);

  // payload & serving
  Result<PayloadPtr> build_publish_payload(Shard& sh, VersionId v);
  Status bind_receive_payload(Shard& sh, const std::string& manifest_bytes,
                              VersionId v, PayloadPtr& out,
                              std::uint64_t& resume_items);
  void serve_payload(Shard& sh, VersionId v, const PayloadPtr& p,
                     std::uint64_t progress, bool complete);
  void stop_primary_serving(Shard& sh);
  std::vector<std::span<const std::byte>> payload_spans(Shard& sh,
                                                        const Payload& p);

  // offload lanes
  bool make_retention_lane(Shard& sh, VersionId v);
  void start_seed_fill(std::uint32_t shard, const SeedStart& seed);
  void release_lane(Shard& sh, OffloadPurpose purpose, VersionId v);
  void drop_seed_lanes(const std::string& reason);
  void teardown();  // stop timers/tasks/serving and drop the channel

  const std::string model_;
  const std::string replica_;
  const std::uint32_t num_shards_;
  ClientConfig cfg_;
  Executor* exec_;
  TraceSink* sink_;
  ControlPlane* control_;
  DataTransport* data_;
  ServeRegistry* serves_;

  std::vector<Shard> shards_;
  RetentionRule retain_;
  std::function<bool()> offload_alloc_ok_;

  ConnState conn_state_ = ConnState::down;
  std::shared_ptr<Channel> channel_;
  std::uint64_t channel_epoch_ = 0;
  std::size_t server_idx_ = 0;
  std::size_t connect_failures_ = 0;  // consecutive, across the server list
  bool opened_ = false;               // tokens valid on current channel
  bool open_inflight_ = false;
  std::vector<std::function<void(Status)>> open_waiters_;
  Time last_server_ack_{0};
  std::uint64_t hb_timer_ = 0;
  bool hb_armed_ = false;
  bool closed_ = false;

  std::uint64_t next_req_ = 1;
  std::uint64_t op_seq_ = 0;
  std::uint64_t op_gen_ = 0;
  // Reply router; a handler returns true when it is finished (offload-first
  // notifications keep the handler alive until the final reply).
  std::map<std::uint64_t, std::function<bool(const ResponseMsg&)>> routes_;

  std::unique_ptr<ActiveOp> op_;
  std::optional<VersionId> current_version_;
  bool published_ = false;

  Stats stats_;
};

}  // namespace refstore
