#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "refstore/config.hpp"
#include "refstore/executor.hpp"
#include "refstore/messages.hpp"
#include "refstore/trace.hpp"
#include "refstore/types.hpp"

namespace refstore {

// Metadata-only coordinator. Tracks which replicas hold which versions and
// brokers peer-to-peer transfers; never touches tensor bytes. All state is
// soft: a fresh instance starts empty and is repopulated by clients.
//
// Single-threaded: every entry point must run on the owning executor.
class ServerCore {
 public:
  using ConnId = std::uint64_t;
  using SendFn = std::function<void(ConnId, const Frame&)>;

  ServerCore(std::string name, ServerConfig cfg, Executor* exec,
             TraceSink* trace, SendFn send);
  ~ServerCore();

  void start();  // arms the periodic sweep
  void stop();

  void on_frame(ConnId conn, const Frame& frame);
  void on_disconnect(ConnId conn);

  // Test/CLI introspection.
  struct ReplicaView {
    std::string lifecycle;  // registered|replicating|published|failed
    std::string kind;       // worker|offload
    std::optional<VersionId> version;
    std::uint32_t serving = 0;
    bool seeding = false;
    bool visible = false;
    std::uint64_t min_progress = 0;
  };
  std::optional<ReplicaView> replica_view(const std::string& model,
                                          const std::string& replica) const;
  ListingMap listing(const std::string& model) const;
  const std::string& name() const { return name_; }

 private:
  enum class Lifecycle { registered, replicating, published, failed };
  enum class Kind { worker, offload };
  enum class OpKind { publish, unpublish, replicate, update };

  struct ReplicaRec;

  struct HandleRec {
    std::uint64_t token = 0;
    ConnId conn = 0;
    ShardCoord coord;
    LocationInfo loc;
    RetentionRule retain;
    bool offload_seed = false;
    Time lease_expiry{0};
    ReplicaRec* replica = nullptr;
  };

  struct PendingReply {
    ConnId conn = 0;
    std::uint64_t req_id = 0;
  };

  struct GroupTxn {
    std::uint64_t op_seq = 0;
    OpKind kind = OpKind::publish;
    Time first_arrival{0};
    std::uint64_t order = 0;  // global arrival order, for deterministic wakes
    std::uint64_t timer_id = 0;
    bool timer_armed = false;
    bool started = false;

    std::map<std::uint32_t, PendingReply> waiting;  // shard -> reply slot
    std::set<std::uint32_t> arrived;
    std::set<std::uint32_t> acked;  // final replies sent

    // publish payload
    VersionId publish_version = 0;
    std::map<std::uint32_t, std::string> manifests;

    // replicate/update payload
    VersionSpec spec = VersionSpec::latest();
    std::optional<VersionId> update_current;

    // snapshot once resolved
    bool resolved = false;
    bool settled = false;  // transition applied, final replies flowing
    bool blocked = false;  // replicate parked on availability
    bool changed = false;  // update decision
    std::optional<VersionId> target;
    std::string source;  // chosen source replica name
    std::optional<SeedStart> seed_start_tpl;  // op_seq + shard-agnostic fields
    bool was_visible = false;                 // to restore on abort/rescind

    // offload-first subprotocol
    bool offload_needed = false;
    bool offload_done = false;
    std::set<std::uint32_t> offload_notified;
    std::set<std::uint32_t> offload_confirmed;
    std::vector<std::string> offload_endpoints;

    std::optional<Status> terminal;  // error answered to every member
  };

  struct ShardXfer {
    std::uint64_t progress = 0;
    bool complete = false;
  };

  struct ReplicaRec {
    std::string model, name;
    Kind kind = Kind::worker;
    std::uint32_t num_shards = 1;
    std::string dc;
    bool spot = false;
    std::vector<HandleRec*> handles;     // worker: per shard (may be null)
    std::vector<std::string> endpoints;  // offload: per shard
    std::string owner;                   // offload: owning worker replica
    OffloadPurpose purpose = OffloadPurpose::retention;

    Lifecycle lifecycle = Lifecycle::registered;
    bool visible = false;  // published and not hidden by unpublish/update
    std::optional<VersionId> version;
    std::optional<VersionId> last_published;  // explicit publish watermark
    std::string source;                       // while replicating
    std::uint64_t current_op_seq = 0;
    bool seeding = false;
    bool releasing = false;  // offload drain before release
    std::uint32_t serving = 0;
    std::uint64_t last_assigned = 0;
    std::vector<ShardXfer> shards;
    std::deque<std::unique_ptr<GroupTxn>> txns;  // front = active
    std::set<std::uint64_t> aborted_ops;  // recently aborted op_seqs

    bool complete_all() const {
      for (const auto& s : shards)
        if (!s.complete) return false;
      return true;
    }
    std::string endpoint_of(std::uint32_t shard) const {
      if (kind == Kind::offload) return endpoints[shard];
      return handles[shard] ? handles[shard]->loc.data_endpoint : std::string();
    }
    bool any_live_handle() const {
      for (auto* h : handles)
        if (h) return true;
      return false;
    }
  };

  struct ModelState {
    std::map<std::string, std::unique_ptr<ReplicaRec>> replicas;
    struct VersionInfo {
      std::uint32_t num_shards = 0;
      std::vector<std::string> manifests;  // per shard, encoded
    };
    std::map<VersionId, VersionInfo> versions;
    std::optional<VersionId> max_published;
  };

  // --- frame handlers ---
  void on_open(ConnId conn, const OpenReq& req);
  void on_publish(ConnId conn, const PublishReq& req);
  void on_unpublish(ConnId conn, const UnpublishReq& req);
  void on_replicate(ConnId conn, const ReplicateReq& req);
  void on_update(ConnId conn, const UpdateReq& req);
  void on_progress(const ProgressMsg& msg);
  void on_complete(const CompleteMsg& msg);
  void on_list(ConnId conn, const ListReq& req);
  void on_heartbeat(ConnId conn, const HeartbeatMsg& msg);
  void on_failure_report(ConnId conn, const FailureReportMsg& msg);
  void on_offload_confirm(ConnId conn, const OffloadConfirmMsg& msg);
  void on_close(ConnId conn, const CloseMsg& msg);

  // --- transactions ---
  GroupTxn* txn_arrive(ReplicaRec& r, std::uint64_t op_seq, OpKind kind,
                       std::uint32_t shard, PendingReply reply, Status& err);
  GroupTxn* find_txn(ReplicaRec& r, std::uint64_t op_seq);
  void maybe_start_txn(ReplicaRec& r);
  void start_txn(ReplicaRec& r, GroupTxn& t);
  void txn_commit_publish(ReplicaRec& r, GroupTxn& t);
  void start_unpublish(ReplicaRec& r, GroupTxn& t);
  void start_replicate(ReplicaRec& r, GroupTxn& t);
  void start_update(ReplicaRec& r, GroupTxn& t);
  void try_settle(ReplicaRec& r);
  void apply_settle(ReplicaRec& r, GroupTxn& t);
  ReplicaRec* settle_source(ReplicaRec& r, GroupTxn& t);
  void flush_replies(ReplicaRec& r, GroupTxn& t);
  void reply_arrival(ReplicaRec& r, GroupTxn& t, std::uint32_t shard);
  void set_terminal(ReplicaRec& r, GroupTxn& t, Status status);
  void finish_txn(ReplicaRec& r, GroupTxn& t);
  void abort_txn(ReplicaRec& r, GroupTxn& t, Status status);
  void arm_txn_timer(ReplicaRec& r, GroupTxn& t);
  void check_drain(ReplicaRec& source);
  void drop_owned_offloads(ReplicaRec& r, bool notify);

  // --- scheduling & availability ---
  std::set<VersionId> available_versions(ModelState& ms, const std::string& dc);
  ReplicaRec* pick_source(ModelState& ms, VersionId v, const std::string& dc,
                          const ReplicaRec* exclude);
  void prune_version_if_unused(ModelState& ms, VersionId v);
  Assignment make_assignment(ModelState& ms, ReplicaRec& src, VersionId v,
                             std::uint32_t shard, const std::string& req_dc);
  void wake_blocked(const std::string& model);

  // --- retention / offload ---
  std::set<VersionId> retained_versions(ModelState& ms);
  bool unpublish_needs_offload(ModelState& ms, ReplicaRec& r, VersionId v);
  void create_offload_replica(ReplicaRec& owner, VersionId v,
                              OffloadPurpose purpose,
                              std::vector<std::string> endpoints);
  void eval_offload_releases(const std::string& model);
  void release_offload(ReplicaRec& off);
  void finish_offload_release(ReplicaRec& off);

  // --- failure handling ---
  void fail_replica(ReplicaRec& r, const std::string& reason);
  void void_replication(ReplicaRec& r, const std::string& reason);
  void release_source(ReplicaRec& r);
  void evict_handle(HandleRec* h, const std::string& reason);
  void remove_replica_if_empty(ReplicaRec& r);
  void sweep();

  // --- completion ---
  void finish_replication(ReplicaRec& r);

  // --- plumbing ---
  void send_response(ConnId conn, const ResponseMsg& resp);
  void send_directive(const HandleRec* h, const DirectiveMsg& d);
  void reply_error(ConnId conn, std::uint64_t req_id, Status status);
  HandleRec* find_handle(std::uint64_t token);
  ModelState& model_state(const std::string& model);
  ReplicaRec* find_seed_replica(ReplicaRec& owner);
  void trace(const std::string& kind, KV fields);
  static const char* lifecycle_name(Lifecycle lc);

  std::string name_;
  ServerConfig cfg_;
  Executor* exec_;
  TraceSink* trace_;
  SendFn send_;

  std::map<std::string, ModelState> models_;
  std::map<std::uint64_t, std::unique_ptr<HandleRec>> handles_;  // by token
  std::map<ConnId, std::set<std::uint64_t>> conn_tokens_;
  std::uint64_t next_token_ = 1;
  std::uint64_t next_order_ = 0;
  std::uint64_t assign_tick_ = 0;
  std::uint64_t sweep_timer_ = 0;
  bool running_ = false;
};

}  // namespace refstore
