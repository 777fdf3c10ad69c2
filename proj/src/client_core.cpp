#include "refstore/client_core.hpp"

#include <algorithm>
#include <utility>

#include "refstore/digest.hpp"

namespace refstore {

namespace {

std::string n2s(std::uint64_t v) { return std::to_string(v); }

std::span<std::byte> str_span(std::string& s) {
  return {reinterpret_cast<std::byte*>(s.data()), s.size()};
}

std::span<const std::byte> str_cspan(const std::string& s) {
  return {reinterpret_cast<const std::byte*>(s.data()), s.size()};
}

// End of the k-th item prefix in the concatenated stream (0 -> 0 bytes).
std::uint64_t item_end_at(const TensorManifest& m, std::uint64_t k) {
  if (k == 0) return 0;
  const TransferItem& it = m.items()[k - 1];
  return it.stream_offset + it.length;
}

std::vector<std::uint64_t> make_item_ends(const TensorManifest& m) {
  std::vector<std::uint64_t> ends;
  ends.reserve(m.items().size());
  for (const TransferItem& it : m.items())
    ends.push_back(it.stream_offset + it.length);
  return ends;
}

}  // namespace

// ---------------------------------------------------------------------------
// TransferTask: drives one shard's fill of one version. Pulls the item
// stream from the assigned source in chunks, verifies each item's digest as
// soon as its bytes are in, advances the local serve watermark so peers can
// chase, and escalates source trouble (silence past the pull timeout, bad
// checksums) through failure reports until the server retargets us or the
// attempt is abandoned.

class ClientCore::TransferTask
    : public std::enable_shared_from_this<ClientCore::TransferTask> {
 public:
  TransferTask(ClientCore* core, std::uint32_t shard, TransferRole role,
               std::uint64_t op_seq, Assignment a, PayloadPtr payload,
               std::uint64_t resume_items, bool host_dest)
      : core_(core),
        shard_(shard),
        role_(role),
        op_seq_(op_seq),
        a_(std::move(a)),
        payload_(std::move(payload)),
        host_dest_(host_dest) {
    modeled_ = core_->shards_[shard_].set.modeled;
    verified_ = resume_items;
    stream_pos_ = item_end_at(payload_->manifest, resume_items);
    reports_left_ = core_->cfg_.checksum_retries;
    src_complete_ = a_.source_complete;
    local_ = a_.local_seed_consume;
    if (!modeled_) build_dests();
    cancel_flag_ = std::make_shared<std::atomic<bool>>(false);
    activity_ = std::make_shared<std::atomic<std::uint64_t>>(0);
  }

  void start() {
    auto self = shared_from_this();  // finish() may drop the owning ref
    refresh_alive();
    if (!local_) arm_deadman();
    step();
  }

  // Silent stop: no further callbacks into the core, in-flight pulls are
  // abandoned (their completions are dropped by the epoch guard).
  void cancel() {
    if (canceled_ || finished_) return;
    canceled_ = true;
    cancel_flag_->store(true);
    pull_epoch_++;
    if (deadman_timer_) {
      core_->exec_->cancel(deadman_timer_);
      deadman_timer_ = 0;
    }
  }

  std::uint64_t op_seq() const { return op_seq_; }
  TransferRole role() const { return role_; }
  VersionId version() const { return a_.version; }
  std::uint64_t verified() const { return verified_; }

  // Routed reply to a failure report this task sent.
  void on_report_reply(const ResponseMsg& m) {
    if (canceled_ || finished_) return;
    waiting_report_ = false;
    refresh_alive();
    if (m.status == Status::ok && m.assignment) {
      retarget(*m.assignment);
      return;
    }
    // The server gave up on this fill (no replacement source / op aborted);
    // it already voided the replication, so no completion message is owed.
    finish(ok(m.status) ? Status::protocol_error : m.status, true);
  }

 private:
  void build_dests() {
    const TensorManifest& m = payload_->manifest;
    const auto& items = m.items();
    item_dests_.resize(items.size());
    if (host_dest_) {
      for (std::size_t i = 0; i < items.size(); ++i)
        item_dests_[i] = str_span(payload_->item_bufs[i]);
      return;
    }
    const ShardSet& set = core_->shards_[shard_].set;
    entry_regions_.resize(m.entries.size());
    for (std::size_t e = 0; e < m.entries.size(); ++e)
      entry_regions_[e] =
          set.entries[set.by_name.at(m.entries[e].name)].region;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const TransferItem& it = items[i];
      item_dests_[i] = it.is_group ? str_span(payload_->group_bufs[it.index])
                                   : entry_regions_[it.index];
    }
  }

  // Ordered destination spans covering [from, from+len) of the item stream.
  std::vector<std::span<std::byte>> dest_spans(std::uint64_t from,
                                               std::uint64_t len) {
    std::vector<std::span<std::byte>> out;
    const auto& items = payload_->manifest.items();
    std::size_t i = verified_;
    while (i < items.size() &&
           items[i].stream_offset + items[i].length <= from)
      ++i;
    for (; i < items.size(); ++i) {
      const TransferItem& it = items[i];
      std::uint64_t lo = std::max(from, it.stream_offset);
      std::uint64_t hi = std::min(it.stream_offset + it.length, from + len);
      if (hi <= lo) break;
      out.push_back(item_dests_[i].subspan(lo - it.stream_offset, hi - lo));
    }
    return out;
  }

  void mark_poisoned(std::uint64_t from, std::uint64_t len) {
    const auto& items = payload_->manifest.items();
    for (std::size_t i = verified_; i < items.size(); ++i) {
      const TransferItem& it = items[i];
      if (it.stream_offset + it.length <= from) continue;
      if (it.stream_offset >= from + len) break;
      poisoned_.insert(i);
    }
  }

  void step() {
    if (canceled_ || finished_ || waiting_report_ || in_flight_) return;
    const TensorManifest& m = payload_->manifest;
    if (verified_ == m.items().size()) {
      finish(Status::ok, false);
      return;
    }
    if (local_) {
      local_step();
      return;
    }
    std::uint64_t total = m.total_bytes();
    std::uint64_t limit = src_complete_ ? total : item_end_at(m, src_progress_);
    if (stream_pos_ >= limit) {
      issue_query();
      return;
    }
    // Chunked pulls keep our own watermark moving so downstream peers can
    // chase us; with pipelining off, a complete source is drained in one
    // whole-remainder request instead.
    std::uint64_t window = core_->cfg_.chunk_bytes;
    if (!core_->cfg_.pipeline && src_complete_) window = total - stream_pos_;
    if (window == 0) window = 1;
    issue_pull(std::min(limit - stream_pos_, window));
  }

  void issue_pull(std::uint64_t n) {
    in_flight_ = true;
    PullSpec spec;
    spec.model = core_->model_;
    spec.replica = a_.source_replica;
    spec.version = a_.version;
    spec.shard = shard_;
    spec.offset = stream_pos_;
    spec.max_bytes = n;
    spec.cancel = cancel_flag_;
    spec.activity = activity_;
    PullDest dest = modeled_ ? PullDest{} : dest_spans(stream_pos_, n);
    auto self = shared_from_this();
    std::uint64_t ep = pull_epoch_;
    core_->data_->async_pull(a_.source_endpoint, spec, std::move(dest),
                             core_->exec_,
                             [self, ep](PullResult r) { self->on_pull(ep, r); });
  }

  void on_pull(std::uint64_t ep, const PullResult& r) {
    if (canceled_ || finished_ || ep != pull_epoch_) return;
    in_flight_ = false;
    refresh_alive();
    if (r.status != Status::ok) {
      core_->trace("pull_error", {{"shard", n2s(shard_)},
                                  {"src", a_.source_replica},
                                  {"status", status_name(r.status)}});
      suspect(FailReason::timeout);
      return;
    }
    src_progress_ = std::max(src_progress_, r.source_progress);
    src_complete_ = src_complete_ || r.source_complete;
    if (r.bytes == 0) {
      issue_query();  // nothing readable yet; wait for source movement
      return;
    }
    core_->stats_.bytes_pulled += r.bytes;
    if (a_.cross_dc) core_->stats_.bytes_pulled_cross_dc += r.bytes;
    if (r.poisoned) mark_poisoned(stream_pos_, r.bytes);
    stream_pos_ += r.bytes;
    if (!verify_ready()) return;
    step();
  }

  void issue_query() {
    in_flight_ = true;
    QuerySpec q;
    q.model = core_->model_;
    q.replica = a_.source_replica;
    q.version = a_.version;
    q.shard = shard_;
    q.min_items = verified_ + 1;
    auto self = shared_from_this();
    std::uint64_t ep = pull_epoch_;
    core_->data_->async_query(
        a_.source_endpoint, q, core_->exec_,
        [self, ep](QueryResult r) { self->on_query(ep, r); });
  }

  void on_query(std::uint64_t ep, const QueryResult& r) {
    if (canceled_ || finished_ || ep != pull_epoch_) return;
    in_flight_ = false;
    refresh_alive();
    if (r.status != Status::ok) {
      core_->trace("query_error", {{"shard", n2s(shard_)},
                                   {"src", a_.source_replica},
                                   {"status", status_name(r.status)}});
      suspect(FailReason::timeout);
      return;
    }
    src_progress_ = std::max(src_progress_, r.progress);
    src_complete_ = src_complete_ || r.complete;
    step();
  }

  // Consume the shard's own host-memory seed buffer: no network, just
  // chunked copies into the destination payload on the executor.
  void local_step() {
    if (canceled_ || finished_) return;
    if (!local_src_) {
      local_src_ = core_->serves_->find(
          ServeRegistry::key(core_->model_, a_.source_replica, shard_));
      if (!local_src_) {
        finish(Status::version_unavailable, false);
        return;
      }
    }
    const TensorManifest& m = payload_->manifest;
    std::uint64_t want = std::min<std::uint64_t>(
        core_->cfg_.chunk_bytes ? core_->cfg_.chunk_bytes : 1,
        m.total_bytes() - stream_pos_);
    ServeSlice s = compute_slice(*local_src_, a_.version, stream_pos_, want);
    if (s.status != Status::ok || s.bytes == 0) {
      finish(s.status != Status::ok ? s.status : Status::version_unavailable,
             false);
      return;
    }
    if (!modeled_) {
      auto dst = dest_spans(stream_pos_, s.bytes);
      std::lock_guard lk(local_src_->m);
      std::uint64_t off = stream_pos_;
      for (auto d : dst) {
        copy_slice_locked(*local_src_, off, d.size(), d.data());
        off += d.size();
      }
    }
    stream_pos_ += s.bytes;
    core_->stats_.bytes_copied_local += s.bytes;
    if (!verify_ready()) return;
    if (verified_ == m.items().size()) {
      finish(Status::ok, false);
      return;
    }
    auto self = shared_from_this();
    core_->exec_->post([self] { self->local_step(); });
  }

  // Verifies every item fully covered by stream_pos_. Returns false when a
  // verification failure took over control flow.
  bool verify_ready() {
    const TensorManifest& m = payload_->manifest;
    const auto& items = m.items();
    while (verified_ < items.size()) {
      const TransferItem& it = items[verified_];
      if (stream_pos_ < it.stream_offset + it.length) break;
      bool good;
      if (modeled_) {
        good = poisoned_.find(verified_) == poisoned_.end();
      } else {
        good = digest64(std::span<const std::byte>(item_dests_[verified_])) ==
               it.digest;
      }
      if (!good) {
        item_failed();
        return false;
      }
      poisoned_.erase(verified_);
      if (!modeled_ && !host_dest_ && it.is_group)
        unpack_group(m, it.index, item_dests_[verified_], entry_regions_);
      verified_++;
      item_attempts_ = 0;
      reports_left_ = core_->cfg_.checksum_retries;
      core_->stats_.items_verified++;
      core_->task_progress(shard_, role_, verified_);
      if (canceled_ || finished_) return false;
    }
    return true;
  }

  void item_failed() {
    core_->stats_.checksum_failures++;
    const TransferItem& it = payload_->manifest.items()[verified_];
    poisoned_.erase(verified_);
    stream_pos_ = it.stream_offset;
    item_attempts_++;
    core_->trace("item_verify_failed", {{"shard", n2s(shard_)},
                                        {"item", n2s(verified_)},
                                        {"attempt", n2s(item_attempts_)},
                                        {"src", a_.source_replica}});
    if (item_attempts_ <= 1) {
      step();  // one quiet same-source retry
      return;
    }
    if (reports_left_ <= 0) {
      finish(Status::checksum_mismatch, false);
      return;
    }
    reports_left_--;
    item_attempts_ = 0;
    send_report(FailReason::checksum);
  }

  // The current source looks unusable; discard the partial item, drop any
  // in-flight request, and ask the server for a replacement.
  void suspect(FailReason reason) {
    if (canceled_ || finished_ || waiting_report_) return;
    pull_epoch_++;
    cancel_flag_->store(true);
    cancel_flag_ = std::make_shared<std::atomic<bool>>(false);
    in_flight_ = false;
    const auto& items = payload_->manifest.items();
    if (verified_ < items.size()) stream_pos_ = items[verified_].stream_offset;
    send_report(reason);
  }

  void send_report(FailReason reason) {
    waiting_report_ = true;
    core_->stats_.failure_reports++;
    FailureReportMsg msg;
    msg.req_id = core_->next_req();
    msg.token = core_->shards_[shard_].token;
    msg.op_seq = op_seq_;
    msg.role = role_;
    msg.failed_replica = a_.source_replica;
    msg.reason = reason;
    core_->trace("failure_report",
                 {{"shard", n2s(shard_)},
                  {"src", a_.source_replica},
                  {"reason", reason == FailReason::timeout ? "timeout"
                                                           : "checksum"}});
    auto self = shared_from_this();
    core_->routes_[msg.req_id] = [self](const ResponseMsg& m) {
      self->on_report_reply(m);
      return true;
    };
    core_->send(msg.to_frame());
  }

  void retarget(const Assignment& a) {
    a_ = a;
    src_progress_ = 0;
    src_complete_ = a_.source_complete;
    local_ = a_.local_seed_consume;
    local_src_.reset();
    const auto& items = payload_->manifest.items();
    if (verified_ < items.size()) stream_pos_ = items[verified_].stream_offset;
    core_->trace("retargeted", {{"shard", n2s(shard_)},
                                {"src", a_.source_replica},
                                {"local", local_ ? "1" : "0"}});
    if (local_ && deadman_timer_) {
      core_->exec_->cancel(deadman_timer_);
      deadman_timer_ = 0;
    }
    if (!local_) {
      refresh_alive();
      if (!deadman_timer_) arm_deadman();
    }
    step();
  }

  void refresh_alive() {
    last_seen_activity_ = activity_->load();
    last_alive_ = core_->now();
  }

  void arm_deadman() {
    if (canceled_ || finished_) return;
    Duration d = core_->cfg_.pull_timeout / 2;
    if (d <= Duration::zero()) d = std::chrono::milliseconds(1);
    auto self = shared_from_this();
    deadman_timer_ = core_->exec_->schedule(d, [self] { self->deadman_tick(); });
  }

  void deadman_tick() {
    deadman_timer_ = 0;
    if (canceled_ || finished_ || local_) return;
    std::uint64_t act = activity_->load();
    if (act != last_seen_activity_) {
      last_seen_activity_ = act;
      last_alive_ = core_->now();
    }
    if (!waiting_report_ &&
        core_->now() - last_alive_ > core_->cfg_.pull_timeout) {
      core_->trace("pull_stalled",
                   {{"shard", n2s(shard_)}, {"src", a_.source_replica}});
      suspect(FailReason::timeout);
    }
    arm_deadman();
  }

  void finish(Status st, bool server_knows) {
    if (finished_ || canceled_) return;
    finished_ = true;
    cancel_flag_->store(true);
    pull_epoch_++;
    if (deadman_timer_) {
      core_->exec_->cancel(deadman_timer_);
      deadman_timer_ = 0;
    }
    core_->task_done(shard_, role_, st, server_knows);
  }

  ClientCore* core_;
  std::uint32_t shard_;
  TransferRole role_;
  std::uint64_t op_seq_;
  Assignment a_;
  PayloadPtr payload_;
  bool host_dest_;
  bool modeled_ = false;
  bool local_ = false;
  std::shared_ptr<PeerServeState> local_src_;

  std::vector<std::span<std::byte>> item_dests_;     // by item index
  std::vector<std::span<std::byte>> entry_regions_;  // by manifest entry index

  std::uint64_t verified_ = 0;    // items verified
  std::uint64_t stream_pos_ = 0;  // contiguous bytes fetched
  std::uint64_t src_progress_ = 0;
  bool src_complete_ = false;
  std::set<std::uint64_t> poisoned_;  // modeled items to fail at verify

  int item_attempts_ = 0;
  int reports_left_ = 0;
  bool in_flight_ = false;
  bool waiting_report_ = false;
  bool canceled_ = false;
  bool finished_ = false;
  std::uint64_t pull_epoch_ = 0;  // invalidates in-flight completions

  std::shared_ptr<std::atomic<bool>> cancel_flag_;
  std::shared_ptr<std::atomic<std::uint64_t>> activity_;
  std::uint64_t last_seen_activity_ = 0;
  Time last_alive_{0};
  std::uint64_t deadman_timer_ = 0;
};

// ---------------------------------------------------------------------------
// Construction / setup

ClientCore::ClientCore(std::string model, std::string replica,
                       std::uint32_t num_shards, ClientConfig cfg,
                       Executor* exec, TraceSink* trace, ControlPlane* control,
                       DataTransport* data, ServeRegistry* serves)
    : model_(std::move(model)),
      replica_(std::move(replica)),
      num_shards_(num_shards ? num_shards : 1),
      cfg_(std::move(cfg)),
      exec_(exec),
      sink_(trace),
      control_(control),
      data_(data),
      serves_(serves),
      offload_alloc_ok_([] { return true; }) {
  shards_.resize(num_shards_);
  for (std::uint32_t i = 0; i < num_shards_; ++i) {
    shards_[i].idx = i;
    shards_[i].endpoint = cfg_.data_endpoint;
  }
}

ClientCore::~ClientCore() {
  closed_ = true;
  teardown();
  op_.reset();
}

void ClientCore::set_shard_endpoint(std::uint32_t shard, std::string endpoint) {
  if (shard < num_shards_) shards_[shard].endpoint = std::move(endpoint);
}

void ClientCore::set_retention(RetentionRule rule) { retain_ = std::move(rule); }

void ClientCore::set_offload_alloc_hook(std::function<bool()> hook) {
  offload_alloc_ok_ = hook ? std::move(hook) : [] { return true; };
}

Status ClientCore::register_tensor(std::uint32_t shard, std::string name,
                                   std::span<std::byte> region) {
  if (closed_) return Status::closed;
  if (shard >= num_shards_ || name.empty() ||
      name.find('|') != std::string::npos)
    return Status::invalid_argument;
  if (region.empty()) return Status::invalid_argument;
  if (published_ || op_) return Status::invalid_state;
  Shard& sh = shards_[shard];
  if (!sh.set.entries.empty() && sh.set.modeled) return Status::invalid_state;
  if (sh.set.by_name.count(name)) return Status::already_exists;
  sh.set.modeled = false;
  RegEntry e;
  e.name = std::move(name);
  e.region = region;
  e.length = region.size();
  sh.set.by_name.emplace(e.name, sh.set.entries.size());
  sh.set.entries.push_back(std::move(e));
  return Status::ok;
}

Status ClientCore::register_tensor_modeled(std::uint32_t shard,
                                           std::string name,
                                           std::uint64_t length) {
  if (closed_) return Status::closed;
  if (shard >= num_shards_ || name.empty() ||
      name.find('|') != std::string::npos || length == 0)
    return Status::invalid_argument;
  if (published_ || op_) return Status::invalid_state;
  Shard& sh = shards_[shard];
  if (!sh.set.entries.empty() && !sh.set.modeled) return Status::invalid_state;
  if (sh.set.by_name.count(name)) return Status::already_exists;
  sh.set.modeled = true;
  RegEntry e;
  e.name = std::move(name);
  e.length = length;
  sh.set.by_name.emplace(e.name, sh.set.entries.size());
  sh.set.entries.push_back(std::move(e));
  return Status::ok;
}

Status ClientCore::unregister() {
  if (published_ || op_) return Status::invalid_state;
  for (auto& sh : shards_)
    if (sh.task || sh.seed_task) return Status::invalid_state;
  for (auto& sh : shards_) {
    stop_primary_serving(sh);
    sh.set = ShardSet{};
    sh.holding.reset();
    sh.partial_version.reset();
    sh.partial_items = 0;
  }
  current_version_.reset();
  return Status::ok;
}

std::span<const std::byte> ClientCore::region_of(std::uint32_t shard,
                                                 const std::string& name) const {
  if (shard >= num_shards_) return {};
  const ShardSet& set = shards_[shard].set;
  auto it = set.by_name.find(name);
  if (it == set.by_name.end()) return {};
  return set.entries[it->second].region;
}

// ---------------------------------------------------------------------------
// Small utilities

const char* ClientCore::op_name(OpKind k) {
  switch (k) {
    case OpKind::open: return "open";
    case OpKind::publish: return "publish";
    case OpKind::unpublish: return "unpublish";
    case OpKind::replicate: return "replicate";
    case OpKind::update: return "update";
    case OpKind::list: return "list";
    case OpKind::close: return "close";
    default: return "none";
  }
}

void ClientCore::trace(const std::string& kind, KV kv) {
  trace_to(sink_, now(), replica_, kind, std::move(kv));
}

Time ClientCore::now() const { return exec_->now(); }

std::uint64_t ClientCore::next_req() { return next_req_++; }

bool ClientCore::send(const Frame& f) {
  if (!channel_) return false;
  if (channel_->send(f)) return true;
  std::uint64_t ep = channel_epoch_;
  exec_->post([this, ep] {
    if (ep == channel_epoch_) failover("send_failed");
  });
  return false;
}

// ---------------------------------------------------------------------------
// Connection, open sequence, heartbeats, failover

bool ClientCore::ensure_channel() {
  if (conn_state_ == ConnState::ready) return true;
  std::size_t n = cfg_.servers.size();
  if (n == 0) return false;
  std::uint64_t epoch = ++channel_epoch_;
  ChannelCallbacks cbs;
  cbs.on_frame = [this, epoch](Frame f) { handle_frame(epoch, std::move(f)); };
  cbs.on_disconnect = [this, epoch] { handle_disconnect(epoch); };
  const std::string& server = cfg_.servers[server_idx_ % n];
  auto r = control_->connect(server, exec_, std::move(cbs));
  if (!r) {
    trace("connect_failed", {{"server", server}});
    connect_failures_++;
    server_idx_ = (server_idx_ + 1) % n;
    return false;
  }
  channel_ = *r;
  conn_state_ = ConnState::ready;
  last_server_ack_ = now();
  trace("connected", {{"server", server}});
  return true;
}

void ClientCore::ensure_opened(std::function<void(Status)> k) {
  if (closed_) {
    if (k) k(Status::closed);
    return;
  }
  // Lease renewal must start with the first server contact, whichever
  // operation causes it; the chain is armed exactly once.
  if (!hb_armed_) {
    hb_armed_ = true;
    arm_heartbeat();
  }
  if (opened_ && conn_state_ == ConnState::ready) {
    if (k) k(Status::ok);
    return;
  }
  if (k) open_waiters_.push_back(std::move(k));
  if (open_inflight_) return;
  std::size_t n = cfg_.servers.size();
  if (n == 0) {
    flush_open_waiters(Status::server_unavailable);
    return;
  }
  for (std::size_t i = 0; i < n && conn_state_ != ConnState::ready; ++i)
    ensure_channel();
  if (conn_state_ != ConnState::ready) {
    flush_open_waiters(Status::server_unavailable);
    return;
  }
  open_inflight_ = true;
  struct OpenCollect {
    std::uint32_t left = 0;
    Status st = Status::ok;
  };
  auto col = std::make_shared<OpenCollect>();
  col->left = num_shards_;
  for (std::uint32_t i = 0; i < num_shards_; ++i) {
    OpenReq q;
    q.req_id = next_req();
    q.coord = ShardCoord{model_, replica_, num_shards_, i};
    q.loc = LocationInfo{cfg_.datacenter, cfg_.spot, shards_[i].endpoint};
    q.retain = retain_;
    q.offload_seed = cfg_.offload_seed;
    routes_[q.req_id] = [this, col, i](const ResponseMsg& m) {
      if (ok(m.status) && m.token)
        shards_[i].token = *m.token;
      else if (ok(col->st))
        col->st = ok(m.status) ? Status::protocol_error : m.status;
      if (--col->left == 0) {
        open_inflight_ = false;
        if (ok(col->st)) {
          opened_ = true;
          connect_failures_ = 0;
          std::size_t cnt = cfg_.servers.size();
          trace("opened",
                {{"server", cnt ? cfg_.servers[server_idx_ % cnt]
                                : std::string()}});
        } else {
          // Partial opens: drop the channel so the server evicts them.
          drop_channel();
        }
        flush_open_waiters(col->st);
      }
      return true;
    };
    if (!send(q.to_frame())) return;  // posted failover flushes the waiters
  }
}

void ClientCore::flush_open_waiters(Status st) {
  auto ws = std::move(open_waiters_);
  open_waiters_.clear();
  for (auto& w : ws)
    if (w) w(st);
}

void ClientCore::drop_channel() {
  channel_epoch_++;
  if (channel_) channel_->close();
  channel_.reset();
  conn_state_ = ConnState::down;
  opened_ = false;
}

void ClientCore::handle_frame(std::uint64_t epoch, Frame f) {
  if (epoch != channel_epoch_ || closed_) return;
  if (f.type == static_cast<std::uint8_t>(MsgType::response)) {
    auto r = ResponseMsg::decode(f.body);
    if (r) {
      handle_response(*r);
    } else {
      trace("bad_response_frame", {});
    }
  } else if (f.type == static_cast<std::uint8_t>(MsgType::directive)) {
    auto d = DirectiveMsg::decode(f.body);
    if (d) {
      last_server_ack_ = now();
      handle_directive(*d);
    } else {
      trace("bad_directive_frame", {});
    }
  } else {
    trace("unexpected_frame", {{"type", n2s(f.type)}});
  }
}

void ClientCore::handle_disconnect(std::uint64_t epoch) {
  if (epoch != channel_epoch_ || closed_) return;
  failover("disconnect");
}

void ClientCore::handle_response(const ResponseMsg& m) {
  last_server_ack_ = now();
  auto it = routes_.find(m.req_id);
  if (it == routes_.end()) {
    trace("stale_response", {{"req", n2s(m.req_id)}});
    return;
  }
  // Move the handler out before invoking: it may mutate routes_ (including
  // clearing it on failover) without destroying itself mid-call.
  auto fn = std::move(it->second);
  routes_.erase(it);
  std::uint64_t ep = channel_epoch_;
  bool finished = fn(m);
  if (!finished && ep == channel_epoch_)
    routes_.emplace(m.req_id, std::move(fn));
}

void ClientCore::handle_directive(const DirectiveMsg& d) {
  std::uint32_t si = num_shards_;
  for (auto& sh : shards_)
    if (sh.token == d.token) {
      si = sh.idx;
      break;
    }
  if (si == num_shards_) {
    trace("directive_unknown_token", {{"token", n2s(d.token)}});
    return;
  }
  Shard& sh = shards_[si];
  switch (d.kind) {
    case DirectiveKind::group_aborted:
      if (d.role == TransferRole::seed) {
        trace("seed_fill_aborted",
              {{"shard", n2s(si)}, {"op_seq", n2s(d.op_seq)}});
        if (sh.seed_task && sh.seed_task->op_seq() == d.op_seq) {
          sh.seed_task->cancel();
          sh.seed_task.reset();
        }
      } else {
        trace("group_aborted", {{"op_seq", n2s(d.op_seq)}});
        if (op_ && op_->op_seq == d.op_seq) {
          for (auto& s2 : shards_) {
            if (s2.task && s2.task->op_seq() == d.op_seq) {
              s2.task->cancel();
              s2.task.reset();
              stop_primary_serving(s2);
            }
          }
          if (op_->transfer_phase) {
            current_version_.reset();
            published_ = false;
          }
          fail_op(Status::group_aborted);
        }
      }
      break;
    case DirectiveKind::offload_release:
      release_lane(sh, d.purpose, d.version);
      break;
  }
}

void ClientCore::heartbeat_tick() {
  hb_timer_ = 0;
  if (closed_) return;
  if (conn_state_ == ConnState::ready && opened_) {
    if (now() - last_server_ack_ > cfg_.server_timeout) {
      failover("server_timeout");
    } else {
      for (auto& sh : shards_) {
        HeartbeatMsg h;
        h.req_id = next_req();
        h.token = sh.token;
        routes_[h.req_id] = [this](const ResponseMsg& m) {
          // A server that no longer knows the handle has dropped our lease;
          // re-open from scratch rather than renew into the void.
          if (m.status == Status::not_found) failover("handle_lost");
          return true;
        };
        if (!send(h.to_frame())) break;
      }
    }
  } else if (!open_inflight_) {
    ensure_opened(nullptr);  // background redial + re-open
  }
  arm_heartbeat();
}

void ClientCore::arm_heartbeat() {
  if (closed_) return;
  hb_timer_ = exec_->schedule(cfg_.heartbeat_interval,
                              [this] { heartbeat_tick(); });
}

// Server loss: drop the connection and every in-flight request, abandon
// running fills (verified prefixes are kept for resumption), drop seed
// buffers, and fall back to unpublished. Completed bytes stay in place and
// complete serve lanes stay up, so peers mid-pull can finish; the next
// explicit publish/replicate re-registers state with the next server.
void ClientCore::failover(const std::string& reason) {
  if (closed_) return;
  std::size_t n = cfg_.servers.size();
  trace("failover",
        {{"reason", reason},
         {"server", n ? cfg_.servers[server_idx_ % n] : std::string()}});
  stats_.failovers++;
  drop_channel();
  routes_.clear();
  open_inflight_ = false;
  for (auto& sh : shards_) {
    sh.token = 0;
    if (sh.task) {
      sh.task->cancel();
      sh.task.reset();
      stop_primary_serving(sh);
    }
    if (sh.seed_task) {
      sh.seed_task->cancel();
      sh.seed_task.reset();
    }
  }
  drop_seed_lanes(reason);
  published_ = false;
  if (op_ && op_->transfer_phase) current_version_.reset();
  flush_open_waiters(Status::server_unavailable);
  if (op_) fail_op(Status::server_unavailable);
  if (n) server_idx_ = (server_idx_ + 1) % n;
  connect_failures_ = 0;
}

// ---------------------------------------------------------------------------
// Operation machinery

void ClientCore::start_op(OpKind kind, OpFn done, std::function<void()> run) {
  if (closed_ && kind != OpKind::close) {
    if (done) {
      OpResult r;
      r.status = Status::closed;
      done(std::move(r));
    }
    return;
  }
  if (op_) {
    if (done) {
      OpResult r;
      r.status = Status::invalid_state;
      done(std::move(r));
    }
    return;
  }
  op_ = std::make_unique<ActiveOp>();
  op_->kind = kind;
  op_->gen = ++op_gen_;
  op_->done = std::move(done);
  switch (kind) {
    case OpKind::publish:
    case OpKind::unpublish:
    case OpKind::replicate:
    case OpKind::update:
    case OpKind::close:  // close may run an unpublish group first
      op_->op_seq = ++op_seq_;
      break;
    default:
      break;
  }
  trace("op_start", {{"op", op_name(kind)}, {"seq", n2s(op_->op_seq)}});
  run();
}

void ClientCore::finish_op(Status st) {
  if (!op_) return;
  auto op = std::move(op_);
  trace("op_done",
        {{"op", op_name(op->kind)},
         {"status", status_name(st)},
         {"v", op->result_version ? n2s(*op->result_version) : "-"},
         {"changed", op->result_changed ? "1" : "0"}});
  if (op->done) {
    OpResult r;
    r.status = st;
    r.version = op->result_version;
    r.changed = op->result_changed;
    r.listing = std::move(op->result_listing);
    op->done(std::move(r));
  }
}

void ClientCore::fail_op(Status st) { finish_op(st); }

void ClientCore::open(OpFn done) {
  exec_->post([this, done = std::move(done)]() mutable {
    start_op(OpKind::open, std::move(done), [this] { run_open(); });
  });
}

void ClientCore::publish(VersionId version, OpFn done) {
  exec_->post([this, version, done = std::move(done)]() mutable {
    start_op(OpKind::publish, std::move(done), [this, version] {
      op_->publish_version = version;
      run_publish();
    });
  });
}

void ClientCore::unpublish(OpFn done) {
  exec_->post([this, done = std::move(done)]() mutable {
    start_op(OpKind::unpublish, std::move(done), [this] { run_unpublish(); });
  });
}

void ClientCore::replicate(VersionSpec spec, OpFn done) {
  exec_->post([this, spec, done = std::move(done)]() mutable {
    start_op(OpKind::replicate, std::move(done), [this, spec] {
      op_->spec = spec;
      run_replicate();
    });
  });
}

void ClientCore::update(VersionSpec spec, OpFn done) {
  exec_->post([this, spec, done = std::move(done)]() mutable {
    start_op(OpKind::update, std::move(done), [this, spec] {
      op_->spec = spec;
      run_update();
    });
  });
}

void ClientCore::list(OpFn done) {
  exec_->post([this, done = std::move(done)]() mutable {
    start_op(OpKind::list, std::move(done), [this] { run_list(); });
  });
}

void ClientCore::wait_for(std::function<bool(const ListingMap&)> pred,
                          Duration timeout, OpFn done) {
  exec_->post([this, pred = std::move(pred), timeout,
               done = std::move(done)]() mutable {
    start_op(OpKind::list, std::move(done),
             [this, pred = std::move(pred), timeout]() mutable {
               op_->wait_pred = std::move(pred);
               op_->wait_deadline = timeout <= Duration::zero()
                                        ? kTimeNever
                                        : now() + timeout;
               const std::uint64_t gen = op_->gen;
               op_->repoll = [this, gen] {
                 if (!op_ || op_->gen != gen) return;
                 run_list();  // one poll; the route decides what happens next
               };
               op_->repoll();
             });
  });
}

void ClientCore::close(OpFn done) {
  exec_->post([this, done = std::move(done)]() mutable {
    start_op(OpKind::close, std::move(done), [this] { run_close(); });
  });
}

void ClientCore::run_open() {
  const std::uint64_t gen = op_->gen;
  ensure_opened([this, gen](Status st) {
    if (!op_ || op_->gen != gen) return;
    finish_op(st);
  });
}

void ClientCore::run_publish() {
  for (auto& sh : shards_) {
    if (sh.set.entries.empty() || sh.task) {
      fail_op(Status::invalid_state);
      return;
    }
  }
  const std::uint64_t gen = op_->gen;
  ensure_opened([this, gen](Status st) {
    if (!op_ || op_->gen != gen) return;
    if (!ok(st)) {
      fail_op(st);
      return;
    }
    issue_group_requests();
  });
}

void ClientCore::run_unpublish() {
  const std::uint64_t gen = op_->gen;
  ensure_opened([this, gen](Status st) {
    if (!op_ || op_->gen != gen) return;
    if (!ok(st)) {
      fail_op(st);
      return;
    }
    issue_group_requests();
  });
}

void ClientCore::run_replicate() {
  for (auto& sh : shards_) {
    if (sh.set.entries.empty() || sh.task) {
      fail_op(Status::invalid_state);
      return;
    }
  }
  const std::uint64_t gen = op_->gen;
  ensure_opened([this, gen](Status st) {
    if (!op_ || op_->gen != gen) return;
    if (!ok(st)) {
      fail_op(st);
      return;
    }
    issue_group_requests();
  });
}

void ClientCore::run_update() {
  for (auto& sh : shards_) {
    if (sh.set.entries.empty() || sh.task) {
      fail_op(Status::invalid_state);
      return;
    }
  }
  const std::uint64_t gen = op_->gen;
  ensure_opened([this, gen](Status st) {
    if (!op_ || op_->gen != gen) return;
    if (!ok(st)) {
      fail_op(st);
      return;
    }
    issue_group_requests();
  });
}

void ClientCore::run_list() {
  const std::uint64_t gen = op_->gen;
  ensure_opened([this, gen](Status st) {
    if (!op_ || op_->gen != gen) return;
    if (!ok(st)) {
      fail_op(st);
      return;
    }
    ListReq q;
    q.req_id = next_req();
    q.token = shards_[0].token;
    routes_[q.req_id] = [this, gen](const ResponseMsg& m) {
      if (!op_ || op_->gen != gen) return true;
      if (!ok(m.status)) {
        fail_op(m.status);
        return true;
      }
      ListingMap lm = m.listing.value_or(ListingMap{});
      if (!op_->wait_pred) {  // plain list
        op_->result_listing = std::move(lm);
        finish_op(Status::ok);
        return true;
      }
      if (op_->wait_pred(lm)) {
        op_->result_listing = std::move(lm);
        finish_op(Status::ok);
        return true;
      }
      if (now() >= op_->wait_deadline) {
        op_->result_listing = std::move(lm);
        fail_op(Status::timeout);
        return true;
      }
      exec_->schedule(cfg_.wait_poll, [this, gen] {
        if (op_ && op_->gen == gen && op_->repoll) op_->repoll();
      });
      return true;
    };
    send(q.to_frame());
  });
}

void ClientCore::run_close() {
  if (closed_) {
    finish_op(Status::ok);
    return;
  }
  if (published_ && opened_ && conn_state_ == ConnState::ready) {
    issue_group_requests();  // drain + offload via a final unpublish
    return;
  }
  finish_close();
}

void ClientCore::finish_close() {
  if (opened_ && conn_state_ == ConnState::ready) {
    for (auto& sh : shards_) {
      CloseMsg c;
      c.req_id = next_req();
      c.token = sh.token;
      send(c.to_frame());
    }
  }
  closed_ = true;
  teardown();
  trace("closed", {});
  finish_op(Status::ok);
}

void ClientCore::issue_group_requests() {
  if (!op_) return;
  if (op_->kind == OpKind::publish) {
    VersionId v = op_->publish_version;
    op_->staged.assign(num_shards_, nullptr);
    for (std::uint32_t i = 0; i < num_shards_; ++i) {
      auto r = build_publish_payload(shards_[i], v);
      if (!r) {
        op_->staged.clear();
        fail_op(r.status());
        return;
      }
      op_->staged[i] = *r;
    }
  }
  const std::uint64_t seq = op_->op_seq;
  for (std::uint32_t i = 0; i < num_shards_; ++i) {
    Shard& sh = shards_[i];
    std::uint64_t req = next_req();
    Frame f;
    switch (op_->kind) {
      case OpKind::publish: {
        PublishReq q;
        q.req_id = req;
        q.token = sh.token;
        q.op_seq = seq;
        q.version = op_->publish_version;
        q.manifest = op_->staged[i]->encoded;
        f = q.to_frame();
        break;
      }
      case OpKind::unpublish:
      case OpKind::close: {
        UnpublishReq q;
        q.req_id = req;
        q.token = sh.token;
        q.op_seq = seq;
        f = q.to_frame();
        break;
      }
      case OpKind::replicate: {
        ReplicateReq q;
        q.req_id = req;
        q.token = sh.token;
        q.op_seq = seq;
        q.spec = op_->spec;
        f = q.to_frame();
        break;
      }
      case OpKind::update: {
        UpdateReq q;
        q.req_id = req;
        q.token = sh.token;
        q.op_seq = seq;
        q.spec = op_->spec;
        q.current = current_version_;
        f = q.to_frame();
        break;
      }
      default:
        fail_op(Status::protocol_error);
        return;
    }
    routes_[req] = [this, i, seq](const ResponseMsg& m) -> bool {
      if (!op_ || op_->op_seq != seq) return true;
      if (m.kind == ResponseKind::offload_first) {
        // Park the named version in host memory before the op settles.
        Shard& s2 = shards_[i];
        VersionId w = m.version.value_or(0);
        bool lane = make_retention_lane(s2, w);
        OffloadConfirmMsg c;
        c.req_id = next_req();
        c.token = s2.token;
        c.op_seq = seq;
        c.version = w;
        c.ok = lane;
        c.endpoint = s2.endpoint;
        trace("offload_confirm",
              {{"shard", n2s(i)}, {"v", n2s(w)}, {"ok", lane ? "1" : "0"}});
        send(c.to_frame());
        return false;  // the final reply is still pending
      }
      on_group_reply(i, m);
      return true;
    };
    if (!send(f)) return;  // posted failover fails the op
  }
}

void ClientCore::on_group_reply(std::uint32_t shard, const ResponseMsg& m) {
  if (!op_) return;
  op_->finals.emplace(shard, m);
  if (op_->finals.size() == num_shards_) group_replies_done();
}

void ClientCore::group_replies_done() {
  if (!op_) return;
  Status st = Status::ok;
  for (auto& [i, m] : op_->finals) {
    if (!ok(m.status)) {
      st = m.status;
      break;
    }
  }
  switch (op_->kind) {
    case OpKind::publish: {
      if (!ok(st)) {
        op_->staged.clear();
        fail_op(st);
        return;
      }
      VersionId v = op_->publish_version;
      for (std::uint32_t i = 0; i < num_shards_; ++i) {
        Shard& sh = shards_[i];
        sh.holding = op_->staged[i];
        sh.partial_version.reset();
        sh.partial_items = 0;
        serve_payload(sh, v, sh.holding, sh.holding->manifest.items().size(),
                      true);
      }
      current_version_ = v;
      published_ = true;
      op_->result_version = v;
      trace("published", {{"v", n2s(v)}});
      finish_op(Status::ok);
      return;
    }
    case OpKind::unpublish: {
      if (!ok(st)) {
        fail_op(st);
        return;
      }
      published_ = false;
      for (auto& sh : shards_) stop_primary_serving(sh);
      op_->result_version = current_version_;
      trace("unpublished",
            {{"v", current_version_ ? n2s(*current_version_) : "-"}});
      finish_op(Status::ok);
      return;
    }
    case OpKind::close: {
      if (ok(st)) {
        published_ = false;
        op_->result_version = current_version_;
      }
      finish_close();  // tear down regardless of the unpublish outcome
      return;
    }
    case OpKind::replicate:
    case OpKind::update: {
      if (!ok(st)) {
        fail_op(st);
        return;
      }
      const ResponseMsg& first = op_->finals.begin()->second;
      bool changed = op_->kind == OpKind::replicate
                         ? true
                         : first.changed.value_or(false);
      op_->result_changed = changed;
      if (!changed) {
        // Still on whatever we hold; the reply may carry a background seed
        // fill to start.
        op_->result_version = current_version_;
        for (auto& [i, m] : op_->finals)
          if (m.seed) start_seed_fill(i, *m.seed);
        finish_op(Status::ok);
        return;
      }
      if (!first.version) {
        fail_op(Status::protocol_error);
        return;
      }
      op_->result_version = *first.version;
      begin_transfers();
      return;
    }
    default:
      fail_op(Status::protocol_error);
      return;
  }
}

// ---------------------------------------------------------------------------
// Transfers

void ClientCore::begin_transfers() {
  if (!op_ || !op_->result_version) return;
  VersionId v = *op_->result_version;
  op_->transfer_phase = true;
  op_->transfers_left = num_shards_;

  // Bind destinations first: resume watermarks depend on what this replica
  // currently holds, and a bind failure must leave held bytes untouched.
  std::vector<PayloadPtr> pays(num_shards_);
  std::vector<std::uint64_t> resumes(num_shards_, 0);
  for (std::uint32_t i = 0; i < num_shards_; ++i) {
    const ResponseMsg& m = op_->finals.at(i);
    Status st = Status::ok;
    if (!m.assignment || m.assignment->version != v)
      st = Status::protocol_error;
    else
      st = bind_receive_payload(shards_[i], m.assignment->manifest, v, pays[i],
                                resumes[i]);
    if (!ok(st)) {
      // Void every shard's fill so the server's records don't dangle.
      for (std::uint32_t j = 0; j < num_shards_; ++j) {
        CompleteMsg c;
        c.token = shards_[j].token;
        c.op_seq = op_->op_seq;
        c.role = TransferRole::primary;
        c.outcome = st;
        send(c.to_frame());
      }
      fail_op(st);
      return;
    }
  }
  // The incoming version now overwrites registered regions in place; until
  // every shard verifies, this replica holds no coherent version.
  current_version_.reset();
  published_ = false;
  for (std::uint32_t i = 0; i < num_shards_; ++i) {
    Shard& sh = shards_[i];
    const Assignment& a = *op_->finals.at(i).assignment;
    serve_payload(sh, v, pays[i], resumes[i], false);
    sh.task = std::make_shared<TransferTask>(this, i, TransferRole::primary,
                                             op_->op_seq, a, pays[i],
                                             resumes[i], /*host_dest=*/false);
    trace("transfer_start", {{"shard", n2s(i)},
                             {"v", n2s(v)},
                             {"src", a.source_replica},
                             {"resume", n2s(resumes[i])},
                             {"local", a.local_seed_consume ? "1" : "0"}});
  }
  for (std::uint32_t i = 0; i < num_shards_; ++i) {
    if (resumes[i] > 0) task_progress(i, TransferRole::primary, resumes[i]);
  }
  for (std::uint32_t i = 0; i < num_shards_; ++i) {
    if (shards_[i].task) shards_[i].task->start();
  }
}

void ClientCore::task_progress(std::uint32_t shard, TransferRole role,
                               std::uint64_t items) {
  Shard& sh = shards_[shard];
  std::shared_ptr<PeerServeState> serve;
  std::uint64_t seq = 0;
  if (role == TransferRole::primary) {
    serve = sh.serve;
    sh.partial_items = items;
    if (sh.task) seq = sh.task->op_seq();
  } else if (sh.seed_task) {
    seq = sh.seed_task->op_seq();
    auto it = sh.seed_lanes.find(sh.seed_task->version());
    if (it != sh.seed_lanes.end()) serve = it->second.serve;
  }
  if (serve) {
    std::lock_guard lk(serve->m);
    serve->progress = items;
    serve->cv.notify_all();
  }
  ProgressMsg p;
  p.token = sh.token;
  p.op_seq = seq;
  p.role = role;
  p.progress = items;
  send(p.to_frame());
}

void ClientCore::task_done(std::uint32_t shard, TransferRole role, Status st,
                           bool server_knows) {
  Shard& sh = shards_[shard];
  if (role == TransferRole::primary) {
    auto t = sh.task;
    sh.task.reset();
    if (!t) return;
    if (ok(st)) {
      if (sh.serve) {
        std::lock_guard lk(sh.serve->m);
        sh.serve->complete = true;
        sh.serve->cv.notify_all();
      }
      sh.partial_version.reset();
      sh.partial_items = 0;
      if (!server_knows) {
        CompleteMsg c;
        c.token = sh.token;
        c.op_seq = t->op_seq();
        c.role = role;
        c.outcome = Status::ok;
        send(c.to_frame());
      }
      trace("transfer_done", {{"shard", n2s(shard)}, {"v", n2s(t->version())}});
      if (op_ && op_->transfer_phase && !op_->failed) {
        if (op_->transfers_left > 0) op_->transfers_left--;
        if (op_->transfers_left == 0) {
          current_version_ = t->version();
          published_ = true;
          trace("version_ready", {{"v", n2s(t->version())}});
          finish_op(Status::ok);
        }
      }
      return;
    }
    trace("transfer_failed",
          {{"shard", n2s(shard)}, {"status", status_name(st)}});
    if (!server_knows) {
      CompleteMsg c;
      c.token = sh.token;
      c.op_seq = t->op_seq();
      c.role = role;
      c.outcome = st;
      send(c.to_frame());
    }
    stop_primary_serving(sh);
    current_version_.reset();
    published_ = false;
    if (op_ && op_->transfer_phase && !op_->failed) {
      op_->failed = true;
      for (auto& other : shards_) {
        if (other.idx == shard || !other.task) continue;
        CompleteMsg c;
        c.token = other.token;
        c.op_seq = other.task->op_seq();
        c.role = TransferRole::primary;
        c.outcome = Status::transfer_failed;
        send(c.to_frame());
        other.task->cancel();
        other.task.reset();
        stop_primary_serving(other);
      }
      fail_op(st);
    }
    return;
  }

  // Seed lane outcome.
  auto t = sh.seed_task;
  sh.seed_task.reset();
  if (!t) return;
  VersionId v = t->version();
  if (ok(st)) {
    auto it = sh.seed_lanes.find(v);
    if (it != sh.seed_lanes.end() && it->second.serve) {
      std::lock_guard lk(it->second.serve->m);
      it->second.serve->complete = true;
      it->second.serve->cv.notify_all();
    }
    if (!server_knows) {
      CompleteMsg c;
      c.token = sh.token;
      c.op_seq = t->op_seq();
      c.role = TransferRole::seed;
      c.outcome = Status::ok;
      send(c.to_frame());
    }
    trace("seed_fill_done", {{"shard", n2s(shard)}, {"v", n2s(v)}});
    return;
  }
  if (!server_knows) {
    CompleteMsg c;
    c.token = sh.token;
    c.op_seq = t->op_seq();
    c.role = TransferRole::seed;
    c.outcome = st;
    send(c.to_frame());
  }
  trace("seed_fill_failed",
        {{"shard", n2s(shard)}, {"v", n2s(v)}, {"status", status_name(st)}});
  release_lane(sh, OffloadPurpose::seed, v);
}

// ---------------------------------------------------------------------------
// Payloads and serving

Result<ClientCore::PayloadPtr> ClientCore::build_publish_payload(Shard& sh,
                                                                 VersionId v) {
  std::vector<EntryDesc> descs;
  descs.reserve(sh.set.entries.size());
  for (const RegEntry& e : sh.set.entries) {
    EntryDesc d;
    d.name = e.name;
    d.length = e.length;
    d.digest = sh.set.modeled
                   ? modeled_entry_digest(e.name, v, e.length)
                   : digest64(std::span<const std::byte>(e.region));
    descs.push_back(std::move(d));
  }
  auto mr = assemble_manifest(descs, cfg_.manifest);
  if (!mr) return mr.status();
  auto p = std::make_shared<Payload>();
  p->manifest = std::move(*mr);
  if (sh.set.modeled) {
    seal_groups_modeled(p->manifest);
  } else {
    std::vector<std::span<const std::byte>> regions;
    regions.reserve(sh.set.entries.size());
    for (const RegEntry& e : sh.set.entries) regions.push_back(e.region);
    p->group_bufs.resize(p->manifest.groups.size());
    for (std::uint32_t g = 0;
         g < static_cast<std::uint32_t>(p->manifest.groups.size()); ++g) {
      p->group_bufs[g].resize(p->manifest.groups[g].packed_length);
      pack_group(p->manifest, g, regions, str_span(p->group_bufs[g]));
    }
  }
  p->encoded = p->manifest.encode();
  return p;
}

Status ClientCore::bind_receive_payload(Shard& sh,
                                        const std::string& manifest_bytes,
                                        VersionId v, PayloadPtr& out,
                                        std::uint64_t& resume_items) {
  resume_items = 0;
  if (sh.holding && sh.holding->encoded == manifest_bytes) {
    // Identical byte-for-byte manifest: resume from whatever verified prefix
    // (or full copy) we already hold.
    out = sh.holding;
    if (current_version_ && *current_version_ == v)
      resume_items = out->manifest.items().size();
    else if (sh.partial_version && *sh.partial_version == v)
      resume_items = sh.partial_items;
    sh.partial_version = v;
    sh.partial_items = resume_items;
    return Status::ok;
  }
  auto mr = TensorManifest::decode(manifest_bytes);
  if (!mr) return Status::protocol_error;
  TensorManifest m = std::move(*mr);
  if (m.entries.size() != sh.set.entries.size())
    return Status::invalid_argument;
  for (const TensorEntry& e : m.entries) {
    auto it = sh.set.by_name.find(e.name);
    if (it == sh.set.by_name.end()) return Status::invalid_argument;
    if (sh.set.entries[it->second].length != e.length)
      return Status::invalid_argument;
  }
  auto p = std::make_shared<Payload>();
  p->manifest = std::move(m);
  p->encoded = manifest_bytes;
  if (!sh.set.modeled) {
    p->group_bufs.resize(p->manifest.groups.size());
    for (std::size_t g = 0; g < p->manifest.groups.size(); ++g)
      p->group_bufs[g].resize(p->manifest.groups[g].packed_length);
  }
  sh.holding = p;
  sh.partial_version = v;
  sh.partial_items = 0;
  out = p;
  return Status::ok;
}

void ClientCore::serve_payload(Shard& sh, VersionId v, const PayloadPtr& p,
                               std::uint64_t progress, bool complete) {
  if (!sh.serve)
    sh.serve = serves_->ensure(ServeRegistry::key(model_, replica_, sh.idx));
  auto ends = make_item_ends(p->manifest);
  auto spans = payload_spans(sh, *p);
  std::lock_guard lk(sh.serve->m);
  sh.serve->serving = true;
  sh.serve->version = v;
  sh.serve->progress = progress;
  sh.serve->complete = complete;
  sh.serve->epoch++;
  sh.serve->item_ends = std::move(ends);
  sh.serve->item_spans = std::move(spans);
  sh.serve->cv.notify_all();
}

void ClientCore::stop_primary_serving(Shard& sh) {
  if (!sh.serve) return;
  std::lock_guard lk(sh.serve->m);
  sh.serve->serving = false;
  sh.serve->epoch++;
  sh.serve->cv.notify_all();
}

std::vector<std::span<const std::byte>> ClientCore::payload_spans(
    Shard& sh, const Payload& p) {
  std::vector<std::span<const std::byte>> out;
  if (sh.set.modeled) return out;  // sizes only; nothing to read
  const auto& items = p.manifest.items();
  out.resize(items.size());
  if (!p.item_bufs.empty()) {
    for (std::size_t i = 0; i < items.size(); ++i)
      out[i] = str_cspan(p.item_bufs[i]);
    return out;
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const TransferItem& it = items[i];
    if (it.is_group) {
      out[i] = str_cspan(p.group_bufs[it.index]);
    } else {
      const TensorEntry& e = p.manifest.entries[it.index];
      out[i] = sh.set.entries[sh.set.by_name.at(e.name)].region;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Offload lanes (retention parking and cross-link seed buffers)

bool ClientCore::make_retention_lane(Shard& sh, VersionId v) {
  if (sh.retain_lanes.count(v)) return true;  // re-confirm is idempotent
  if (!offload_alloc_ok_()) return false;
  if (!sh.holding || !current_version_ || *current_version_ != v) return false;
  OffloadLane lane;
  lane.purpose = OffloadPurpose::retention;
  lane.version = v;
  auto p = std::make_shared<Payload>();
  p->manifest = sh.holding->manifest;
  p->encoded = sh.holding->encoded;
  const auto& items = p->manifest.items();
  std::uint64_t copied = 0;
  if (!sh.set.modeled) {
    auto src = payload_spans(sh, *sh.holding);
    p->item_bufs.resize(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
      p->item_bufs[i].assign(reinterpret_cast<const char*>(src[i].data()),
                             src[i].size());
      copied += src[i].size();
    }
  } else {
    copied = p->manifest.total_bytes();
  }
  stats_.bytes_copied_local += copied;
  lane.payload = p;
  lane.key =
      ServeRegistry::key(model_, replica_ + "+offload@" + n2s(v), sh.idx);
  lane.serve = serves_->ensure(lane.key);
  {
    std::lock_guard lk(lane.serve->m);
    lane.serve->serving = true;
    lane.serve->version = v;
    lane.serve->progress = items.size();
    lane.serve->complete = true;
    lane.serve->epoch++;
    lane.serve->item_ends = make_item_ends(p->manifest);
    lane.serve->item_spans = payload_spans(sh, *p);
    lane.serve->cv.notify_all();
  }
  trace("offload_copied",
        {{"shard", n2s(sh.idx)}, {"v", n2s(v)}, {"bytes", n2s(copied)}});
  sh.retain_lanes.emplace(v, std::move(lane));
  return true;
}

void ClientCore::start_seed_fill(std::uint32_t shard, const SeedStart& s) {
  Shard& sh = shards_[shard];
  const Assignment& a = s.assignment;
  VersionId v = a.version;
  if (sh.seed_task || sh.seed_lanes.count(v)) {
    trace("seed_start_ignored", {{"shard", n2s(shard)}, {"v", n2s(v)}});
    return;
  }
  auto mr = TensorManifest::decode(a.manifest);
  if (!mr) {
    trace("seed_start_bad_manifest", {{"shard", n2s(shard)}, {"v", n2s(v)}});
    CompleteMsg c;
    c.token = sh.token;
    c.op_seq = s.op_seq;
    c.role = TransferRole::seed;
    c.outcome = Status::protocol_error;
    send(c.to_frame());
    return;
  }
  OffloadLane lane;
  lane.purpose = OffloadPurpose::seed;
  lane.version = v;
  auto p = std::make_shared<Payload>();
  p->manifest = std::move(*mr);
  p->encoded = a.manifest;
  if (!sh.set.modeled) {
    const auto& items = p->manifest.items();
    p->item_bufs.resize(items.size());
    for (std::size_t i = 0; i < items.size(); ++i)
      p->item_bufs[i].resize(items[i].length);
  }
  lane.payload = p;
  lane.key = ServeRegistry::key(model_, replica_ + "+seed@" + n2s(v), sh.idx);
  lane.serve = serves_->ensure(lane.key);
  {
    std::lock_guard lk(lane.serve->m);
    lane.serve->serving = true;
    lane.serve->version = v;
    lane.serve->progress = 0;
    lane.serve->complete = false;
    lane.serve->epoch++;
    lane.serve->item_ends = make_item_ends(p->manifest);
    lane.serve->item_spans = payload_spans(sh, *p);
    lane.serve->cv.notify_all();
  }
  sh.seed_lanes.emplace(v, std::move(lane));
  auto t = std::make_shared<TransferTask>(this, shard, TransferRole::seed,
                                          s.op_seq, a, p, 0,
                                          /*host_dest=*/true);
  sh.seed_task = t;
  trace("seed_fill_start", {{"shard", n2s(shard)},
                            {"v", n2s(v)},
                            {"src", a.source_replica}});
  t->start();
}

void ClientCore::release_lane(Shard& sh, OffloadPurpose purpose, VersionId v) {
  auto& lanes = purpose == OffloadPurpose::retention ? sh.retain_lanes
                                                     : sh.seed_lanes;
  auto it = lanes.find(v);
  if (it == lanes.end()) return;
  if (it->second.serve) {
    std::lock_guard lk(it->second.serve->m);
    it->second.serve->serving = false;
    it->second.serve->epoch++;
    it->second.serve->cv.notify_all();
  }
  serves_->erase(it->second.key);
  trace("offload_released",
        {{"shard", n2s(sh.idx)},
         {"v", n2s(v)},
         {"purpose",
          purpose == OffloadPurpose::retention ? "retention" : "seed"}});
  lanes.erase(it);
}

void ClientCore::drop_seed_lanes(const std::string& reason) {
  bool any = false;
  for (auto& sh : shards_) {
    if (sh.seed_task) {
      sh.seed_task->cancel();
      sh.seed_task.reset();
    }
    std::vector<VersionId> vs;
    vs.reserve(sh.seed_lanes.size());
    for (auto& [v, lane] : sh.seed_lanes) vs.push_back(v);
    for (VersionId v : vs) {
      release_lane(sh, OffloadPurpose::seed, v);
      any = true;
    }
  }
  if (any) trace("seed_lanes_dropped", {{"reason", reason}});
}

void ClientCore::teardown() {
  if (hb_timer_) {
    exec_->cancel(hb_timer_);
    hb_timer_ = 0;
  }
  for (auto& sh : shards_) {
    if (sh.task) {
      sh.task->cancel();
      sh.task.reset();
    }
    if (sh.seed_task) {
      sh.seed_task->cancel();
      sh.seed_task.reset();
    }
    stop_primary_serving(sh);
    if (sh.serve) {
      serves_->erase(ServeRegistry::key(model_, replica_, sh.idx));
      sh.serve.reset();
    }
    std::vector<VersionId> rv;
    for (auto& [v, lane] : sh.retain_lanes) rv.push_back(v);
    for (VersionId v : rv) release_lane(sh, OffloadPurpose::retention, v);
    std::vector<VersionId> sv;
    for (auto& [v, lane] : sh.seed_lanes) sv.push_back(v);
    for (VersionId v : sv) release_lane(sh, OffloadPurpose::seed, v);
  }
  drop_channel();
  routes_.clear();
  open_inflight_ = false;
  flush_open_waiters(Status::closed);
}

}  // namespace refstore
