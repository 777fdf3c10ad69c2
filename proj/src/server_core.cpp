#include "refstore/server_core.hpp"

#include <algorithm>
#include <tuple>

#include "refstore/manifest.hpp"

namespace refstore {
namespace {

std::string n2s(std::uint64_t v) { return std::to_string(v); }

// '+' is reserved: server-owned records use "+offload@<v>"/"+seed@<v>"
// suffixes on the owning replica's name.
bool name_ok(const std::string& s) {
  return !s.empty() && s.find('+') == std::string::npos &&
         s.find('|') == std::string::npos;
}

}  // namespace

ServerCore::ServerCore(std::string name, ServerConfig cfg, Executor* exec,
                       TraceSink* trace, SendFn send)
    : name_(std::move(name)),
      cfg_(cfg),
      exec_(exec),
      trace_(trace),
      send_(std::move(send)) {}

ServerCore::~ServerCore() { stop(); }

void ServerCore::start() {
  if (running_) return;
  running_ = true;
  sweep_timer_ = exec_->schedule(cfg_.sweep_interval, [this] { sweep(); });
}

void ServerCore::stop() {
  if (!running_) return;
  running_ = false;
  exec_->cancel(sweep_timer_);
}

void ServerCore::trace(const std::string& kind, KV fields) {
  trace_to(trace_, exec_->now(), name_, kind, std::move(fields));
}

const char* ServerCore::lifecycle_name(Lifecycle lc) {
  switch (lc) {
    case Lifecycle::registered: return "registered";
    case Lifecycle::replicating: return "replicating";
    case Lifecycle::published: return "published";
    case Lifecycle::failed: return "failed";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Plumbing

void ServerCore::send_response(ConnId conn, const ResponseMsg& resp) {
  send_(conn, resp.to_frame());
}

void ServerCore::send_directive(const HandleRec* h, const DirectiveMsg& d) {
  if (!h) return;
  DirectiveMsg copy = d;
  copy.token = h->token;
  send_(h->conn, copy.to_frame());
}

void ServerCore::reply_error(ConnId conn, std::uint64_t req_id, Status status) {
  ResponseMsg resp;
  resp.req_id = req_id;
  resp.status = status;
  send_response(conn, resp);
}

ServerCore::HandleRec* ServerCore::find_handle(std::uint64_t token) {
  auto it = handles_.find(token);
  return it == handles_.end() ? nullptr : it->second.get();
}

ServerCore::ModelState& ServerCore::model_state(const std::string& model) {
  return models_[model];
}

// The owner's live seed buffer. At most one exists that is not already
// draining toward release; records are named "<owner>+seed@<version>".
ServerCore::ReplicaRec* ServerCore::find_seed_replica(ReplicaRec& owner) {
  auto& ms = models_[owner.model];
  for (auto& [name, r] : ms.replicas) {
    if (r->kind == Kind::offload && r->purpose == OffloadPurpose::seed &&
        r->owner == owner.name && !r->releasing)
      return r.get();
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Frame dispatch

void ServerCore::on_frame(ConnId conn, const Frame& frame) {
  switch (static_cast<MsgType>(frame.type)) {
    case MsgType::open: {
      auto m = OpenReq::decode(frame.body);
      if (m) on_open(conn, *m);
      return;
    }
    case MsgType::publish: {
      auto m = PublishReq::decode(frame.body);
      if (m) on_publish(conn, *m);
      return;
    }
    case MsgType::unpublish: {
      auto m = UnpublishReq::decode(frame.body);
      if (m) on_unpublish(conn, *m);
      return;
    }
    case MsgType::replicate: {
      auto m = ReplicateReq::decode(frame.body);
      if (m) on_replicate(conn, *m);
      return;
    }
    case MsgType::update: {
      auto m = UpdateReq::decode(frame.body);
      if (m) on_update(conn, *m);
      return;
    }
    case MsgType::progress: {
      auto m = ProgressMsg::decode(frame.body);
      if (m) on_progress(*m);
      return;
    }
    case MsgType::complete: {
      auto m = CompleteMsg::decode(frame.body);
      if (m) on_complete(*m);
      return;
    }
    case MsgType::list: {
      auto m = ListReq::decode(frame.body);
      if (m) on_list(conn, *m);
      return;
    }
    case MsgType::heartbeat: {
      auto m = HeartbeatMsg::decode(frame.body);
      if (m) on_heartbeat(conn, *m);
      return;
    }
    case MsgType::failure_report: {
      auto m = FailureReportMsg::decode(frame.body);
      if (m) on_failure_report(conn, *m);
      return;
    }
    case MsgType::offload_confirm: {
      auto m = OffloadConfirmMsg::decode(frame.body);
      if (m) on_offload_confirm(conn, *m);
      return;
    }
    case MsgType::close: {
      auto m = CloseMsg::decode(frame.body);
      if (m) on_close(conn, *m);
      return;
    }
    default:
      trace("bad_frame", {{"type", n2s(frame.type)}});
      return;
  }
}

// ---------------------------------------------------------------------------
// Open / close / heartbeat

void ServerCore::on_open(ConnId conn, const OpenReq& req) {
  if (req.coord.validate() != Status::ok || !name_ok(req.coord.model) ||
      !name_ok(req.coord.replica) || req.loc.data_endpoint.empty()) {
    reply_error(conn, req.req_id, Status::invalid_argument);
    return;
  }
  auto& ms = model_state(req.coord.model);
  auto it = ms.replicas.find(req.coord.replica);
  ReplicaRec* r = nullptr;
  if (it != ms.replicas.end()) {
    r = it->second.get();
    if (r->kind == Kind::offload) {
      reply_error(conn, req.req_id, Status::invalid_argument);
      return;
    }
    if (r->lifecycle == Lifecycle::failed) {
      // A fully dead record can be replaced; a partially dead one cannot —
      // the surviving members must close first.
      if (r->any_live_handle()) {
        reply_error(conn, req.req_id, Status::invalid_state);
        return;
      }
      drop_owned_offloads(*r, false);
      ms.replicas.erase(it);
      r = nullptr;
    } else {
      if (r->num_shards != req.coord.num_shards ||
          r->dc != req.loc.datacenter || r->spot != req.loc.spot) {
        reply_error(conn, req.req_id, Status::invalid_argument);
        return;
      }
      if (r->handles[req.coord.shard_idx] != nullptr) {
        reply_error(conn, req.req_id, Status::already_exists);
        return;
      }
    }
  }
  if (!r) {
    auto rec = std::make_unique<ReplicaRec>();
    rec->model = req.coord.model;
    rec->name = req.coord.replica;
    rec->num_shards = req.coord.num_shards;
    rec->dc = req.loc.datacenter;
    rec->spot = req.loc.spot;
    rec->handles.assign(req.coord.num_shards, nullptr);
    rec->shards.assign(req.coord.num_shards, {});
    r = rec.get();
    ms.replicas[req.coord.replica] = std::move(rec);
  }

  auto h = std::make_unique<HandleRec>();
  h->token = next_token_++;
  h->conn = conn;
  h->coord = req.coord;
  h->loc = req.loc;
  h->retain = req.retain;
  h->offload_seed = req.offload_seed;
  h->lease_expiry = exec_->now() + cfg_.heartbeat_timeout;
  h->replica = r;
  r->handles[req.coord.shard_idx] = h.get();

  ResponseMsg resp;
  resp.req_id = req.req_id;
  resp.status = Status::ok;
  resp.token = h->token;
  trace("open", {{"model", req.coord.model},
                 {"replica", req.coord.replica},
                 {"shard", n2s(req.coord.shard_idx)},
                 {"dc", req.loc.datacenter},
                 {"spot", req.loc.spot ? "1" : "0"},
                 {"token", n2s(h->token)}});
  conn_tokens_[conn].insert(h->token);
  handles_[h->token] = std::move(h);
  send_response(conn, resp);
}

void ServerCore::on_heartbeat(ConnId conn, const HeartbeatMsg& msg) {
  HandleRec* h = find_handle(msg.token);
  if (!h) {
    reply_error(conn, msg.req_id, Status::not_found);
    return;
  }
  h->lease_expiry = exec_->now() + cfg_.heartbeat_timeout;
  ResponseMsg resp;
  resp.req_id = msg.req_id;
  resp.status = Status::ok;
  send_response(conn, resp);
}

void ServerCore::on_close(ConnId conn, const CloseMsg& msg) {
  HandleRec* h = find_handle(msg.token);
  if (!h) {
    reply_error(conn, msg.req_id, Status::not_found);
    return;
  }
  std::uint64_t req_id = msg.req_id;
  evict_handle(h, "close");
  ResponseMsg resp;
  resp.req_id = req_id;
  resp.status = Status::ok;
  send_response(conn, resp);
}

void ServerCore::on_disconnect(ConnId conn) {
  auto it = conn_tokens_.find(conn);
  if (it == conn_tokens_.end()) return;
  std::vector<std::uint64_t> tokens(it->second.begin(), it->second.end());
  for (auto tok : tokens) {
    if (HandleRec* h = find_handle(tok)) evict_handle(h, "disconnect");
  }
  conn_tokens_.erase(conn);
}

// ---------------------------------------------------------------------------
// Transactions: arrival, queueing, lifecycle
//
// A group transaction moves through: created (members arriving) -> started
// (became queue front) -> resolved (decision taken, snapshot fixed) ->
// settled (state transition applied, final replies flowing) -> closed (all
// members acked). Final replies are withheld until the whole group has
// checked in, so every member observes the same outcome; the only messages
// sent earlier are non-terminal offload_first notifications and terminal
// errors.

ServerCore::GroupTxn* ServerCore::txn_arrive(ReplicaRec& r,
                                             std::uint64_t op_seq, OpKind kind,
                                             std::uint32_t shard,
                                             PendingReply reply, Status& err) {
  err = Status::ok;
  if (r.lifecycle == Lifecycle::failed) {
    err = Status::invalid_state;
    return nullptr;
  }
  if (r.aborted_ops.count(op_seq)) {
    err = Status::group_aborted;
    return nullptr;
  }
  for (auto& t : r.txns) {
    if (t->op_seq == op_seq) {
      if (t->kind != kind || t->arrived.count(shard)) {
        err = Status::protocol_error;
        return nullptr;
      }
      t->arrived.insert(shard);
      t->waiting[shard] = reply;
      return t.get();
    }
  }
  auto t = std::make_unique<GroupTxn>();
  t->op_seq = op_seq;
  t->kind = kind;
  t->first_arrival = exec_->now();
  t->order = next_order_++;
  t->arrived.insert(shard);
  t->waiting[shard] = reply;
  GroupTxn* out = t.get();
  r.txns.push_back(std::move(t));
  arm_txn_timer(r, *out);
  return out;
}

ServerCore::GroupTxn* ServerCore::find_txn(ReplicaRec& r,
                                           std::uint64_t op_seq) {
  for (auto& t : r.txns)
    if (t->op_seq == op_seq) return t.get();
  return nullptr;
}

void ServerCore::arm_txn_timer(ReplicaRec& r, GroupTxn& t) {
  // Reaps groups that never fully assemble (a member died before asking).
  // Fully assembled groups never time out: drains and offloads may
  // legitimately take arbitrarily long.
  std::string model = r.model, replica = r.name;
  std::uint64_t op_seq = t.op_seq;
  t.timer_armed = true;
  t.timer_id =
      exec_->schedule(cfg_.txn_timeout, [this, model, replica, op_seq] {
        auto mit = models_.find(model);
        if (mit == models_.end()) return;
        auto rit = mit->second.replicas.find(replica);
        if (rit == mit->second.replicas.end()) return;
        ReplicaRec& rr = *rit->second;
        GroupTxn* t = find_txn(rr, op_seq);
        if (!t) return;
        if (t->arrived.size() >= rr.num_shards) return;
        trace("txn_timeout", {{"model", model},
                              {"replica", replica},
                              {"op_seq", n2s(op_seq)},
                              {"arrived", n2s(t->arrived.size())}});
        abort_txn(rr, *t, Status::group_aborted);
      });
}

void ServerCore::maybe_start_txn(ReplicaRec& r) {
  if (r.lifecycle == Lifecycle::failed) return;
  if (r.txns.empty()) return;
  GroupTxn& t = *r.txns.front();
  if (!t.started) start_txn(r, t);
}

void ServerCore::start_txn(ReplicaRec& r, GroupTxn& t) {
  t.started = true;
  switch (t.kind) {
    case OpKind::publish:
      if (t.arrived.size() == r.num_shards) txn_commit_publish(r, t);
      break;
    case OpKind::unpublish:
      start_unpublish(r, t);
      break;
    case OpKind::replicate:
      start_replicate(r, t);
      break;
    case OpKind::update:
      start_update(r, t);
      break;
  }
}

void ServerCore::set_terminal(ReplicaRec& r, GroupTxn& t, Status status) {
  t.terminal = status;
  flush_replies(r, t);
}

void ServerCore::flush_replies(ReplicaRec& r, GroupTxn& t) {
  // reply_arrival may close the txn and destroy it; re-find each round.
  std::uint64_t op = t.op_seq;
  std::vector<std::uint32_t> shards(t.arrived.begin(), t.arrived.end());
  for (auto s : shards) {
    GroupTxn* cur = find_txn(r, op);
    if (!cur) return;
    if (!cur->acked.count(s)) reply_arrival(r, *cur, s);
  }
}

void ServerCore::reply_arrival(ReplicaRec& r, GroupTxn& t,
                               std::uint32_t shard) {
  if (t.acked.count(shard)) return;
  auto wit = t.waiting.find(shard);
  if (wit == t.waiting.end()) return;
  PendingReply slot = wit->second;

  if (t.terminal) {
    ResponseMsg resp;
    resp.req_id = slot.req_id;
    resp.status = *t.terminal;
    t.acked.insert(shard);
    send_response(slot.conn, resp);
    if (t.acked.size() == r.num_shards) finish_txn(r, t);
    return;
  }

  if (!t.settled) {
    // Non-terminal notification: ask for a host-memory copy of the version
    // that is about to lose its last durable residence.
    bool wants_offload = (t.kind == OpKind::unpublish ||
                          (t.kind == OpKind::update && t.changed)) &&
                         t.offload_needed && !t.offload_done;
    if (wants_offload && !t.offload_notified.count(shard)) {
      t.offload_notified.insert(shard);
      ResponseMsg resp;
      resp.req_id = slot.req_id;
      resp.kind = ResponseKind::offload_first;
      resp.status = Status::ok;
      resp.version = r.version;
      send_response(slot.conn, resp);
    }
    return;  // parked until settle
  }

  auto& ms = model_state(r.model);
  ResponseMsg resp;
  resp.req_id = slot.req_id;
  resp.status = Status::ok;
  switch (t.kind) {
    case OpKind::publish:
      resp.version = t.publish_version;
      break;
    case OpKind::unpublish:
      break;
    case OpKind::replicate: {
      auto sit = ms.replicas.find(t.source);
      if (sit != ms.replicas.end()) {
        resp.version = *t.target;
        Assignment a =
            make_assignment(ms, *sit->second, *t.target, shard, r.dc);
        a.seeding = r.seeding;
        resp.assignment = std::move(a);
      } else {
        resp.status = Status::version_unavailable;
      }
      break;
    }
    case OpKind::update: {
      resp.changed = t.changed;
      if (t.changed) {
        auto sit = ms.replicas.find(t.source);
        if (sit != ms.replicas.end()) {
          resp.version = *t.target;
          Assignment a =
              make_assignment(ms, *sit->second, *t.target, shard, r.dc);
          a.seeding = r.seeding;
          a.local_seed_consume =
              sit->second->kind == Kind::offload &&
              sit->second->purpose == OffloadPurpose::seed &&
              sit->second->owner == r.name;
          resp.assignment = std::move(a);
        } else {
          resp.status = Status::version_unavailable;
        }
      } else if (t.seed_start_tpl) {
        auto sit =
            ms.replicas.find(t.seed_start_tpl->assignment.source_replica);
        if (sit != ms.replicas.end()) {
          SeedStart ss;
          ss.op_seq = t.seed_start_tpl->op_seq;
          ss.assignment = make_assignment(
              ms, *sit->second, t.seed_start_tpl->assignment.version, shard,
              r.dc);
          ss.assignment.seeding = true;
          resp.seed = std::move(ss);
        }
      }
      break;
    }
  }
  t.acked.insert(shard);
  send_response(slot.conn, resp);
  if (t.acked.size() == r.num_shards) finish_txn(r, t);
}

void ServerCore::finish_txn(ReplicaRec& r, GroupTxn& t) {
  if (t.timer_armed) exec_->cancel(t.timer_id);
  bool was_front = !r.txns.empty() && r.txns.front().get() == &t;
  for (auto it = r.txns.begin(); it != r.txns.end(); ++it) {
    if (it->get() == &t) {
      r.txns.erase(it);
      break;
    }
  }
  if (was_front) maybe_start_txn(r);
}

void ServerCore::abort_txn(ReplicaRec& r, GroupTxn& t, Status status) {
  bool was_front = !r.txns.empty() && r.txns.front().get() == &t;
  r.aborted_ops.insert(t.op_seq);
  while (r.aborted_ops.size() > 64) r.aborted_ops.erase(r.aborted_ops.begin());
  if (t.timer_armed) exec_->cancel(t.timer_id);
  trace("txn_aborted", {{"model", r.model},
                        {"replica", r.name},
                        {"op_seq", n2s(t.op_seq)},
                        {"status", status_name(status)}});

  if (r.lifecycle != Lifecycle::failed && t.started) {
    if (t.settled && (t.kind == OpKind::replicate ||
                      (t.kind == OpKind::update && t.changed))) {
      // Members already hold assignments: tear the whole transfer down.
      void_replication(r, "txn_abort");
    } else if (!t.settled &&
               (t.kind == OpKind::unpublish ||
                (t.kind == OpKind::update && t.changed)) &&
               t.was_visible && r.lifecycle == Lifecycle::published) {
      r.visible = true;  // rescind the implicit visibility drop
    }
    if (!t.settled && t.resolved && !t.source.empty() &&
        (t.kind == OpKind::replicate ||
         (t.kind == OpKind::update && t.changed))) {
      // Release the reservation taken at resolve time.
      auto& ms = model_state(r.model);
      auto sit = ms.replicas.find(t.source);
      if (sit != ms.replicas.end() && sit->second->serving > 0) {
        sit->second->serving--;
        check_drain(*sit->second);
      }
    }
    if (t.seed_start_tpl) {
      // A background seed fill was started for this group: claw it back.
      ReplicaRec* seed = find_seed_replica(r);
      if (seed && seed->current_op_seq == t.op_seq &&
          seed->lifecycle == Lifecycle::replicating) {
        void_replication(*seed, "txn_abort");
        release_offload(*seed);
      }
    }
  }

  for (auto& [shard, slot] : t.waiting) {
    if (t.acked.count(shard)) continue;
    ResponseMsg resp;
    resp.req_id = slot.req_id;
    resp.status = status;
    send_response(slot.conn, resp);
  }

  for (auto it = r.txns.begin(); it != r.txns.end(); ++it) {
    if (it->get() == &t) {
      r.txns.erase(it);
      break;
    }
  }
  if (was_front) maybe_start_txn(r);
}

void ServerCore::try_settle(ReplicaRec& r) {
  if (r.txns.empty()) return;
  GroupTxn& t = *r.txns.front();
  if (!t.started || !t.resolved || t.settled || t.terminal || t.blocked)
    return;
  if (t.kind == OpKind::publish) return;  // commits at full assembly instead
  if (t.arrived.size() < r.num_shards) return;
  if (t.offload_needed && !t.offload_done) return;
  bool needs_drain =
      t.kind == OpKind::unpublish || (t.kind == OpKind::update && t.changed);
  if (needs_drain && r.serving > 0) return;
  apply_settle(r, t);
  if (!find_txn(r, t.op_seq)) return;
  if (!t.settled) return;  // re-parked (replicate lost its source)
  flush_replies(r, t);
}

// ---------------------------------------------------------------------------
// Publish

void ServerCore::on_publish(ConnId conn, const PublishReq& req) {
  HandleRec* h = find_handle(req.token);
  if (!h) {
    reply_error(conn, req.req_id, Status::not_found);
    return;
  }
  ReplicaRec& r = *h->replica;
  std::uint32_t shard = h->coord.shard_idx;
  Status err;
  GroupTxn* t = txn_arrive(r, req.op_seq, OpKind::publish, shard,
                           {conn, req.req_id}, err);
  if (!t) {
    reply_error(conn, req.req_id, err);
    return;
  }
  if (t->arrived.size() == 1) {
    t->publish_version = req.version;
  } else if (t->publish_version != req.version) {
    set_terminal(r, *t, Status::protocol_error);
    return;
  }
  t->manifests[shard] = req.manifest;
  std::uint64_t op = t->op_seq;
  maybe_start_txn(r);
  GroupTxn* t2 = find_txn(r, op);
  if (!t2) return;
  if (t2->terminal || t2->settled) {
    reply_arrival(r, *t2, shard);
    return;
  }
  if (!r.txns.empty() && r.txns.front().get() == t2 && t2->started &&
      t2->arrived.size() == r.num_shards) {
    txn_commit_publish(r, *t2);
  }
}

void ServerCore::txn_commit_publish(ReplicaRec& r, GroupTxn& t) {
  auto& ms = model_state(r.model);
  VersionId v = t.publish_version;

  if (r.lifecycle == Lifecycle::published) {
    trace("publish_reject", {{"model", r.model},
                             {"replica", r.name},
                             {"v", n2s(v)},
                             {"reason", "already_published"}});
    set_terminal(r, t, Status::mutability_violation);
    return;
  }
  if (r.lifecycle != Lifecycle::registered) {
    set_terminal(r, t, Status::invalid_state);
    return;
  }
  if (r.last_published && v <= *r.last_published) {
    trace("publish_reject", {{"model", r.model},
                             {"replica", r.name},
                             {"v", n2s(v)},
                             {"reason", "regression"}});
    set_terminal(r, t, Status::version_regression);
    return;
  }

  std::vector<std::uint64_t> items_per_shard(r.num_shards, 0);
  for (std::uint32_t s = 0; s < r.num_shards; ++s) {
    auto m = TensorManifest::decode(t.manifests[s]);
    if (!m) {
      set_terminal(r, t, Status::manifest_conflict);
      return;
    }
    items_per_shard[s] = m->items().size();
  }
  auto vit = ms.versions.find(v);
  if (vit != ms.versions.end()) {
    // The version number is already defined: every publication of it must
    // carry byte-identical manifests.
    if (vit->second.num_shards != r.num_shards) {
      set_terminal(r, t, Status::manifest_conflict);
      return;
    }
    for (std::uint32_t s = 0; s < r.num_shards; ++s) {
      if (vit->second.manifests[s] != t.manifests[s]) {
        trace("publish_reject", {{"model", r.model},
                                 {"replica", r.name},
                                 {"v", n2s(v)},
                                 {"reason", "manifest_conflict"}});
        set_terminal(r, t, Status::manifest_conflict);
        return;
      }
    }
  } else {
    ModelState::VersionInfo info;
    info.num_shards = r.num_shards;
    info.manifests.resize(r.num_shards);
    for (std::uint32_t s = 0; s < r.num_shards; ++s)
      info.manifests[s] = t.manifests[s];
    ms.versions.emplace(v, std::move(info));
  }

  r.lifecycle = Lifecycle::published;
  r.visible = true;
  r.version = v;
  r.last_published = v;
  for (std::uint32_t s = 0; s < r.num_shards; ++s)
    r.shards[s] = {items_per_shard[s], true};
  if (!ms.max_published || v > *ms.max_published) ms.max_published = v;

  t.resolved = true;
  t.settled = true;
  trace("publish_commit",
        {{"model", r.model}, {"replica", r.name}, {"v", n2s(v)}});
  flush_replies(r, t);
  wake_blocked(r.model);
  eval_offload_releases(r.model);
}

// ---------------------------------------------------------------------------
// Unpublish

void ServerCore::on_unpublish(ConnId conn, const UnpublishReq& req) {
  HandleRec* h = find_handle(req.token);
  if (!h) {
    reply_error(conn, req.req_id, Status::not_found);
    return;
  }
  ReplicaRec& r = *h->replica;
  std::uint32_t shard = h->coord.shard_idx;
  Status err;
  GroupTxn* t = txn_arrive(r, req.op_seq, OpKind::unpublish, shard,
                           {conn, req.req_id}, err);
  if (!t) {
    reply_error(conn, req.req_id, err);
    return;
  }
  std::uint64_t op = t->op_seq;
  maybe_start_txn(r);
  GroupTxn* t2 = find_txn(r, op);
  if (!t2) return;
  if (t2->terminal || t2->settled) {
    reply_arrival(r, *t2, shard);
    return;
  }
  if (!r.txns.empty() && r.txns.front().get() == t2 && t2->started) {
    reply_arrival(r, *t2, shard);  // offload_first notification if pending
    try_settle(r);
  }
}

void ServerCore::start_unpublish(ReplicaRec& r, GroupTxn& t) {
  if (r.lifecycle != Lifecycle::published || !r.version) {
    set_terminal(r, t, Status::invalid_state);
    return;
  }
  auto& ms = model_state(r.model);
  VersionId v = *r.version;
  t.was_visible = r.visible;
  r.visible = false;  // no new readers from this point
  t.offload_needed = unpublish_needs_offload(ms, r, v);
  t.resolved = true;
  trace("unpublish_start", {{"model", r.model},
                            {"replica", r.name},
                            {"v", n2s(v)},
                            {"offload_first", t.offload_needed ? "1" : "0"},
                            {"serving", n2s(r.serving)}});
  if (t.offload_needed) {
    trace("offload_first",
          {{"model", r.model}, {"replica", r.name}, {"v", n2s(v)}});
    for (auto s :
         std::vector<std::uint32_t>(t.arrived.begin(), t.arrived.end()))
      reply_arrival(r, t, s);
  }
  try_settle(r);
}

// ---------------------------------------------------------------------------
// Replicate

void ServerCore::on_replicate(ConnId conn, const ReplicateReq& req) {
  HandleRec* h = find_handle(req.token);
  if (!h) {
    reply_error(conn, req.req_id, Status::not_found);
    return;
  }
  ReplicaRec& r = *h->replica;
  std::uint32_t shard = h->coord.shard_idx;
  Status err;
  GroupTxn* t = txn_arrive(r, req.op_seq, OpKind::replicate, shard,
                           {conn, req.req_id}, err);
  if (!t) {
    reply_error(conn, req.req_id, err);
    return;
  }
  if (t->arrived.size() == 1) t->spec = req.spec;
  std::uint64_t op = t->op_seq;
  maybe_start_txn(r);
  GroupTxn* t2 = find_txn(r, op);
  if (!t2) return;
  if (t2->terminal || t2->settled) {
    reply_arrival(r, *t2, shard);
    return;
  }
  if (!r.txns.empty() && r.txns.front().get() == t2 && t2->started)
    try_settle(r);
}

void ServerCore::start_replicate(ReplicaRec& r, GroupTxn& t) {
  if (r.lifecycle != Lifecycle::registered) {
    set_terminal(r, t, Status::invalid_state);
    return;
  }
  auto& ms = model_state(r.model);
  auto avail = available_versions(ms, r.dc);
  auto target = resolve_version(t.spec, avail);
  if (!target) {
    if (!t.blocked) {
      t.blocked = true;
      trace("replicate_blocked", {{"model", r.model},
                                  {"replica", r.name},
                                  {"spec", t.spec.to_string()}});
    }
    return;  // parked; wake_blocked retries on availability changes
  }
  auto vinfo = ms.versions.find(*target);
  if (vinfo == ms.versions.end() || vinfo->second.num_shards != r.num_shards) {
    set_terminal(r, t, Status::invalid_argument);
    return;
  }
  ReplicaRec* src = pick_source(ms, *target, r.dc, &r);
  if (!src) {
    set_terminal(r, t, Status::version_unavailable);
    return;
  }
  t.blocked = false;
  t.resolved = true;
  t.target = target;
  t.source = src->name;
  src->serving++;
  src->last_assigned = ++assign_tick_;
  trace("replicate_resolved", {{"model", r.model},
                               {"replica", r.name},
                               {"v", n2s(*target)},
                               {"src", src->name}});
  try_settle(r);
}

// ---------------------------------------------------------------------------
// Update

void ServerCore::on_update(ConnId conn, const UpdateReq& req) {
  HandleRec* h = find_handle(req.token);
  if (!h) {
    reply_error(conn, req.req_id, Status::not_found);
    return;
  }
  ReplicaRec& r = *h->replica;
  std::uint32_t shard = h->coord.shard_idx;
  Status err;
  GroupTxn* t = txn_arrive(r, req.op_seq, OpKind::update, shard,
                           {conn, req.req_id}, err);
  if (!t) {
    reply_error(conn, req.req_id, err);
    return;
  }
  if (t->arrived.size() == 1) {
    t->spec = req.spec;
    t->update_current = req.current;
  }
  std::uint64_t op = t->op_seq;
  maybe_start_txn(r);
  GroupTxn* t2 = find_txn(r, op);
  if (!t2) return;
  if (t2->terminal || t2->settled) {
    reply_arrival(r, *t2, shard);
    return;
  }
  if (!r.txns.empty() && r.txns.front().get() == t2 && t2->started) {
    reply_arrival(r, *t2, shard);  // offload_first notification if pending
    try_settle(r);
  }
}

void ServerCore::start_update(ReplicaRec& r, GroupTxn& t) {
  if (r.lifecycle != Lifecycle::registered &&
      r.lifecycle != Lifecycle::published) {
    set_terminal(r, t, Status::invalid_state);
    return;
  }
  auto& ms = model_state(r.model);
  auto avail = available_versions(ms, r.dc);
  auto target = resolve_version(t.spec, avail);
  std::optional<VersionId> current = r.version ? r.version : t.update_current;

  // No state transition: settle immediately, before full assembly — the
  // decision has no side effect to claw back if stragglers never arrive.
  auto no_change = [&] {
    t.resolved = true;
    t.changed = false;
    t.settled = true;
    trace("update_no_change",
          {{"model", r.model},
           {"replica", r.name},
           {"current", current ? n2s(*current) : "none"},
           {"target", target ? n2s(*target) : "none"}});
    flush_replies(r, t);
  };

  if (!target || (current && *target == *current)) {
    no_change();
    return;
  }
  auto vinfo = ms.versions.find(*target);
  if (vinfo == ms.versions.end() || vinfo->second.num_shards != r.num_shards) {
    set_terminal(r, t, Status::invalid_argument);
    return;
  }
  ReplicaRec* src = pick_source(ms, *target, r.dc, &r);
  if (!src) {
    no_change();
    return;
  }

  // Change over a slow cross-DC link with host-memory seeding enabled: fill
  // a local seed buffer in the background and stay on the current version
  // until it lands.
  HandleRec* any = nullptr;
  for (auto* hh : r.handles)
    if (hh) any = hh;
  if (src->dc != r.dc && any && any->offload_seed) {
    ReplicaRec* seed = find_seed_replica(r);
    if (seed && seed->lifecycle == Lifecycle::replicating) {
      if (seed->version && *seed->version >= *target) {
        no_change();  // an equal-or-newer fill is already under way
        return;
      }
      // The fill chases a stale version: restart it at the new target.
      void_replication(*seed, "stale_seed");
      release_offload(*seed);
      seed = nullptr;
    } else if (seed) {
      // A completed seed for a different version: drop and refill.
      release_offload(*seed);
      seed = nullptr;
    }
    auto rec = std::make_unique<ReplicaRec>();
    rec->model = r.model;
    rec->name = r.name + "+seed@" + n2s(*target);
    if (ms.replicas.count(rec->name)) {
      // A released buffer for this exact version is still draining under the
      // same name; don't race it — stay on the current version this poll.
      no_change();
      return;
    }
    rec->kind = Kind::offload;
    rec->purpose = OffloadPurpose::seed;
    rec->owner = r.name;
    rec->num_shards = r.num_shards;
    rec->dc = r.dc;
    rec->endpoints.resize(r.num_shards);
    for (std::uint32_t s = 0; s < r.num_shards; ++s)
      rec->endpoints[s] = r.handles[s] ? r.handles[s]->loc.data_endpoint : "";
    rec->lifecycle = Lifecycle::replicating;
    rec->version = *target;
    rec->source = src->name;
    rec->current_op_seq = t.op_seq;
    rec->seeding = true;
    rec->shards.assign(r.num_shards, {});
    ms.replicas[rec->name] = std::move(rec);
    src->serving++;
    src->last_assigned = ++assign_tick_;
    t.seed_start_tpl = SeedStart{};
    t.seed_start_tpl->op_seq = t.op_seq;
    t.seed_start_tpl->assignment.version = *target;
    t.seed_start_tpl->assignment.source_replica = src->name;
    trace("seed_start", {{"model", r.model},
                         {"replica", r.name},
                         {"v", n2s(*target)},
                         {"src", src->name}});
    no_change();
    return;
  }

  t.resolved = true;
  t.changed = true;
  t.target = target;
  t.source = src->name;
  src->serving++;
  src->last_assigned = ++assign_tick_;
  t.was_visible = r.visible;
  if (r.lifecycle == Lifecycle::published && r.version) {
    r.visible = false;
    t.offload_needed = unpublish_needs_offload(ms, r, *r.version);
    if (t.offload_needed) {
      trace("offload_first", {{"model", r.model},
                              {"replica", r.name},
                              {"v", n2s(*r.version)}});
      for (auto s :
           std::vector<std::uint32_t>(t.arrived.begin(), t.arrived.end()))
        reply_arrival(r, t, s);
    }
  }
  trace("update_change", {{"model", r.model},
                          {"replica", r.name},
                          {"from", current ? n2s(*current) : "none"},
                          {"to", n2s(*target)},
                          {"src", src->name},
                          {"offload_first", t.offload_needed ? "1" : "0"},
                          {"serving", n2s(r.serving)}});
  try_settle(r);
}

// Re-validates the source snapshot when the settle point is reached: the
// drain or offload wait may have outlived the source. Returns the (possibly
// re-picked) source, or nullptr after releasing the stale reservation.
ServerCore::ReplicaRec* ServerCore::settle_source(ReplicaRec& r, GroupTxn& t) {
  auto& ms = model_state(r.model);
  auto sit = ms.replicas.find(t.source);
  if (sit != ms.replicas.end()) {
    ReplicaRec* cand = sit->second.get();
    bool still_good =
        cand->version == t.target && cand->lifecycle != Lifecycle::failed &&
        !cand->releasing &&
        ((cand->visible && cand->lifecycle == Lifecycle::published &&
          cand->complete_all()) ||
         (cfg_.pipeline && cand->lifecycle == Lifecycle::replicating &&
          !cand->seeding && cand->dc == r.dc));
    if (still_good) return cand;
    if (cand->serving > 0) {
      cand->serving--;
      check_drain(*cand);
    }
  }
  t.source.clear();
  ReplicaRec* fresh = pick_source(ms, *t.target, r.dc, &r);
  if (fresh) {
    t.source = fresh->name;
    fresh->serving++;
    fresh->last_assigned = ++assign_tick_;
    trace("source_repick", {{"model", r.model},
                            {"replica", r.name},
                            {"v", n2s(*t.target)},
                            {"src", fresh->name}});
  }
  return fresh;
}

void ServerCore::apply_settle(ReplicaRec& r, GroupTxn& t) {
  auto& ms = model_state(r.model);
  switch (t.kind) {
    case OpKind::publish:
      break;  // applied at commit
    case OpKind::unpublish: {
      VersionId v = *r.version;
      r.lifecycle = Lifecycle::registered;
      r.version.reset();
      for (auto& s : r.shards) s = {};
      t.settled = true;
      trace("unpublish_ack",
            {{"model", r.model}, {"replica", r.name}, {"v", n2s(v)}});
      prune_version_if_unused(ms, v);
      eval_offload_releases(r.model);
      break;
    }
    case OpKind::replicate: {
      ReplicaRec* src = settle_source(r, t);
      if (!src) {
        // Lost every source while assembling: park again and wait.
        t.resolved = false;
        t.blocked = true;
        t.target.reset();
        trace("replicate_blocked", {{"model", r.model},
                                    {"replica", r.name},
                                    {"spec", t.spec.to_string()}});
        return;
      }
      r.lifecycle = Lifecycle::replicating;
      r.version = t.target;
      r.source = t.source;
      r.current_op_seq = t.op_seq;
      r.seeding = src->dc != r.dc;
      for (auto& s : r.shards) s = {};
      t.settled = true;
      trace("assign", {{"model", r.model},
                       {"replica", r.name},
                       {"v", n2s(*t.target)},
                       {"src", t.source},
                       {"cross_dc", src->dc != r.dc ? "1" : "0"},
                       {"src_serving", n2s(src->serving)}});
      break;
    }
    case OpKind::update: {
      if (!t.changed) {
        t.settled = true;
        break;
      }
      ReplicaRec* src = settle_source(r, t);
      if (!src) {
        // Nothing can serve the target any more: stay on what we have.
        if (t.was_visible && r.lifecycle == Lifecycle::published)
          r.visible = true;
        t.changed = false;
        t.target.reset();
        t.settled = true;
        trace("update_rescinded", {{"model", r.model}, {"replica", r.name}});
        break;
      }
      std::optional<VersionId> old = r.version;
      r.lifecycle = Lifecycle::replicating;
      r.visible = false;
      r.version = t.target;
      r.source = t.source;
      r.current_op_seq = t.op_seq;
      r.seeding = src->dc != r.dc;
      for (auto& s : r.shards) s = {};
      t.settled = true;
      trace("assign", {{"model", r.model},
                       {"replica", r.name},
                       {"v", n2s(*t.target)},
                       {"src", t.source},
                       {"cross_dc", src->dc != r.dc ? "1" : "0"},
                       {"src_serving", n2s(src->serving)}});
      if (old) prune_version_if_unused(ms, *old);
      eval_offload_releases(r.model);
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Progress / completion

void ServerCore::on_progress(const ProgressMsg& msg) {
  HandleRec* h = find_handle(msg.token);
  if (!h) return;
  ReplicaRec* r = h->replica;
  if (msg.role == TransferRole::seed) {
    r = find_seed_replica(*r);
    if (!r) return;
  }
  if (r->lifecycle != Lifecycle::replicating || r->current_op_seq != msg.op_seq)
    return;
  auto& sx = r->shards[h->coord.shard_idx];
  if (msg.progress > sx.progress) sx.progress = msg.progress;
  trace("progress", {{"model", r->model},
                     {"replica", r->name},
                     {"shard", n2s(h->coord.shard_idx)},
                     {"items", n2s(msg.progress)}});
}

void ServerCore::on_complete(const CompleteMsg& msg) {
  HandleRec* h = find_handle(msg.token);
  if (!h) return;
  ReplicaRec* r = h->replica;
  if (msg.role == TransferRole::seed) {
    r = find_seed_replica(*r);
    if (!r) return;
  }
  if (r->lifecycle != Lifecycle::replicating || r->current_op_seq != msg.op_seq)
    return;
  if (msg.outcome != Status::ok) {
    trace("shard_failed", {{"model", r->model},
                           {"replica", r->name},
                           {"shard", n2s(h->coord.shard_idx)},
                           {"status", status_name(msg.outcome)}});
    if (r->kind == Kind::offload && r->purpose == OffloadPurpose::seed) {
      void_replication(*r, "seed_failed");
      release_offload(*r);
    } else {
      void_replication(*r, status_name(msg.outcome));
    }
    return;
  }
  auto& sx = r->shards[h->coord.shard_idx];
  sx.complete = true;
  trace("shard_complete", {{"model", r->model},
                           {"replica", r->name},
                           {"shard", n2s(h->coord.shard_idx)}});
  if (r->complete_all()) finish_replication(*r);
}

void ServerCore::finish_replication(ReplicaRec& r) {
  std::string consumed_seed;
  {
    auto& ms = model_state(r.model);
    auto sit = ms.replicas.find(r.source);
    if (sit != ms.replicas.end()) {
      ReplicaRec& src = *sit->second;
      if (src.kind == Kind::offload && src.purpose == OffloadPurpose::seed &&
          src.owner == r.name)
        consumed_seed = src.name;
    }
  }
  release_source(r);
  r.lifecycle = Lifecycle::published;
  r.visible = true;
  bool was_seeding = r.seeding;
  r.seeding = false;
  trace("replica_complete", {{"model", r.model},
                             {"replica", r.name},
                             {"v", n2s(*r.version)},
                             {"seeded", was_seeding ? "1" : "0"}});
  if (!consumed_seed.empty()) {
    auto& ms = model_state(r.model);
    auto sit = ms.replicas.find(consumed_seed);
    if (sit != ms.replicas.end()) {
      trace("seed_consumed", {{"model", r.model}, {"replica", r.name}});
      release_offload(*sit->second);
    }
  }
  wake_blocked(r.model);
  eval_offload_releases(r.model);
}

void ServerCore::release_source(ReplicaRec& r) {
  if (r.source.empty()) return;
  auto& ms = model_state(r.model);
  auto sit = ms.replicas.find(r.source);
  r.source.clear();
  if (sit == ms.replicas.end()) return;
  ReplicaRec& src = *sit->second;
  if (src.serving > 0) src.serving--;
  check_drain(src);
}

void ServerCore::check_drain(ReplicaRec& source) {
  if (source.serving > 0) return;
  if (source.releasing) {
    finish_offload_release(source);
    return;
  }
  try_settle(source);
}

void ServerCore::void_replication(ReplicaRec& r, const std::string& reason) {
  if (r.lifecycle != Lifecycle::replicating) return;
  std::uint64_t op = r.current_op_seq;
  std::optional<VersionId> v = r.version;
  release_source(r);
  r.lifecycle = Lifecycle::registered;
  r.version.reset();
  r.seeding = false;
  for (auto& s : r.shards) s = {};
  trace("replica_voided",
        {{"model", r.model}, {"replica", r.name}, {"reason", reason}});
  // Tell every live member to abandon the transfer.
  auto& ms = model_state(r.model);
  TransferRole role =
      r.kind == Kind::offload ? TransferRole::seed : TransferRole::primary;
  const ReplicaRec* holder = &r;
  if (r.kind == Kind::offload) {
    auto oit = ms.replicas.find(r.owner);
    holder = oit == ms.replicas.end() ? nullptr : oit->second.get();
  }
  if (holder) {
    for (auto* h : holder->handles) {
      if (!h) continue;
      DirectiveMsg d;
      d.kind = DirectiveKind::group_aborted;
      d.op_seq = op;
      d.role = role;
      send_directive(h, d);
    }
  }
  if (v) prune_version_if_unused(ms, *v);
}

// ---------------------------------------------------------------------------
// List

void ServerCore::on_list(ConnId conn, const ListReq& req) {
  HandleRec* h = find_handle(req.token);
  if (!h) {
    reply_error(conn, req.req_id, Status::not_found);
    return;
  }
  std::string model = req.model.empty() ? h->coord.model : req.model;
  ResponseMsg resp;
  resp.req_id = req.req_id;
  resp.status = Status::ok;
  resp.listing = listing(model);
  send_response(conn, resp);
}

ListingMap ServerCore::listing(const std::string& model) const {
  ListingMap out;
  auto mit = models_.find(model);
  if (mit == models_.end()) return out;
  for (const auto& [name, r] : mit->second.replicas) {
    if (r->visible && r->lifecycle == Lifecycle::published && r->version &&
        r->complete_all())
      out[*r->version].insert(name);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Failure reports and reassignment

void ServerCore::on_failure_report(ConnId conn, const FailureReportMsg& msg) {
  HandleRec* h = find_handle(msg.token);
  if (!h) {
    reply_error(conn, msg.req_id, Status::not_found);
    return;
  }
  ReplicaRec* r = h->replica;
  if (msg.role == TransferRole::seed) {
    r = find_seed_replica(*h->replica);
    if (!r) {
      reply_error(conn, msg.req_id, Status::invalid_state);
      return;
    }
  }
  trace("failure_report",
        {{"model", r->model},
         {"replica", r->name},
         {"shard", n2s(h->coord.shard_idx)},
         {"failed", msg.failed_replica},
         {"reason",
          msg.reason == FailReason::timeout ? "timeout" : "checksum"}});
  if (r->lifecycle != Lifecycle::replicating ||
      r->current_op_seq != msg.op_seq) {
    reply_error(conn, msg.req_id, Status::invalid_state);
    return;
  }
  auto& ms = model_state(r->model);
  // A timeout is evidence the peer is gone; checksum corruption is not.
  if (msg.reason == FailReason::timeout && msg.failed_replica == r->source) {
    auto fit = ms.replicas.find(msg.failed_replica);
    if (fit != ms.replicas.end() &&
        fit->second->lifecycle != Lifecycle::failed) {
      if (fit->second->kind == Kind::offload) {
        // An offload source has no lease of its own; drop it directly.
        ReplicaRec& off = *fit->second;
        if (off.lifecycle == Lifecycle::replicating)
          void_replication(off, "reported_timeout");
        release_offload(off);
      } else {
        fail_replica(*fit->second, "reported_timeout");
      }
    }
  }
  if (r->lifecycle != Lifecycle::replicating) {
    // The failure cascade tore this very transfer down.
    reply_error(conn, msg.req_id, Status::invalid_state);
    return;
  }
  VersionId v = *r->version;
  if (r->source == msg.failed_replica || r->source.empty()) {
    if (msg.reason == FailReason::checksum && !r->source.empty()) {
      auto sit = ms.replicas.find(r->source);
      if (sit != ms.replicas.end() && sit->second->serving > 0)
        sit->second->serving--;
    }
    r->source.clear();
    ReplicaRec* src = pick_source(ms, v, r->dc, r);
    if (!src) {
      trace("reassign_failed",
            {{"model", r->model}, {"replica", r->name}, {"v", n2s(v)}});
      std::uint64_t req_id = msg.req_id;
      void_replication(*r, "no_source");
      // A voided worker waits for a retry; a voided offload fill has no
      // owner-driven retry and would linger as a zombie record.
      if (r->kind == Kind::offload) release_offload(*r);
      reply_error(conn, req_id, Status::version_unavailable);
      return;
    }
    r->source = src->name;
    src->serving++;
    src->last_assigned = ++assign_tick_;
    if (src->dc != r->dc) r->seeding = true;
    trace("reassign", {{"model", r->model},
                       {"replica", r->name},
                       {"v", n2s(v)},
                       {"src", src->name}});
  }
  auto sit = ms.replicas.find(r->source);
  if (sit == ms.replicas.end()) {
    reply_error(conn, msg.req_id, Status::version_unavailable);
    return;
  }
  ResponseMsg resp;
  resp.req_id = msg.req_id;
  resp.status = Status::ok;
  resp.version = v;
  Assignment a =
      make_assignment(ms, *sit->second, v, h->coord.shard_idx, r->dc);
  a.seeding = r->seeding;
  resp.assignment = std::move(a);
  send_response(conn, resp);
}

// ---------------------------------------------------------------------------
// Offload confirm

void ServerCore::on_offload_confirm(ConnId conn, const OffloadConfirmMsg& msg) {
  HandleRec* h = find_handle(msg.token);
  if (!h) {
    reply_error(conn, msg.req_id, Status::not_found);
    return;
  }
  ReplicaRec& r = *h->replica;
  GroupTxn* t = find_txn(r, msg.op_seq);
  if (!t || r.txns.empty() || r.txns.front().get() != t ||
      !t->offload_needed) {
    reply_error(conn, msg.req_id, Status::invalid_state);
    return;
  }
  ResponseMsg ack;
  ack.req_id = msg.req_id;
  ack.status = Status::ok;
  send_response(conn, ack);
  if (t->offload_done || t->terminal) return;
  if (!msg.ok) {
    // Host memory unavailable: the operation fails, the replica stays
    // published and visible; nothing was given up.
    trace("offload_failed",
          {{"model", r.model}, {"replica", r.name}, {"v", n2s(msg.version)}});
    if (t->was_visible && r.lifecycle == Lifecycle::published)
      r.visible = true;
    if (!t->source.empty()) {
      auto& ms = model_state(r.model);
      auto sit = ms.replicas.find(t->source);
      if (sit != ms.replicas.end() && sit->second->serving > 0) {
        sit->second->serving--;
        check_drain(*sit->second);
      }
      t->source.clear();
    }
    set_terminal(r, *t, Status::offload_failed);
    return;
  }
  t->offload_confirmed.insert(h->coord.shard_idx);
  if (t->offload_endpoints.empty()) t->offload_endpoints.resize(r.num_shards);
  t->offload_endpoints[h->coord.shard_idx] = msg.endpoint;
  trace("offload_confirmed", {{"model", r.model},
                              {"replica", r.name},
                              {"shard", n2s(h->coord.shard_idx)},
                              {"v", n2s(msg.version)}});
  if (t->offload_confirmed.size() == r.num_shards) {
    t->offload_done = true;
    create_offload_replica(r, msg.version, OffloadPurpose::retention,
                           t->offload_endpoints);
    try_settle(r);
  }
}

void ServerCore::create_offload_replica(ReplicaRec& owner, VersionId v,
                                        OffloadPurpose purpose,
                                        std::vector<std::string> endpoints) {
  auto& ms = model_state(owner.model);
  std::string name = owner.name +
                     (purpose == OffloadPurpose::retention ? "+offload@"
                                                           : "+seed@") +
                     n2s(v);
  auto exist = ms.replicas.find(name);
  if (exist != ms.replicas.end()) {
    // The same buffer was mid-drain toward release when it became needed
    // again. No release directive has gone out yet (that happens only once
    // the drain finishes), so simply cancel the release and keep the record;
    // its in-flight readers and their reservations stay coherent.
    ReplicaRec& old = *exist->second;
    old.releasing = false;
    old.visible = true;
    old.endpoints = std::move(endpoints);
    trace("offload_reused", {{"model", owner.model}, {"replica", name}});
    wake_blocked(owner.model);
    return;
  }
  auto rec = std::make_unique<ReplicaRec>();
  rec->model = owner.model;
  rec->name = name;
  rec->kind = Kind::offload;
  rec->purpose = purpose;
  rec->owner = owner.name;
  rec->num_shards = owner.num_shards;
  rec->dc = owner.dc;
  rec->endpoints = std::move(endpoints);
  rec->lifecycle = Lifecycle::published;
  rec->visible = true;
  rec->version = v;
  rec->shards.assign(owner.num_shards, ShardXfer{0, true});
  trace("offload_replica",
        {{"model", owner.model},
         {"replica", name},
         {"v", n2s(v)},
         {"purpose",
          purpose == OffloadPurpose::retention ? "retention" : "seed"}});
  ms.replicas[name] = std::move(rec);
  wake_blocked(owner.model);
}

// ---------------------------------------------------------------------------
// Scheduling & availability

std::set<VersionId> ServerCore::available_versions(ModelState& ms,
                                                   const std::string& dc) {
  std::set<VersionId> out;
  for (const auto& [name, r] : ms.replicas) {
    if (r->visible && r->lifecycle == Lifecycle::published && r->version &&
        r->complete_all())
      out.insert(*r->version);
  }
  if (cfg_.smart_skipping) {
    // Hide versions this datacenter is still seeding: pulling them over the
    // slow link now would duplicate the fill already under way.
    std::set<VersionId> masked;
    for (VersionId v : out) {
      bool local_complete = false;
      bool local_seeding = false;
      for (const auto& [name, r] : ms.replicas) {
        if (r->version != v || r->dc != dc) continue;
        if (r->visible && r->lifecycle == Lifecycle::published &&
            r->complete_all())
          local_complete = true;
        if (r->lifecycle == Lifecycle::replicating && r->seeding)
          local_seeding = true;
      }
      if (!local_complete && local_seeding) masked.insert(v);
    }
    for (VersionId v : masked) out.erase(v);
  }
  return out;
}

ServerCore::ReplicaRec* ServerCore::pick_source(ModelState& ms, VersionId v,
                                                const std::string& dc,
                                                const ReplicaRec* exclude) {
  ReplicaRec* best = nullptr;
  auto key = [&](ReplicaRec* r) {
    bool own_seed = exclude && r->kind == Kind::offload &&
                    r->purpose == OffloadPurpose::seed &&
                    r->owner == exclude->name;
    return std::tuple<int, int, std::uint32_t, std::uint64_t,
                      const std::string&>(own_seed ? 0 : 1,
                                          r->dc == dc ? 0 : 1, r->serving,
                                          r->last_assigned, r->name);
  };
  for (const auto& [name, rp] : ms.replicas) {
    ReplicaRec* r = rp.get();
    if (r == exclude || r->lifecycle == Lifecycle::failed || r->releasing)
      continue;
    bool complete_copy = r->visible && r->lifecycle == Lifecycle::published &&
                         r->version == v && r->complete_all();
    bool pipeline_copy = cfg_.pipeline &&
                         r->lifecycle == Lifecycle::replicating &&
                         r->version == v && !r->seeding && r->dc == dc;
    if (!complete_copy && !pipeline_copy) continue;
    if (!best || key(r) < key(best)) best = r;
  }
  return best;
}

Assignment ServerCore::make_assignment(ModelState& ms, ReplicaRec& src,
                                       VersionId v, std::uint32_t shard,
                                       const std::string& req_dc) {
  Assignment a;
  a.version = v;
  a.source_replica = src.name;
  a.source_endpoint = src.endpoint_of(shard);
  a.source_complete =
      src.lifecycle == Lifecycle::published && src.complete_all();
  a.cross_dc = src.dc != req_dc;
  a.manifest = ms.versions[v].manifests[shard];
  return a;
}

void ServerCore::prune_version_if_unused(ModelState& ms, VersionId v) {
  for (const auto& [name, r] : ms.replicas)
    if (r->lifecycle != Lifecycle::failed && r->version == v) return;
  ms.versions.erase(v);
}

void ServerCore::wake_blocked(const std::string& model) {
  auto mit = models_.find(model);
  if (mit == models_.end()) return;
  // Retry parked replicates oldest-first so waiter chains form the same way
  // on every run.
  std::vector<std::pair<std::uint64_t, std::string>> blocked;
  for (auto& [name, r] : mit->second.replicas) {
    if (r->txns.empty()) continue;
    GroupTxn& t = *r->txns.front();
    if (t.started && t.blocked && t.kind == OpKind::replicate)
      blocked.emplace_back(t.order, name);
  }
  std::sort(blocked.begin(), blocked.end());
  for (auto& [order, name] : blocked) {
    auto rit = mit->second.replicas.find(name);
    if (rit == mit->second.replicas.end()) continue;
    ReplicaRec& r = *rit->second;
    if (r.txns.empty()) continue;
    GroupTxn& t = *r.txns.front();
    if (t.started && t.blocked && t.kind == OpKind::replicate)
      start_replicate(r, t);
  }
}

// ---------------------------------------------------------------------------
// Retention and offload release

std::set<VersionId> ServerCore::retained_versions(ModelState& ms) {
  std::set<VersionId> out;
  if (!ms.max_published) return out;
  VersionId max = *ms.max_published;
  for (const auto& [name, r] : ms.replicas) {
    for (auto* h : r->handles) {
      if (!h) continue;
      for (auto lag : h->retain.lags)
        if (lag <= max) out.insert(max - lag);
    }
  }
  return out;
}

bool ServerCore::unpublish_needs_offload(ModelState& ms, ReplicaRec& r,
                                         VersionId v) {
  if (r.spot) return false;  // spot copies never count toward retention
  auto retained = retained_versions(ms);
  if (!retained.count(v)) return false;
  for (const auto& [name, other] : ms.replicas) {
    if (other.get() == &r || other->spot) continue;
    if (other->visible && other->lifecycle == Lifecycle::published &&
        other->version == v && other->complete_all())
      return false;  // another durable copy exists
  }
  return true;
}

void ServerCore::eval_offload_releases(const std::string& model) {
  auto mit = models_.find(model);
  if (mit == models_.end()) return;
  auto retained = retained_versions(mit->second);
  std::vector<std::string> to_release;
  for (auto& [name, r] : mit->second.replicas) {
    if (r->kind != Kind::offload || r->purpose != OffloadPurpose::retention)
      continue;
    if (r->releasing || r->lifecycle != Lifecycle::published) continue;
    VersionId v = *r->version;
    bool replaced = false;
    for (const auto& [oname, other] : mit->second.replicas) {
      if (other->kind != Kind::worker || other->spot) continue;
      if (other->visible && other->lifecycle == Lifecycle::published &&
          other->version == v && other->complete_all()) {
        replaced = true;
        break;
      }
    }
    if (replaced || !retained.count(v)) to_release.push_back(name);
  }
  for (auto& name : to_release) {
    auto rit = mit->second.replicas.find(name);
    if (rit != mit->second.replicas.end()) release_offload(*rit->second);
  }
}

void ServerCore::release_offload(ReplicaRec& off) {
  if (off.releasing) return;
  off.releasing = true;
  off.visible = false;
  trace("offload_release_start",
        {{"model", off.model},
         {"replica", off.name},
         {"v", off.version ? n2s(*off.version) : "none"},
         {"serving", n2s(off.serving)}});
  if (off.serving == 0) finish_offload_release(off);
}

void ServerCore::finish_offload_release(ReplicaRec& off) {
  auto& ms = model_state(off.model);
  auto oit = ms.replicas.find(off.owner);
  if (oit != ms.replicas.end()) {
    for (auto* h : oit->second->handles) {
      if (!h) continue;
      DirectiveMsg d;
      d.kind = DirectiveKind::offload_release;
      d.version = off.version.value_or(0);
      d.purpose = off.purpose;
      send_directive(h, d);
    }
  }
  trace("offload_released", {{"model", off.model}, {"replica", off.name}});
  std::string name = off.name;
  std::optional<VersionId> v = off.version;
  ms.replicas.erase(name);
  if (v) prune_version_if_unused(ms, *v);
}

// ---------------------------------------------------------------------------
// Failure machinery

void ServerCore::fail_replica(ReplicaRec& r, const std::string& reason) {
  if (r.lifecycle == Lifecycle::failed) return;
  bool was_replicating = r.lifecycle == Lifecycle::replicating;
  std::uint64_t op = r.current_op_seq;
  std::optional<VersionId> v = r.version;
  trace("replica_failed", {{"model", r.model},
                           {"replica", r.name},
                           {"reason", reason},
                           {"was", lifecycle_name(r.lifecycle)}});
  release_source(r);
  r.lifecycle = Lifecycle::failed;
  r.visible = false;
  r.seeding = false;
  r.serving = 0;

  while (!r.txns.empty()) abort_txn(r, *r.txns.front(), Status::group_aborted);

  if (was_replicating && r.kind == Kind::worker) {
    for (auto* h : r.handles) {
      if (!h) continue;
      DirectiveMsg d;
      d.kind = DirectiveKind::group_aborted;
      d.op_seq = op;
      d.role = TransferRole::primary;
      send_directive(h, d);
    }
  }
  drop_owned_offloads(r, true);
  if (v) prune_version_if_unused(model_state(r.model), *v);
}

void ServerCore::drop_owned_offloads(ReplicaRec& r, bool notify) {
  auto& ms = model_state(r.model);
  std::vector<std::string> owned;
  for (auto& [name, other] : ms.replicas)
    if (other->kind == Kind::offload && other->owner == r.name)
      owned.push_back(name);
  for (auto& name : owned) {
    auto it = ms.replicas.find(name);
    if (it == ms.replicas.end()) continue;
    ReplicaRec& off = *it->second;
    if (off.lifecycle == Lifecycle::replicating) release_source(off);
    std::optional<VersionId> v = off.version;
    trace("offload_dropped", {{"model", off.model}, {"replica", name}});
    if (notify) {
      for (auto* h : r.handles) {
        if (!h) continue;
        DirectiveMsg d;
        d.kind = DirectiveKind::offload_release;
        d.version = off.version.value_or(0);
        d.purpose = off.purpose;
        send_directive(h, d);
      }
    }
    ms.replicas.erase(name);
    if (v) prune_version_if_unused(ms, *v);
  }
}

void ServerCore::evict_handle(HandleRec* h, const std::string& reason) {
  ReplicaRec* r = h->replica;
  std::string model = r->model;
  std::uint64_t token = h->token;
  ConnId conn = h->conn;
  trace("handle_evicted", {{"model", h->coord.model},
                           {"replica", h->coord.replica},
                           {"shard", n2s(h->coord.shard_idx)},
                           {"reason", reason}});
  r->handles[h->coord.shard_idx] = nullptr;
  auto cit = conn_tokens_.find(conn);
  if (cit != conn_tokens_.end()) {
    cit->second.erase(token);
    if (cit->second.empty()) conn_tokens_.erase(cit);
  }
  handles_.erase(token);

  // Losing any member while the replica holds or moves bytes fails the
  // whole replica; an idle registered member just frees its slot.
  bool busy = r->lifecycle == Lifecycle::published ||
              r->lifecycle == Lifecycle::replicating || !r->txns.empty();
  if (busy) fail_replica(*r, reason);
  remove_replica_if_empty(*r);
  eval_offload_releases(model);
}

void ServerCore::remove_replica_if_empty(ReplicaRec& r) {
  if (r.any_live_handle() || !r.txns.empty()) return;
  if (r.kind == Kind::offload) return;  // owned records die with their owner
  auto& ms = model_state(r.model);
  drop_owned_offloads(r, false);
  std::optional<VersionId> v = r.version;
  trace("replica_removed", {{"model", r.model}, {"replica", r.name}});
  std::string name = r.name;
  ms.replicas.erase(name);
  if (v) prune_version_if_unused(ms, *v);
}

void ServerCore::sweep() {
  Time now = exec_->now();
  std::vector<std::uint64_t> expired;
  for (auto& [token, h] : handles_)
    if (h->lease_expiry <= now) expired.push_back(token);
  for (auto token : expired) {
    auto it = handles_.find(token);
    if (it != handles_.end()) evict_handle(it->second.get(), "lease_expired");
  }
  if (running_)
    sweep_timer_ = exec_->schedule(cfg_.sweep_interval, [this] { sweep(); });
}

// ---------------------------------------------------------------------------
// Introspection

std::optional<ServerCore::ReplicaView> ServerCore::replica_view(
    const std::string& model, const std::string& replica) const {
  auto mit = models_.find(model);
  if (mit == models_.end()) return std::nullopt;
  auto rit = mit->second.replicas.find(replica);
  if (rit == mit->second.replicas.end()) return std::nullopt;
  const ReplicaRec& r = *rit->second;
  ReplicaView v;
  v.lifecycle = lifecycle_name(r.lifecycle);
  v.kind = r.kind == Kind::worker ? "worker" : "offload";
  v.version = r.version;
  v.serving = r.serving;
  v.seeding = r.seeding;
  v.visible = r.visible;
  v.min_progress = 0;
  if (!r.shards.empty()) {
    v.min_progress = r.shards[0].progress;
    for (const auto& s : r.shards)
      v.min_progress = std::min(v.min_progress, s.progress);
  }
  return v;
}

}  // namespace refstore
