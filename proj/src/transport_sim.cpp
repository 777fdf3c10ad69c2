#include "refstore/transport_sim.hpp"

#include <algorithm>
#include <cassert>
#include <utility>

namespace refstore {

namespace {

std::string up_key(const std::string& ep) { return "u|" + ep; }
std::string down_key(const std::string& ep) { return "d|" + ep; }
std::string link_key(const std::string& from, const std::string& to) {
  return "x|" + from + "|" + to;
}

// ceil(bytes * 1e9 / rate) without overflow at multi-terabyte scale.
Duration transfer_time(std::uint64_t bytes, std::uint64_t rate) {
  if (rate == 0) rate = 1;
  unsigned __int128 num =
      static_cast<unsigned __int128>(bytes) * 1'000'000'000u + (rate - 1);
  return Duration(static_cast<std::int64_t>(num / rate));
}

}  // namespace

// ---------------------------------------------------------------------------
// Construction / topology

SimNetwork::SimNetwork(SimExecutor* exec, SimNetConfig cfg)
    : exec_(exec), cfg_(cfg) {}

SimNetwork::~SimNetwork() = default;

SimNetwork::Port* SimNetwork::add_node(const std::string& endpoint,
                                       const std::string& dc,
                                       ServeRegistry* serves) {
  Node& n = nodes_[endpoint];
  n.dc = dc;
  n.serves = serves;
  n.crashed = false;
  if (!n.port) {
    n.port = std::make_unique<Port>();
    n.port->net_ = this;
    n.port->endpoint_ = endpoint;
  }
  return n.port.get();
}

void SimNetwork::add_server(const std::string& name, ServerCore* core) {
  servers_[name] = Server{core, false};
}

ServerCore::SendFn SimNetwork::sender() {
  return [this](ServerCore::ConnId conn, const Frame& f) {
    deliver_to_client(conn, f);
  };
}

// ---------------------------------------------------------------------------
// Port facade

Result<std::shared_ptr<Channel>> SimNetwork::Port::connect(
    const std::string& server, Executor* exec, ChannelCallbacks cbs) {
  return net_->connect_from(endpoint_, server, exec, std::move(cbs));
}

void SimNetwork::Port::async_pull(const std::string& endpoint,
                                  const PullSpec& spec, PullDest dest,
                                  Executor* exec,
                                  std::function<void(PullResult)> done) {
  net_->pull_from(endpoint_, endpoint, spec, std::move(dest), exec,
                  std::move(done));
}

void SimNetwork::Port::async_query(const std::string& endpoint,
                                   const QuerySpec& spec, Executor* exec,
                                   std::function<void(QueryResult)> done) {
  net_->query_from(endpoint_, endpoint, spec, exec, std::move(done));
}

// ---------------------------------------------------------------------------
// Control plane

class SimNetwork::SimChannel : public Channel {
 public:
  SimChannel(SimNetwork* net, std::uint64_t id) : net_(net), id_(id) {}
  ~SimChannel() override { close(); }

  bool send(const Frame& f) override { return net_->channel_send(id_, f); }

  void close() override {
    if (!closed_) {
      closed_ = true;
      net_->channel_close(id_);
    }
  }

 private:
  SimNetwork* net_;
  std::uint64_t id_;
  bool closed_ = false;
};

Result<std::shared_ptr<Channel>> SimNetwork::connect_from(
    const std::string& actor, const std::string& server, Executor* exec,
    ChannelCallbacks cbs) {
  auto nit = nodes_.find(actor);
  if (nit != nodes_.end() && nit->second.crashed)
    return Status::server_unavailable;
  auto sit = servers_.find(server);
  if (sit == servers_.end() || sit->second.down || !sit->second.core)
    return Status::server_unavailable;
  // A dial through a partition times out rather than completing.
  if (partitioned(actor, server)) return Status::server_unavailable;
  std::uint64_t id = next_conn_++;
  auto c = std::make_shared<Conn>();
  c->actor = actor;
  c->server = server;
  c->cbs = std::move(cbs);
  c->client_exec = exec;
  c->open = true;
  conns_.emplace(id, c);
  return std::static_pointer_cast<Channel>(
      std::make_shared<SimChannel>(this, id));
}

bool SimNetwork::partitioned(const std::string& actor,
                             const std::string& server) const {
  auto it = partitions_.find({actor, server});
  return it != partitions_.end() && it->second;
}

bool SimNetwork::channel_send(std::uint64_t conn, const Frame& f) {
  auto it = conns_.find(conn);
  if (it == conns_.end() || !it->second->open) return false;
  const Conn& c = *it->second;
  // A partition swallows frames while the socket itself stays healthy.
  if (partitioned(c.actor, c.server)) return true;
  exec_->schedule(cfg_.control_latency, [this, conn, f] {
    auto cit = conns_.find(conn);
    if (cit == conns_.end() || !cit->second->open) return;
    auto sit = servers_.find(cit->second->server);
    if (sit == servers_.end() || sit->second.down || !sit->second.core) return;
    sit->second.core->on_frame(conn, f);
  });
  return true;
}

void SimNetwork::channel_close(std::uint64_t conn) {
  auto it = conns_.find(conn);
  if (it == conns_.end()) return;
  bool was_open = it->second->open;
  std::string server = it->second->server;
  it->second->open = false;
  conns_.erase(it);
  if (!was_open) return;
  exec_->schedule(cfg_.control_latency, [this, conn, server] {
    auto sit = servers_.find(server);
    if (sit == servers_.end() || sit->second.down || !sit->second.core) return;
    sit->second.core->on_disconnect(conn);
  });
}

void SimNetwork::deliver_to_client(std::uint64_t conn, const Frame& f) {
  auto it = conns_.find(conn);
  if (it == conns_.end() || !it->second->open) return;
  const Conn& c = *it->second;
  if (partitioned(c.actor, c.server)) return;
  exec_->schedule(cfg_.control_latency, [this, conn, f] {
    auto cit = conns_.find(conn);
    if (cit == conns_.end() || !cit->second->open) return;
    auto cb = cit->second->cbs.on_frame;
    if (cb) cit->second->client_exec->post([cb = std::move(cb), f] { cb(f); });
  });
}

void SimNetwork::sever_conn(std::uint64_t conn, bool notify_client,
                            bool notify_server) {
  auto it = conns_.find(conn);
  if (it == conns_.end() || !it->second->open) return;
  it->second->open = false;
  if (notify_client) {
    auto cb = it->second->cbs.on_disconnect;
    Executor* cx = it->second->client_exec;
    if (cb)
      exec_->schedule(cfg_.control_latency,
                      [cx, cb = std::move(cb)] { cx->post(cb); });
  }
  if (notify_server) {
    std::string server = it->second->server;
    exec_->schedule(cfg_.control_latency, [this, conn, server] {
      auto sit = servers_.find(server);
      if (sit == servers_.end() || sit->second.down || !sit->second.core)
        return;
      sit->second.core->on_disconnect(conn);
    });
  }
}

void SimNetwork::set_server_down(const std::string& name, bool down) {
  auto it = servers_.find(name);
  if (it != servers_.end()) it->second.down = down;
}

void SimNetwork::crash_server(const std::string& name) {
  set_server_down(name, true);
  for (auto& [id, c] : conns_) {
    if (c->server == name && c->open) sever_conn(id, true, false);
  }
}

void SimNetwork::crash_node(const std::string& endpoint) {
  auto nit = nodes_.find(endpoint);
  if (nit != nodes_.end()) nit->second.crashed = true;
  for (auto& [id, c] : conns_) {
    if (c->actor == endpoint && c->open) sever_conn(id, false, true);
  }
  remove_jobs_touching(endpoint);
}

void SimNetwork::set_partition(const std::string& endpoint,
                               const std::string& server, bool on) {
  if (on)
    partitions_[{endpoint, server}] = true;
  else
    partitions_.erase({endpoint, server});
}

void SimNetwork::poison_next_pull(const std::string& src_endpoint) {
  poison_next_[src_endpoint] = true;
}

// ---------------------------------------------------------------------------
// Data plane

std::uint64_t SimNetwork::link_rate(const std::string& dc_from,
                                    const std::string& dc_to) const {
  auto it = cfg_.dc_link_override.find({dc_from, dc_to});
  if (it != cfg_.dc_link_override.end()) return it->second;
  return cfg_.dc_link_bps;
}

void SimNetwork::pull_from(const std::string& dst, const std::string& src,
                           const PullSpec& spec, PullDest dest, Executor* exec,
                           std::function<void(PullResult)> done) {
  auto dit = nodes_.find(dst);
  if (dit == nodes_.end() || dit->second.crashed) return;
  exec_->schedule(
      cfg_.data_latency,
      [this, dst, src, spec, dest = std::move(dest), exec,
       done = std::move(done)]() mutable {
        auto dit2 = nodes_.find(dst);
        if (dit2 == nodes_.end() || dit2->second.crashed) return;
        auto sit = nodes_.find(src);
        if (sit == nodes_.end() || sit->second.crashed || !sit->second.serves)
          return;  // dead peer: nothing ever comes back
        // Only called before the enclosing event returns; the job path below
        // consumes `done` instead.
        auto respond = [this, exec, &done,
                        activity = spec.activity](PullResult r) {
          exec_->schedule(cfg_.data_latency, [exec, done = std::move(done),
                                              activity, r]() mutable {
            if (ok(r.status) && activity) activity->fetch_add(1);
            exec->post([done = std::move(done), r] { done(r); });
          });
        };
        PullResult r;
        auto st = sit->second.serves->find(
            ServeRegistry::key(spec.model, spec.replica, spec.shard));
        if (!st) {
          r.status = Status::not_serving;
          respond(r);
          return;
        }
        ServeSlice s =
            compute_slice(*st, spec.version, spec.offset, spec.max_bytes);
        r.status = s.status;
        r.source_progress = s.progress;
        r.source_complete = s.complete;
        r.bytes = s.bytes;
        if (!ok(s.status) || s.bytes == 0) {
          respond(r);
          return;
        }
        if (!dest.empty()) {
          std::lock_guard lk(st->m);
          std::uint64_t off = spec.offset;
          std::uint64_t left = s.bytes;
          for (auto d : dest) {
            std::uint64_t n = std::min<std::uint64_t>(d.size(), left);
            if (n == 0) break;
            copy_slice_locked(*st, off, n, d.data());
            off += n;
            left -= n;
          }
        }
        auto pit = poison_next_.find(src);
        if (pit != poison_next_.end() && pit->second) {
          r.poisoned = true;
          pit->second = false;
        }

        std::uint64_t seq = next_job_++;
        auto j = std::make_unique<Job>();
        j->seq = seq;
        j->src = src;
        j->dst = dst;
        j->bytes = s.bytes;
        j->submitted = exec_->now();
        j->result = r;
        j->exec = exec;
        j->done = std::move(done);
        j->activity = spec.activity;
        j->resources.push_back(up_key(src));
        j->resources.push_back(down_key(dst));
        std::uint64_t rate = cfg_.endpoint_bps;
        const std::string& sdc = sit->second.dc;
        const std::string& ddc = dit2->second.dc;
        if (sdc != ddc) {
          j->resources.push_back(link_key(sdc, ddc));
          rate = std::min(rate, link_rate(sdc, ddc));
        }
        j->rate = rate;
        if (cfg_.keepalive_interval.count() > 0)
          j->ka_timer = exec_->schedule(cfg_.keepalive_interval,
                                        [this, seq] { keepalive_tick(seq); });
        Job* jp = j.get();
        jobs_.emplace(seq, std::move(j));
        for (const auto& res : jp->resources) queues_[res].push_back(seq);
        if (heads_all(jp)) start_job(jp);
      });
}

bool SimNetwork::heads_all(const Job* j) const {
  for (const auto& res : j->resources) {
    auto it = queues_.find(res);
    if (it == queues_.end() || it->second.empty() ||
        it->second.front() != j->seq)
      return false;
  }
  return true;
}

void SimNetwork::start_job(Job* j) {
  j->running = true;
  j->started = exec_->now();
  std::uint64_t seq = j->seq;
  j->fin_timer = exec_->schedule(transfer_time(j->bytes, j->rate),
                                 [this, seq] { finish_job(seq); });
}

void SimNetwork::start_ready_jobs(const std::vector<std::string>& resources) {
  // Collect candidate heads in sequence order so wakeups are deterministic.
  std::vector<std::uint64_t> heads;
  for (const auto& res : resources) {
    auto it = queues_.find(res);
    if (it == queues_.end()) continue;
    if (it->second.empty()) {
      queues_.erase(it);
      continue;
    }
    heads.push_back(it->second.front());
  }
  std::sort(heads.begin(), heads.end());
  heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
  for (std::uint64_t seq : heads) {
    auto jit = jobs_.find(seq);
    if (jit == jobs_.end()) continue;
    Job* j = jit->second.get();
    if (!j->running && heads_all(j)) start_job(j);
  }
}

void SimNetwork::finish_job(std::uint64_t seq) {
  auto jit = jobs_.find(seq);
  if (jit == jobs_.end()) return;
  Job* j = jit->second.get();
  if (j->ka_timer) exec_->cancel(j->ka_timer);

  TransferRecord rec;
  rec.seq = j->seq;
  rec.src = j->src;
  rec.dst = j->dst;
  rec.bytes = j->bytes;
  rec.submitted = j->submitted;
  rec.started = j->started;
  rec.finished = exec_->now();
  rec.cross_dc = j->resources.size() > 2;
  records_.push_back(rec);
  dc_bytes_[{nodes_[j->src].dc, nodes_[j->dst].dc}] += j->bytes;
  nodes_[j->src].pulls_served++;

  std::vector<std::string> freed = j->resources;
  for (const auto& res : freed) {
    auto qit = queues_.find(res);
    assert(qit != queues_.end() && qit->second.front() == seq);
    qit->second.pop_front();
  }
  // The payload already sits in the caller's buffers; completion now rides
  // the response leg back. Bytes that fully crossed the wire before a later
  // crash still count, so delivery is unconditional.
  exec_->schedule(cfg_.data_latency,
                  [exec = j->exec, done = std::move(j->done),
                   activity = std::move(j->activity), r = j->result] {
                    if (activity) activity->fetch_add(1);
                    exec->post([done = std::move(done), r] { done(r); });
                  });
  jobs_.erase(jit);
  start_ready_jobs(freed);
}

void SimNetwork::drop_job(Job* j) {
  if (j->ka_timer) exec_->cancel(j->ka_timer);
  if (j->running && j->fin_timer) exec_->cancel(j->fin_timer);
  for (const auto& res : j->resources) {
    auto qit = queues_.find(res);
    if (qit == queues_.end()) continue;
    auto& q = qit->second;
    q.erase(std::remove(q.begin(), q.end(), j->seq), q.end());
  }
}

void SimNetwork::remove_jobs_touching(const std::string& endpoint) {
  std::vector<std::uint64_t> victims;
  std::vector<std::string> freed;
  for (auto& [seq, j] : jobs_) {
    if (j->src == endpoint || j->dst == endpoint) {
      victims.push_back(seq);
      freed.insert(freed.end(), j->resources.begin(), j->resources.end());
    }
  }
  for (std::uint64_t seq : victims) {
    auto jit = jobs_.find(seq);
    drop_job(jit->second.get());
    jobs_.erase(jit);
  }
  if (!victims.empty()) start_ready_jobs(freed);
}

void SimNetwork::keepalive_tick(std::uint64_t seq) {
  auto jit = jobs_.find(seq);
  if (jit == jobs_.end()) return;
  Job* j = jit->second.get();
  auto nit = nodes_.find(j->src);
  if (nit == nodes_.end() || nit->second.crashed) {
    j->ka_timer = 0;
    return;
  }
  // The connection to a live source carries liveness even while the transfer
  // waits its turn, so a queued pull never trips the puller's dead-man timer.
  if (j->activity) j->activity->fetch_add(1);
  j->ka_timer = exec_->schedule(cfg_.keepalive_interval,
                                [this, seq] { keepalive_tick(seq); });
}

void SimNetwork::query_from(const std::string& dst, const std::string& src,
                            const QuerySpec& spec, Executor* exec,
                            std::function<void(QueryResult)> done) {
  auto dit = nodes_.find(dst);
  if (dit == nodes_.end() || dit->second.crashed) return;
  exec_->schedule(cfg_.data_latency, [this, src, spec, exec,
                                      done = std::move(done)]() mutable {
    auto sit = nodes_.find(src);
    if (sit == nodes_.end() || sit->second.crashed || !sit->second.serves)
      return;
    auto st = sit->second.serves->find(
        ServeRegistry::key(spec.model, spec.replica, spec.shard));
    if (!st) {
      QueryResult r;
      r.status = Status::not_serving;
      exec_->schedule(cfg_.data_latency, [exec, done = std::move(done), r] {
        exec->post([done = std::move(done), r] { done(r); });
      });
      return;
    }
    query_poll(std::move(st), src, spec, exec, std::move(done),
               exec_->now() + cfg_.keepalive_interval);
  });
}

void SimNetwork::query_poll(std::shared_ptr<PeerServeState> st, std::string src,
                            QuerySpec spec, Executor* exec,
                            std::function<void(QueryResult)> done,
                            Time deadline) {
  auto nit = nodes_.find(src);
  if (nit == nodes_.end() || nit->second.crashed) return;
  QueryResult r;
  bool settled = false;
  {
    std::lock_guard lk(st->m);
    if (!st->serving || st->version != spec.version) {
      r.status = Status::not_serving;
      settled = true;
    } else {
      r.progress = st->progress;
      r.complete = st->complete;
      if (st->complete || st->progress >= spec.min_items ||
          exec_->now() >= deadline)
        settled = true;  // satisfied, or bounded-wait keepalive reply
    }
  }
  if (settled) {
    exec_->schedule(cfg_.data_latency, [exec, done = std::move(done), r] {
      exec->post([done = std::move(done), r] { done(r); });
    });
    return;
  }
  exec_->schedule(kQueryRecheck,
                  [this, st = std::move(st), src = std::move(src),
                   spec = std::move(spec), exec, done = std::move(done),
                   deadline]() mutable {
                    query_poll(std::move(st), std::move(src), std::move(spec),
                               exec, std::move(done), deadline);
                  });
}

// ---------------------------------------------------------------------------
// Accounting

std::uint64_t SimNetwork::bytes_between(const std::string& dc_from,
                                        const std::string& dc_to) const {
  auto it = dc_bytes_.find({dc_from, dc_to});
  return it == dc_bytes_.end() ? 0 : it->second;
}

std::uint64_t SimNetwork::pulls_served(const std::string& endpoint) const {
  auto it = nodes_.find(endpoint);
  return it == nodes_.end() ? 0 : it->second.pulls_served;
}

}  // namespace refstore
