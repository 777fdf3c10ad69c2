#include "refstore/transport_mem.hpp"

#include <algorithm>
#include <utility>

namespace refstore {

// ---------------------------------------------------------------------------
// Control plane

class MemNetwork::MemChannel : public Channel {
 public:
  MemChannel(MemNetwork* net, std::uint64_t id) : net_(net), id_(id) {}
  ~MemChannel() override { close(); }

  bool send(const Frame& f) override { return net_->client_send(id_, f); }

  void close() override {
    if (!closed_) {
      closed_ = true;
      net_->client_close(id_);
    }
  }

 private:
  MemNetwork* net_;
  std::uint64_t id_;
  bool closed_ = false;
};

ServerCore::SendFn MemNetwork::sender() {
  return [this](ServerCore::ConnId conn, const Frame& f) {
    deliver_to_client(conn, f);
  };
}

void MemNetwork::register_server(const std::string& name, ServerCore* core,
                                 Executor* server_exec) {
  std::lock_guard lk(m_);
  servers_[name] = ServerSlot{core, server_exec, false};
}

void MemNetwork::set_server_down(const std::string& name, bool down) {
  std::lock_guard lk(m_);
  auto it = servers_.find(name);
  if (it != servers_.end()) it->second.down = down;
}

void MemNetwork::crash_server(const std::string& name) {
  std::vector<std::shared_ptr<Conn>> victims;
  {
    std::lock_guard lk(m_);
    auto it = servers_.find(name);
    if (it != servers_.end()) it->second.down = true;
    for (auto& [id, c] : conns_) {
      if (c->server == name && c->open) {
        c->open = false;
        victims.push_back(c);
      }
    }
  }
  for (auto& c : victims) {
    auto cb = c->cbs.on_disconnect;
    if (cb) c->client_exec->post(cb);
  }
}

Result<std::shared_ptr<Channel>> MemNetwork::connect(const std::string& server,
                                                     Executor* exec,
                                                     ChannelCallbacks cbs) {
  std::lock_guard lk(m_);
  auto it = servers_.find(server);
  if (it == servers_.end() || it->second.down || !it->second.core)
    return Status::server_unavailable;
  std::uint64_t id = next_conn_++;
  auto c = std::make_shared<Conn>();
  c->server = server;
  c->client_exec = exec;
  c->cbs = std::move(cbs);
  conns_.emplace(id, c);
  return std::static_pointer_cast<Channel>(
      std::make_shared<MemChannel>(this, id));
}

bool MemNetwork::client_send(std::uint64_t conn_id, Frame f) {
  ServerCore* core = nullptr;
  Executor* exec = nullptr;
  {
    std::lock_guard lk(m_);
    auto it = conns_.find(conn_id);
    if (it == conns_.end() || !it->second->open) return false;
    auto sit = servers_.find(it->second->server);
    if (sit == servers_.end() || !sit->second.core) return false;
    core = sit->second.core;
    exec = sit->second.exec;
  }
  exec->post([core, conn_id, f = std::move(f)] { core->on_frame(conn_id, f); });
  return true;
}

void MemNetwork::client_close(std::uint64_t conn_id) {
  ServerCore* core = nullptr;
  Executor* exec = nullptr;
  {
    std::lock_guard lk(m_);
    auto it = conns_.find(conn_id);
    if (it == conns_.end()) return;
    if (it->second->open) {
      it->second->open = false;
      auto sit = servers_.find(it->second->server);
      if (sit != servers_.end() && sit->second.core) {
        core = sit->second.core;
        exec = sit->second.exec;
      }
    }
    conns_.erase(it);
  }
  if (core) exec->post([core, conn_id] { core->on_disconnect(conn_id); });
}

void MemNetwork::deliver_to_client(ServerCore::ConnId conn_id, const Frame& f) {
  std::function<void(Frame)> cb;
  Executor* exec = nullptr;
  {
    std::lock_guard lk(m_);
    auto it = conns_.find(conn_id);
    if (it == conns_.end() || !it->second->open) return;
    cb = it->second->cbs.on_frame;
    exec = it->second->client_exec;
  }
  if (cb) exec->post([cb = std::move(cb), f] { cb(f); });
}

// ---------------------------------------------------------------------------
// Data plane

void MemNetwork::register_data(const std::string& endpoint,
                               ServeRegistry* serves) {
  std::lock_guard lk(m_);
  data_[endpoint] = serves;
}

void MemNetwork::erase_data(const std::string& endpoint) {
  std::lock_guard lk(m_);
  data_.erase(endpoint);
}

void MemNetwork::set_data_silent(const std::string& endpoint, bool silent) {
  std::lock_guard lk(m_);
  if (silent)
    silent_.insert(endpoint);
  else
    silent_.erase(endpoint);
}

std::shared_ptr<PeerServeState> MemNetwork::find_state(
    const std::string& endpoint, const std::string& model,
    const std::string& replica, std::uint32_t shard, bool& silent) {
  ServeRegistry* reg = nullptr;
  {
    std::lock_guard lk(m_);
    silent = silent_.count(endpoint) > 0;
    auto it = data_.find(endpoint);
    if (it != data_.end()) reg = it->second;
  }
  if (silent || !reg) return nullptr;
  return reg->find(ServeRegistry::key(model, replica, shard));
}

void MemNetwork::async_pull(const std::string& endpoint, const PullSpec& spec,
                            PullDest dest, Executor* exec,
                            std::function<void(PullResult)> done) {
  bool silent = false;
  auto st = find_state(endpoint, spec.model, spec.replica, spec.shard, silent);
  if (silent) return;  // crashed peer: nothing ever comes back
  PullResult r;
  if (!st) {
    r.status = Status::not_serving;
    exec->post([done = std::move(done), r] { done(r); });
    return;
  }
  ServeSlice s = compute_slice(*st, spec.version, spec.offset, spec.max_bytes);
  r.status = s.status;
  r.source_progress = s.progress;
  r.source_complete = s.complete;
  r.bytes = s.bytes;
  if (ok(s.status) && s.bytes > 0 && !dest.empty()) {
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
  if (ok(s.status) && spec.activity) spec.activity->fetch_add(1);
  exec->post([done = std::move(done), r] { done(r); });
}

void MemNetwork::async_query(const std::string& endpoint, const QuerySpec& spec,
                             Executor* exec,
                             std::function<void(QueryResult)> done) {
  bool silent = false;
  auto st = find_state(endpoint, spec.model, spec.replica, spec.shard, silent);
  if (silent) return;
  if (!st) {
    QueryResult r;
    r.status = Status::not_serving;
    exec->post([done = std::move(done), r] { done(r); });
    return;
  }
  query_wait(std::move(st), spec, exec, std::move(done),
             exec->now() + query_keepalive);
}

void MemNetwork::query_wait(std::shared_ptr<PeerServeState> st, QuerySpec spec,
                            Executor* exec,
                            std::function<void(QueryResult)> done,
                            Time deadline) {
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
          exec->now() >= deadline)
        settled = true;  // satisfied, or bounded-wait keepalive reply
    }
  }
  if (settled) {
    exec->post([done = std::move(done), r] { done(r); });
    return;
  }
  exec->schedule(query_recheck,
                 [this, st = std::move(st), spec = std::move(spec), exec,
                  done = std::move(done), deadline]() mutable {
                   query_wait(std::move(st), std::move(spec), exec,
                              std::move(done), deadline);
                 });
}

}  // namespace refstore
