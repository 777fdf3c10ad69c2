#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>

#include "refstore/executor.hpp"
#include "refstore/server_core.hpp"
#include "refstore/transport.hpp"

namespace refstore {

// Zero-delay in-process wiring of client cores to server cores and to each
// other's serve registries. Frames and pull completions are posted straight
// onto the participants' executors; useful for functional tests where
// protocol behavior matters and network timing does not. Thread-safe, so the
// participants may live on different executors.
class MemNetwork : public ControlPlane, public DataTransport {
 public:
  // --- control plane --------------------------------------------------------
  // The send function server cores emit frames through (safe to hand to a
  // core before it is registered).
  ServerCore::SendFn sender();
  // Hooks a server core into the network under `name`. Re-registering a name
  // replaces the previous core (fresh-process restart).
  void register_server(const std::string& name, ServerCore* core,
                       Executor* server_exec);
  // A down server refuses new connections; existing ones stay up.
  void set_server_down(const std::string& name, bool down);
  // Marks the server down and severs every live connection to it.
  void crash_server(const std::string& name);

  Result<std::shared_ptr<Channel>> connect(const std::string& server,
                                           Executor* exec,
                                           ChannelCallbacks cbs) override;

  // --- data plane ------------------------------------------------------------
  void register_data(const std::string& endpoint, ServeRegistry* serves);
  void erase_data(const std::string& endpoint);
  // A silent endpoint swallows pulls and queries without ever replying: what
  // a crashed peer looks like from the outside.
  void set_data_silent(const std::string& endpoint, bool silent);

  void async_pull(const std::string& endpoint, const PullSpec& spec,
                  PullDest dest, Executor* exec,
                  std::function<void(PullResult)> done) override;
  void async_query(const std::string& endpoint, const QuerySpec& spec,
                   Executor* exec,
                   std::function<void(QueryResult)> done) override;

  // Long-poll pacing for async_query.
  Duration query_recheck = std::chrono::milliseconds(10);
  Duration query_keepalive = std::chrono::seconds(1);

 private:
  class MemChannel;

  struct ServerSlot {
    ServerCore* core = nullptr;
    Executor* exec = nullptr;
    bool down = false;
  };
  struct Conn {
    std::string server;
    Executor* client_exec = nullptr;
    ChannelCallbacks cbs;
    bool open = true;
  };

  bool client_send(std::uint64_t conn_id, Frame f);
  void client_close(std::uint64_t conn_id);
  void deliver_to_client(ServerCore::ConnId conn_id, const Frame& f);

  std::shared_ptr<PeerServeState> find_state(const std::string& endpoint,
                                             const std::string& model,
                                             const std::string& replica,
                                             std::uint32_t shard, bool& silent);
  void query_wait(std::shared_ptr<PeerServeState> st, QuerySpec spec,
                  Executor* exec, std::function<void(QueryResult)> done,
                  Time deadline);

  mutable std::mutex m_;
  std::map<std::string, ServerSlot> servers_;
  std::map<std::uint64_t, std::shared_ptr<Conn>> conns_;
  std::map<std::string, ServeRegistry*> data_;
  std::set<std::string> silent_;
  std::uint64_t next_conn_ = 1;
};

}  // namespace refstore
