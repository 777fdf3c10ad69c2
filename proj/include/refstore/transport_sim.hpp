#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "refstore/config.hpp"
#include "refstore/executor.hpp"
#include "refstore/server_core.hpp"
#include "refstore/transport.hpp"

namespace refstore {

// Deterministic bandwidth-shaped network over a virtual clock. Control
// frames travel with a fixed latency; bulk pulls move through three
// full-duplex resources — source uplink, destination downlink, and (when
// datacenters differ) the ordered inter-DC link — each a FIFO served in
// global submission order. A transfer runs when it heads every queue it
// needs, at the minimum rate among them, so bytes over any resource never
// exceed rate x time. Identical inputs replay identically: ties break by
// submission sequence and the clock is integer nanoseconds.
class SimNetwork {
 public:
  SimNetwork(SimExecutor* exec, SimNetConfig cfg);
  ~SimNetwork();

  // One record per completed data transfer, in completion order.
  struct TransferRecord {
    std::uint64_t seq = 0;
    std::string src, dst;  // endpoints
    std::uint64_t bytes = 0;
    Time submitted{0}, started{0}, finished{0};
    bool cross_dc = false;
  };

  // Client-facing transport facade bound to one worker node. Tagging every
  // call with the owning node lets the fabric shape traffic by datacenter
  // and target faults at a single actor.
  class Port : public ControlPlane, public DataTransport {
   public:
    Result<std::shared_ptr<Channel>> connect(const std::string& server,
                                             Executor* exec,
                                             ChannelCallbacks cbs) override;
    void async_pull(const std::string& endpoint, const PullSpec& spec,
                    PullDest dest, Executor* exec,
                    std::function<void(PullResult)> done) override;
    void async_query(const std::string& endpoint, const QuerySpec& spec,
                     Executor* exec,
                     std::function<void(QueryResult)> done) override;

   private:
    friend class SimNetwork;
    SimNetwork* net_ = nullptr;
    std::string endpoint_;
  };

  // Topology. Nodes own a serve registry and live in a datacenter; servers
  // share the sim executor.
  Port* add_node(const std::string& endpoint, const std::string& dc,
                 ServeRegistry* serves);
  void add_server(const std::string& name, ServerCore* core);
  // Outbound-frame hook to hand a ServerCore at construction.
  ServerCore::SendFn sender();

  // Fault injection.
  void set_server_down(const std::string& name, bool down);
  void crash_server(const std::string& name);   // sever + refuse dials
  void restart_server(const std::string& name) { set_server_down(name, false); }
  void crash_node(const std::string& endpoint);  // silence data + sever control
  void set_partition(const std::string& endpoint, const std::string& server,
                     bool on);  // drop control frames both ways
  void poison_next_pull(const std::string& src_endpoint);

  // Accounting (for benches and assertions).
  std::uint64_t bytes_between(const std::string& dc_from,
                              const std::string& dc_to) const;
  const std::vector<TransferRecord>& transfers() const { return records_; }
  std::uint64_t pulls_served(const std::string& endpoint) const;

  const SimNetConfig& config() const { return cfg_; }

 private:
  struct Node {
    std::string dc;
    ServeRegistry* serves = nullptr;
    bool crashed = false;
    std::unique_ptr<Port> port;
    std::uint64_t pulls_served = 0;
  };
  struct Server {
    ServerCore* core = nullptr;
    bool down = false;
  };
  struct Conn {
    std::string actor;  // dialing endpoint
    std::string server;
    ChannelCallbacks cbs;
    Executor* client_exec = nullptr;
    bool open = false;
  };
  class SimChannel;

  // A transfer occupying 1-3 FIFO resources, keyed by name.
  struct Job {
    std::uint64_t seq = 0;
    std::string src, dst;
    std::vector<std::string> resources;
    std::uint64_t bytes = 0;
    std::uint64_t rate = 1;
    Time submitted{0}, started{0};
    bool running = false;
    std::uint64_t fin_timer = 0;
    std::uint64_t ka_timer = 0;
    // Bytes land in the caller's buffers when the request is admitted (the
    // published content is immutable, so early and late copies agree); the
    // job then only models when the transfer finishes.
    PullResult result;
    Executor* exec = nullptr;
    std::function<void(PullResult)> done;
    std::shared_ptr<std::atomic<std::uint64_t>> activity;
  };

  // Control plane internals.
  Result<std::shared_ptr<Channel>> connect_from(const std::string& actor,
                                                const std::string& server,
                                                Executor* exec,
                                                ChannelCallbacks cbs);
  bool channel_send(std::uint64_t conn, const Frame& f);
  void channel_close(std::uint64_t conn);
  void deliver_to_client(std::uint64_t conn, const Frame& f);
  void sever_conn(std::uint64_t conn, bool notify_client, bool notify_server);
  bool partitioned(const std::string& actor, const std::string& server) const;

  // Data plane internals.
  void pull_from(const std::string& dst, const std::string& src,
                 const PullSpec& spec, PullDest dest, Executor* exec,
                 std::function<void(PullResult)> done);
  void query_from(const std::string& dst, const std::string& src,
                  const QuerySpec& spec, Executor* exec,
                  std::function<void(QueryResult)> done);
  void query_poll(std::shared_ptr<PeerServeState> st, std::string src,
                  QuerySpec spec, Executor* exec,
                  std::function<void(QueryResult)> done, Time deadline);
  std::uint64_t link_rate(const std::string& dc_from,
                          const std::string& dc_to) const;
  void start_ready_jobs(const std::vector<std::string>& resources);
  bool heads_all(const Job* j) const;
  void start_job(Job* j);
  void finish_job(std::uint64_t seq);
  void drop_job(Job* j);
  void keepalive_tick(std::uint64_t seq);
  void remove_jobs_touching(const std::string& endpoint);

  SimExecutor* exec_;
  SimNetConfig cfg_;
  std::map<std::string, Node> nodes_;
  std::map<std::string, Server> servers_;
  std::map<std::uint64_t, std::shared_ptr<Conn>> conns_;
  std::map<std::pair<std::string, std::string>, bool> partitions_;
  std::map<std::string, bool> poison_next_;
  std::uint64_t next_conn_ = 0;

  std::map<std::uint64_t, std::unique_ptr<Job>> jobs_;
  std::map<std::string, std::deque<std::uint64_t>> queues_;  // resource -> seq
  std::uint64_t next_job_ = 0;

  std::map<std::pair<std::string, std::string>, std::uint64_t> dc_bytes_;
  std::vector<TransferRecord> records_;

  static constexpr Duration kQueryRecheck = std::chrono::milliseconds(10);
};

}  // namespace refstore
