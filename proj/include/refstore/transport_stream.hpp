#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "refstore/config.hpp"
#include "refstore/server_core.hpp"
#include "refstore/trace.hpp"
#include "refstore/transport.hpp"

namespace refstore {

// TCP transports. Control connections carry the length-prefixed frame
// encoding from codec.hpp; the bulk-data plane uses the fixed 16-byte
// header + body layout below. Byte layouts are documented in
// docs/protocol.md and frozen by tests/unit/test_transport.cpp.

struct HostPort {
  std::string host;
  std::uint16_t port = 0;

  static std::optional<HostPort> parse(const std::string& s);
  std::string format() const;
};

// ---------------------------------------------------------------------------
// Data-plane wire format.
//
//   header  := magic:u32be ("RSDP") | wire_version:u16be | kind:u16be |
//              body_len:u64be                                  (16 bytes)
//   pull_req / query_req bodies use the tagged field encoding of codec.hpp;
//   responses are fixed-layout prefixes followed by raw payload bytes.

inline constexpr std::size_t kDataHeaderBytes = 16;
inline constexpr std::uint32_t kDataMagic = 0x52534450;  // "RSDP"
inline constexpr std::uint16_t kDataWireVersion = 1;
inline constexpr std::uint64_t kMaxDataBody = 256ull << 20;

enum class DataMsg : std::uint16_t {
  pull_req = 1,
  pull_resp = 2,
  query_req = 3,
  query_resp = 4,
};

struct DataHeader {
  std::uint16_t wire_version = 0;
  std::uint16_t kind = 0;
  std::uint64_t body_len = 0;
};

std::string encode_data_header(DataMsg kind, std::uint64_t body_len);
std::optional<DataHeader> decode_data_header(const unsigned char* p16);

std::string encode_pull_req(const PullSpec& s);
std::optional<PullSpec> decode_pull_req(std::string_view body);
std::string encode_query_req(const QuerySpec& s);
std::optional<QuerySpec> decode_query_req(std::string_view body);

// pull_resp body := status:u8 | progress:u64be | complete:u8 |
//                   payload_len:u64be | payload bytes
std::string encode_pull_resp_prefix(Status st, std::uint64_t progress,
                                    bool complete, std::uint64_t payload_len);
// query_resp body := status:u8 | progress:u64be | complete:u8
std::string encode_query_resp(Status st, std::uint64_t progress,
                              bool complete);

// ---------------------------------------------------------------------------
// Serves pulls and progress queries over TCP for every shard in a registry.
// One thread per connection; requests on a connection are handled serially.
// Honors REFSTORE_FAULT_FLIP_PULL=<k> (read at construction): flips one bit
// in the wire copy of the k-th payload-carrying pull response, once.
class StreamDataServer {
 public:
  struct Options {
    // A progress query blocks at most this long before replying with the
    // current state, so a live source produces periodic replies.
    Duration query_bound = std::chrono::seconds(1);
    // Accepts but never replies; models a hung peer in tests.
    bool mute_for_test = false;
  };

  explicit StreamDataServer(ServeRegistry* reg);
  StreamDataServer(ServeRegistry* reg, Options opt);
  ~StreamDataServer();

  // Binds (port 0 picks a free port) and returns the dialable endpoint.
  Result<std::string> start(const std::string& bind_addr);
  void stop();
  const std::string& endpoint() const { return endpoint_; }

 private:
  void accept_loop();
  void conn_loop(int fd);
  bool handle_pull(int fd, std::string_view body);
  bool handle_query(int fd, std::string_view body);

  ServeRegistry* reg_;
  Options opt_;
  std::uint64_t flip_at_ = 0;  // 1-based index of the response to damage
  std::atomic<std::uint64_t> data_resps_{0};

  int lfd_ = -1;
  std::string endpoint_;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex m_;
  std::vector<std::thread> conn_threads_;
  std::vector<int> conn_fds_;
};

// ---------------------------------------------------------------------------
// Dialing side of the data plane. Requests run on a small worker pool with
// per-endpoint connection reuse; completions are posted to the caller's
// executor. A silent peer surfaces as transfer_failed after io_timeout.
class StreamData : public DataTransport {
 public:
  struct Options {
    Duration dial_timeout = std::chrono::seconds(2);
    Duration io_timeout = std::chrono::seconds(10);
    std::size_t workers = 8;
    std::size_t idle_per_endpoint = 4;
  };

  StreamData();
  explicit StreamData(Options opt);
  ~StreamData() override;

  void async_pull(const std::string& endpoint, const PullSpec& spec,
                  PullDest dest, Executor* exec,
                  std::function<void(PullResult)> done) override;
  void async_query(const std::string& endpoint, const QuerySpec& spec,
                   Executor* exec,
                   std::function<void(QueryResult)> done) override;

 private:
  void worker();
  void enqueue(std::function<void()> job);
  int acquire(const std::string& endpoint);
  void release(const std::string& endpoint, int fd, bool healthy);

  Options opt_;
  std::mutex m_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> jobs_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
  std::map<std::string, std::vector<int>> idle_;
};

// ---------------------------------------------------------------------------
// Control-plane dialer. Each channel owns one TCP connection and a reader
// thread; frames and the disconnect notice are posted to the executor given
// at connect time.
class StreamControl : public ControlPlane {
 public:
  struct Options {
    Duration dial_timeout = std::chrono::seconds(2);
  };

  StreamControl();
  explicit StreamControl(Options opt);
  Result<std::shared_ptr<Channel>> connect(const std::string& server,
                                           Executor* exec,
                                           ChannelCallbacks cbs) override;

 private:
  Options opt_;
};

// ---------------------------------------------------------------------------
// Hosts one reference server behind a TCP listener. All core calls run on a
// dedicated executor thread; socket reads happen on per-connection threads.
class StreamServerHost {
 public:
  StreamServerHost(std::string name, ServerConfig cfg, TraceSink* trace);
  ~StreamServerHost();

  // Binds, starts the core, and returns the dialable address.
  Result<std::string> start(const std::string& bind_addr);
  void stop();

  ServerCore& core() { return *core_; }
  const std::string& address() const { return address_; }

 private:
  struct ConnIo {
    int fd = -1;
    std::mutex wm;
    std::atomic<bool> open{true};
  };

  void accept_loop();
  void conn_loop(ServerCore::ConnId id, std::shared_ptr<ConnIo> io);
  void send_to(ServerCore::ConnId id, const Frame& f);

  std::string name_;
  ServerConfig cfg_;
  TraceSink* trace_;
  ThreadExecutor exec_;
  std::unique_ptr<ServerCore> core_;

  int lfd_ = -1;
  std::string address_;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex m_;
  std::map<ServerCore::ConnId, std::shared_ptr<ConnIo>> conns_;
  std::vector<std::thread> conn_threads_;
  std::uint64_t next_conn_ = 0;
};

}  // namespace refstore
