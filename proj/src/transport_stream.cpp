#include "refstore/transport_stream.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <future>
#include <utility>

#include "refstore/codec.hpp"

namespace refstore {

namespace {

// --------------------------------------------------------------------------
// Socket plumbing.

int to_ms(Duration d) {
  auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(d).count();
  if (ms < 1) ms = 1;
  if (ms > 3600'000) ms = 3600'000;
  return static_cast<int>(ms);
}

void set_common_opts(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

void set_io_timeout(int fd, Duration d) {
  auto us = std::chrono::duration_cast<std::chrono::microseconds>(d).count();
  timeval tv;
  tv.tv_sec = static_cast<time_t>(us / 1'000'000);
  tv.tv_usec = static_cast<suseconds_t>(us % 1'000'000);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

bool make_addr(const HostPort& hp, sockaddr_in* out) {
  std::memset(out, 0, sizeof *out);
  out->sin_family = AF_INET;
  out->sin_port = htons(hp.port);
  return ::inet_pton(AF_INET, hp.host.c_str(), &out->sin_addr) == 1;
}

// Connects with a bounded wait; returns -1 on failure.
int dial(const HostPort& hp, Duration timeout) {
  sockaddr_in addr;
  if (!make_addr(hp, &addr)) return -1;
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return -1;
  int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  if (rc != 0 && errno != EINPROGRESS) {
    ::close(fd);
    return -1;
  }
  if (rc != 0) {
    pollfd p{fd, POLLOUT, 0};
    if (::poll(&p, 1, to_ms(timeout)) <= 0) {
      ::close(fd);
      return -1;
    }
    int err = 0;
    socklen_t len = sizeof err;
    if (::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len) != 0 || err != 0) {
      ::close(fd);
      return -1;
    }
  }
  ::fcntl(fd, F_SETFL, flags);  // back to blocking
  set_common_opts(fd);
  return fd;
}

int listen_on(const HostPort& hp, std::uint16_t* bound_port) {
  sockaddr_in addr;
  if (!make_addr(hp, &addr)) return -1;
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return -1;
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(fd, 64) != 0) {
    ::close(fd);
    return -1;
  }
  sockaddr_in got;
  socklen_t len = sizeof got;
  if (::getsockname(fd, reinterpret_cast<sockaddr*>(&got), &len) != 0) {
    ::close(fd);
    return -1;
  }
  *bound_port = ntohs(got.sin_port);
  return fd;
}

bool read_exact(int fd, void* buf, std::size_t n) {
  auto* p = static_cast<char*>(buf);
  while (n > 0) {
    ssize_t got = ::recv(fd, p, n, 0);
    if (got > 0) {
      p += got;
      n -= static_cast<std::size_t>(got);
      continue;
    }
    if (got < 0 && errno == EINTR) continue;
    return false;  // EOF, timeout, or error
  }
  return true;
}

bool write_all(int fd, const void* buf, std::size_t n) {
  const auto* p = static_cast<const char*>(buf);
  while (n > 0) {
    ssize_t sent = ::send(fd, p, n, MSG_NOSIGNAL);
    if (sent > 0) {
      p += sent;
      n -= static_cast<std::size_t>(sent);
      continue;
    }
    if (sent < 0 && errno == EINTR) continue;
    return false;
  }
  return true;
}

bool write_str(int fd, const std::string& s) {
  return write_all(fd, s.data(), s.size());
}

}  // namespace

// --------------------------------------------------------------------------
// Addresses.

std::optional<HostPort> HostPort::parse(const std::string& s) {
  auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 >= s.size())
    return std::nullopt;
  HostPort hp;
  hp.host = s.substr(0, colon);
  std::uint64_t port = 0;
  for (std::size_t i = colon + 1; i < s.size(); ++i) {
    char c = s[i];
    if (c < '0' || c > '9') return std::nullopt;
    port = port * 10 + static_cast<std::uint64_t>(c - '0');
    if (port > 65535) return std::nullopt;
  }
  hp.port = static_cast<std::uint16_t>(port);
  return hp;
}

std::string HostPort::format() const {
  return host + ":" + std::to_string(port);
}

// --------------------------------------------------------------------------
// Data-plane wire format.

std::string encode_data_header(DataMsg kind, std::uint64_t body_len) {
  std::string out;
  append_u32be(out, kDataMagic);
  out.push_back(static_cast<char>(kDataWireVersion >> 8));
  out.push_back(static_cast<char>(kDataWireVersion & 0xff));
  auto k = static_cast<std::uint16_t>(kind);
  out.push_back(static_cast<char>(k >> 8));
  out.push_back(static_cast<char>(k & 0xff));
  append_u64be(out, body_len);
  return out;
}

std::optional<DataHeader> decode_data_header(const unsigned char* p) {
  if (load_u32be(p) != kDataMagic) return std::nullopt;
  DataHeader h;
  h.wire_version = static_cast<std::uint16_t>((p[4] << 8) | p[5]);
  h.kind = static_cast<std::uint16_t>((p[6] << 8) | p[7]);
  h.body_len = load_u64be(p + 8);
  if (h.wire_version != kDataWireVersion) return std::nullopt;
  if (h.body_len > kMaxDataBody) return std::nullopt;
  return h;
}

namespace {
enum : std::uint8_t {
  t_model = 1,
  t_replica = 2,
  t_version = 3,
  t_shard = 4,
  t_offset = 5,   // pull: stream offset; query: min_items
  t_max = 6,
};
}  // namespace

std::string encode_pull_req(const PullSpec& s) {
  FieldWriter w;
  w.put_str(t_model, s.model);
  w.put_str(t_replica, s.replica);
  w.put_u64(t_version, s.version);
  w.put_u64(t_shard, s.shard);
  w.put_u64(t_offset, s.offset);
  w.put_u64(t_max, s.max_bytes);
  return w.take();
}

std::optional<PullSpec> decode_pull_req(std::string_view body) {
  FieldReader r(body);
  PullSpec s;
  s.model = r.req_str(t_model);
  s.replica = r.req_str(t_replica);
  s.version = r.req_u64(t_version);
  s.shard = r.req_u32(t_shard);
  s.offset = r.req_u64(t_offset);
  s.max_bytes = r.req_u64(t_max);
  if (!r.all_found()) return std::nullopt;
  return s;
}

std::string encode_query_req(const QuerySpec& s) {
  FieldWriter w;
  w.put_str(t_model, s.model);
  w.put_str(t_replica, s.replica);
  w.put_u64(t_version, s.version);
  w.put_u64(t_shard, s.shard);
  w.put_u64(t_offset, s.min_items);
  return w.take();
}

std::optional<QuerySpec> decode_query_req(std::string_view body) {
  FieldReader r(body);
  QuerySpec s;
  s.model = r.req_str(t_model);
  s.replica = r.req_str(t_replica);
  s.version = r.req_u64(t_version);
  s.shard = r.req_u32(t_shard);
  s.min_items = r.req_u64(t_offset);
  if (!r.all_found()) return std::nullopt;
  return s;
}

std::string encode_pull_resp_prefix(Status st, std::uint64_t progress,
                                    bool complete,
                                    std::uint64_t payload_len) {
  std::string out;
  out.push_back(static_cast<char>(st));
  append_u64be(out, progress);
  out.push_back(complete ? 1 : 0);
  append_u64be(out, payload_len);
  return out;
}

std::string encode_query_resp(Status st, std::uint64_t progress,
                              bool complete) {
  std::string out;
  out.push_back(static_cast<char>(st));
  append_u64be(out, progress);
  out.push_back(complete ? 1 : 0);
  return out;
}

// --------------------------------------------------------------------------
// StreamDataServer.

StreamDataServer::StreamDataServer(ServeRegistry* reg)
    : StreamDataServer(reg, Options()) {}

StreamDataServer::StreamDataServer(ServeRegistry* reg, Options opt)
    : reg_(reg), opt_(opt) {
  if (const char* v = std::getenv("REFSTORE_FAULT_FLIP_PULL"))
    flip_at_ = std::strtoull(v, nullptr, 10);
}

StreamDataServer::~StreamDataServer() { stop(); }

Result<std::string> StreamDataServer::start(const std::string& bind_addr) {
  auto hp = HostPort::parse(bind_addr);
  if (!hp) return Status::invalid_argument;
  std::uint16_t port = 0;
  lfd_ = listen_on(*hp, &port);
  if (lfd_ < 0) return Status::server_unavailable;
  endpoint_ = HostPort{hp->host, port}.format();
  acceptor_ = std::thread([this] { accept_loop(); });
  return endpoint_;
}

void StreamDataServer::stop() {
  if (stopping_.exchange(true)) return;
  if (lfd_ >= 0) {
    ::shutdown(lfd_, SHUT_RDWR);
    ::close(lfd_);
    lfd_ = -1;
  }
  {
    std::lock_guard lk(m_);
    for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> ts;
  {
    std::lock_guard lk(m_);
    ts.swap(conn_threads_);
  }
  for (auto& t : ts)
    if (t.joinable()) t.join();
}

void StreamDataServer::accept_loop() {
  while (!stopping_) {
    int fd = ::accept(lfd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;  // listener closed
    }
    set_common_opts(fd);
    std::lock_guard lk(m_);
    if (stopping_) {
      ::close(fd);
      return;
    }
    conn_fds_.push_back(fd);
    conn_threads_.emplace_back([this, fd] { conn_loop(fd); });
  }
}

void StreamDataServer::conn_loop(int fd) {
  unsigned char head[kDataHeaderBytes];
  std::string body;
  while (!stopping_) {
    if (!read_exact(fd, head, sizeof head)) break;
    auto h = decode_data_header(head);
    if (!h) break;
    body.resize(h->body_len);
    if (h->body_len > 0 && !read_exact(fd, body.data(), body.size())) break;
    if (opt_.mute_for_test) continue;  // swallow the request
    bool ok = false;
    if (h->kind == static_cast<std::uint16_t>(DataMsg::pull_req))
      ok = handle_pull(fd, body);
    else if (h->kind == static_cast<std::uint16_t>(DataMsg::query_req))
      ok = handle_query(fd, body);
    if (!ok) break;
  }
  ::close(fd);
}

bool StreamDataServer::handle_pull(int fd, std::string_view body) {
  auto req = decode_pull_req(body);
  if (!req) return false;
  auto st = reg_->find(ServeRegistry::key(req->model, req->replica,
                                          req->shard));
  std::string resp;
  if (!st) {
    resp = encode_pull_resp_prefix(Status::not_serving, 0, false, 0);
  } else {
    ServeSlice s = compute_slice(*st, req->version, req->offset,
                                 req->max_bytes);
    resp = encode_pull_resp_prefix(s.status, s.progress, s.complete,
                                   ok(s.status) ? s.bytes : 0);
    if (ok(s.status) && s.bytes > 0) {
      std::size_t at = resp.size();
      resp.resize(at + s.bytes);
      {
        std::lock_guard lk(st->m);
        copy_slice_locked(*st, req->offset, s.bytes,
                          reinterpret_cast<std::byte*>(resp.data() + at));
      }
      if (flip_at_ != 0 &&
          data_resps_.fetch_add(1) + 1 == flip_at_) {
        resp[at + s.bytes / 2] ^= 0x01;  // damage the wire copy only
      }
    }
  }
  std::string head = encode_data_header(DataMsg::pull_resp, resp.size());
  return write_str(fd, head) && write_str(fd, resp);
}

bool StreamDataServer::handle_query(int fd, std::string_view body) {
  auto req = decode_query_req(body);
  if (!req) return false;
  auto st = reg_->find(ServeRegistry::key(req->model, req->replica,
                                          req->shard));
  Status status = Status::ok;
  std::uint64_t progress = 0;
  bool complete = false;
  if (!st) {
    status = Status::not_serving;
  } else {
    std::unique_lock lk(st->m);
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::nanoseconds(opt_.query_bound);
    st->cv.wait_until(lk, deadline, [&] {
      return stopping_ || !st->serving || st->version != req->version ||
             st->complete || st->progress >= req->min_items;
    });
    if (!st->serving || st->version != req->version) {
      status = Status::not_serving;
    } else {
      progress = st->progress;
      complete = st->complete;
    }
  }
  std::string resp = encode_query_resp(status, progress, complete);
  std::string head = encode_data_header(DataMsg::query_resp, resp.size());
  return write_str(fd, head) && write_str(fd, resp);
}

// --------------------------------------------------------------------------
// StreamData.

StreamData::StreamData() : StreamData(Options()) {}

StreamData::StreamData(Options opt) : opt_(opt) {
  if (opt_.workers == 0) opt_.workers = 1;
  workers_.reserve(opt_.workers);
  for (std::size_t i = 0; i < opt_.workers; ++i)
    workers_.emplace_back([this] { worker(); });
}

StreamData::~StreamData() {
  {
    std::lock_guard lk(m_);
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& t : workers_)
    if (t.joinable()) t.join();
  for (auto& [ep, fds] : idle_)
    for (int fd : fds) ::close(fd);
}

void StreamData::enqueue(std::function<void()> job) {
  {
    std::lock_guard lk(m_);
    jobs_.push_back(std::move(job));
  }
  cv_.notify_one();
}

void StreamData::worker() {
  for (;;) {
    std::function<void()> job;
    {
      std::unique_lock lk(m_);
      cv_.wait(lk, [&] { return stopping_ || !jobs_.empty(); });
      if (stopping_) return;
      job = std::move(jobs_.front());
      jobs_.pop_front();
    }
    job();
  }
}

int StreamData::acquire(const std::string& endpoint) {
  {
    std::lock_guard lk(m_);
    auto it = idle_.find(endpoint);
    if (it != idle_.end() && !it->second.empty()) {
      int fd = it->second.back();
      it->second.pop_back();
      return fd;
    }
  }
  auto hp = HostPort::parse(endpoint);
  if (!hp) return -1;
  int fd = dial(*hp, opt_.dial_timeout);
  if (fd >= 0) set_io_timeout(fd, opt_.io_timeout);
  return fd;
}

void StreamData::release(const std::string& endpoint, int fd, bool healthy) {
  if (!healthy) {
    ::close(fd);
    return;
  }
  std::lock_guard lk(m_);
  auto& pool = idle_[endpoint];
  if (stopping_ || pool.size() >= opt_.idle_per_endpoint) {
    ::close(fd);
    return;
  }
  pool.push_back(fd);
}

void StreamData::async_pull(const std::string& endpoint, const PullSpec& spec,
                            PullDest dest, Executor* exec,
                            std::function<void(PullResult)> done) {
  enqueue([this, endpoint, spec, dest = std::move(dest), exec,
           done = std::move(done)]() mutable {
    PullResult r;
    r.status = Status::transfer_failed;
    int fd = acquire(endpoint);
    bool healthy = false;
    if (fd >= 0) {
      std::string head = encode_data_header(DataMsg::pull_req, 0);
      std::string body = encode_pull_req(spec);
      head = encode_data_header(DataMsg::pull_req, body.size());
      unsigned char rhead[kDataHeaderBytes];
      char prefix[18];
      if (write_str(fd, head) && write_str(fd, body) &&
          read_exact(fd, rhead, sizeof rhead)) {
        auto h = decode_data_header(rhead);
        if (h && h->kind == static_cast<std::uint16_t>(DataMsg::pull_resp) &&
            h->body_len >= sizeof prefix &&
            read_exact(fd, prefix, sizeof prefix)) {
          const auto* p = reinterpret_cast<const unsigned char*>(prefix);
          auto status = static_cast<Status>(p[0]);
          std::uint64_t progress = load_u64be(p + 1);
          bool complete = p[9] != 0;
          std::uint64_t payload = load_u64be(p + 10);
          std::uint64_t cap = 0;
          for (const auto& d : dest) cap += d.size();
          if (payload == h->body_len - sizeof prefix && payload <= cap) {
            bool got = true;
            std::uint64_t left = payload;
            for (auto d : dest) {
              std::uint64_t n = std::min<std::uint64_t>(d.size(), left);
              if (n == 0) break;
              if (!read_exact(fd, d.data(), n)) {
                got = false;
                break;
              }
              left -= n;
            }
            if (got) {
              r.status = status;
              r.source_progress = progress;
              r.source_complete = complete;
              r.bytes = payload;
              healthy = true;
            }
          }
        }
      }
      release(endpoint, fd, healthy);
    }
    if (ok(r.status) && spec.activity) spec.activity->fetch_add(1);
    exec->post([done = std::move(done), r] { done(r); });
  });
}

void StreamData::async_query(const std::string& endpoint,
                             const QuerySpec& spec, Executor* exec,
                             std::function<void(QueryResult)> done) {
  enqueue([this, endpoint, spec, exec, done = std::move(done)]() mutable {
    QueryResult r;
    r.status = Status::transfer_failed;
    int fd = acquire(endpoint);
    bool healthy = false;
    if (fd >= 0) {
      std::string body = encode_query_req(spec);
      std::string head = encode_data_header(DataMsg::query_req, body.size());
      unsigned char rhead[kDataHeaderBytes];
      char resp[10];
      if (write_str(fd, head) && write_str(fd, body) &&
          read_exact(fd, rhead, sizeof rhead)) {
        auto h = decode_data_header(rhead);
        if (h && h->kind == static_cast<std::uint16_t>(DataMsg::query_resp) &&
            h->body_len == sizeof resp &&
            read_exact(fd, resp, sizeof resp)) {
          const auto* p = reinterpret_cast<const unsigned char*>(resp);
          r.status = static_cast<Status>(p[0]);
          r.progress = load_u64be(p + 1);
          r.complete = p[9] != 0;
          healthy = true;
        }
      }
      release(endpoint, fd, healthy);
    }
    exec->post([done = std::move(done), r] { done(r); });
  });
}

// --------------------------------------------------------------------------
// StreamControl.

namespace {

// Shared between the channel handle and its reader thread.
struct ChannelIo {
  int fd = -1;
  std::mutex wm;
  std::atomic<bool> closed{false};

  void shutdown_once() {
    if (!closed.exchange(true)) ::shutdown(fd, SHUT_RDWR);
  }
};

class StreamChannel : public Channel {
 public:
  StreamChannel(std::shared_ptr<ChannelIo> io, Executor* exec,
                ChannelCallbacks cbs)
      : io_(std::move(io)) {
    reader_ = std::thread([io = io_, exec, cbs = std::move(cbs)] {
      FrameDecoder dec;
      char buf[64 * 1024];
      for (;;) {
        ssize_t got = ::recv(io->fd, buf, sizeof buf, 0);
        if (got <= 0) {
          if (got < 0 && errno == EINTR) continue;
          break;
        }
        dec.feed({buf, static_cast<std::size_t>(got)});
        while (auto f = dec.next()) {
          if (cbs.on_frame)
            exec->post([on = cbs.on_frame, fr = std::move(*f)]() mutable {
              on(std::move(fr));
            });
        }
        if (dec.error()) break;
      }
      // Remote closure (not a local close()) is a disconnect event.
      if (!io->closed.load() && cbs.on_disconnect)
        exec->post(cbs.on_disconnect);
      io->shutdown_once();
    });
  }

  ~StreamChannel() override {
    close();
    if (reader_.joinable()) reader_.join();
    ::close(io_->fd);
  }

  bool send(const Frame& f) override {
    if (io_->closed.load()) return false;
    std::string wire = encode_frame(f);
    std::lock_guard lk(io_->wm);
    if (!write_all(io_->fd, wire.data(), wire.size())) {
      io_->shutdown_once();
      return false;
    }
    return true;
  }

  void close() override { io_->shutdown_once(); }

 private:
  std::shared_ptr<ChannelIo> io_;
  std::thread reader_;
};

}  // namespace

StreamControl::StreamControl() : StreamControl(Options()) {}

StreamControl::StreamControl(Options opt) : opt_(opt) {}

Result<std::shared_ptr<Channel>> StreamControl::connect(
    const std::string& server, Executor* exec, ChannelCallbacks cbs) {
  auto hp = HostPort::parse(server);
  if (!hp) return Status::server_unavailable;
  int fd = dial(*hp, opt_.dial_timeout);
  if (fd < 0) return Status::server_unavailable;
  auto io = std::make_shared<ChannelIo>();
  io->fd = fd;
  std::shared_ptr<Channel> ch =
      std::make_shared<StreamChannel>(std::move(io), exec, std::move(cbs));
  return ch;
}

// --------------------------------------------------------------------------
// StreamServerHost.

StreamServerHost::StreamServerHost(std::string name, ServerConfig cfg,
                                   TraceSink* trace)
    : name_(std::move(name)), cfg_(cfg), trace_(trace) {}

StreamServerHost::~StreamServerHost() { stop(); }

Result<std::string> StreamServerHost::start(const std::string& bind_addr) {
  auto hp = HostPort::parse(bind_addr);
  if (!hp) return Status::invalid_argument;
  std::uint16_t port = 0;
  lfd_ = listen_on(*hp, &port);
  if (lfd_ < 0) return Status::server_unavailable;
  address_ = HostPort{hp->host, port}.format();
  core_ = std::make_unique<ServerCore>(
      name_, cfg_, &exec_, trace_,
      [this](ServerCore::ConnId id, const Frame& f) { send_to(id, f); });
  core_->start();
  acceptor_ = std::thread([this] { accept_loop(); });
  return address_;
}

void StreamServerHost::stop() {
  if (stopping_.exchange(true)) return;
  if (lfd_ >= 0) {
    ::shutdown(lfd_, SHUT_RDWR);
    ::close(lfd_);
    lfd_ = -1;
  }
  {
    std::lock_guard lk(m_);
    for (auto& [id, io] : conns_) {
      io->open = false;
      ::shutdown(io->fd, SHUT_RDWR);
    }
  }
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> ts;
  {
    std::lock_guard lk(m_);
    ts.swap(conn_threads_);
  }
  for (auto& t : ts)
    if (t.joinable()) t.join();
  if (core_) {
    // Run the core's shutdown on its own executor thread, then halt it.
    std::promise<void> done;
    exec_.post([&] {
      core_->stop();
      done.set_value();
    });
    done.get_future().wait();
    exec_.stop();
  }
}

void StreamServerHost::accept_loop() {
  while (!stopping_) {
    int fd = ::accept(lfd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;
    }
    set_common_opts(fd);
    auto io = std::make_shared<ConnIo>();
    io->fd = fd;
    ServerCore::ConnId id;
    {
      std::lock_guard lk(m_);
      if (stopping_) {
        ::close(fd);
        return;
      }
      id = ++next_conn_;
      conns_[id] = io;
      conn_threads_.emplace_back(
          [this, id, io] { conn_loop(id, io); });
    }
  }
}

void StreamServerHost::conn_loop(ServerCore::ConnId id,
                                 std::shared_ptr<ConnIo> io) {
  FrameDecoder dec;
  char buf[64 * 1024];
  for (;;) {
    ssize_t got = ::recv(io->fd, buf, sizeof buf, 0);
    if (got <= 0) {
      if (got < 0 && errno == EINTR) continue;
      break;
    }
    dec.feed({buf, static_cast<std::size_t>(got)});
    while (auto f = dec.next()) {
      exec_.post([this, id, fr = std::move(*f)] {
        if (core_) core_->on_frame(id, fr);
      });
    }
    if (dec.error()) break;
  }
  io->open = false;
  exec_.post([this, id] {
    if (core_) core_->on_disconnect(id);
  });
  {
    std::lock_guard lk(m_);
    conns_.erase(id);
  }
  ::close(io->fd);
}

void StreamServerHost::send_to(ServerCore::ConnId id, const Frame& f) {
  std::shared_ptr<ConnIo> io;
  {
    std::lock_guard lk(m_);
    auto it = conns_.find(id);
    if (it != conns_.end()) io = it->second;
  }
  if (!io || !io->open.load()) return;
  std::string wire = encode_frame(f);
  std::lock_guard lk(io->wm);
  if (!write_all(io->fd, wire.data(), wire.size())) {
    io->open = false;
    ::shutdown(io->fd, SHUT_RDWR);
  }
}

}  // namespace refstore
