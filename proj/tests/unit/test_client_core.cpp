#include "refstore/client_core.hpp"

#include <doctest.h>

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "refstore/server_core.hpp"
#include "refstore/transport_mem.hpp"

using namespace refstore;

namespace {

using OpResult = ClientCore::OpResult;

// One server plus any number of client replicas on a shared virtual clock,
// wired through the zero-delay in-memory network.
struct ClusterFix {
  SimExecutor exec;
  TraceLog log;
  MemNetwork net;
  ServerCore srv;

  struct Node {
    ServeRegistry serves;
    std::map<std::pair<std::uint32_t, std::string>, std::vector<std::byte>>
        bufs;
    std::unique_ptr<ClientCore> core;
  };
  std::map<std::string, std::unique_ptr<Node>> nodes;

  ClusterFix() : srv("A", ServerConfig{}, &exec, &log, net.sender()) {
    net.register_server("A", &srv, &exec);
    srv.start();
  }
  ~ClusterFix() {
    nodes.clear();
    srv.stop();
  }

  ClientCore& make(const std::string& replica, std::uint32_t shards,
                   std::function<void(ClientConfig&)> tweak = {}) {
    auto n = std::make_unique<Node>();
    ClientConfig cfg;
    cfg.servers = {"A"};
    cfg.data_endpoint = "ep:" + replica;
    if (tweak) tweak(cfg);
    net.register_data(cfg.data_endpoint, &n->serves);
    n->core = std::make_unique<ClientCore>("m", replica, shards, cfg, &exec,
                                           &log, &net, &net, &n->serves);
    ClientCore& ref = *n->core;
    nodes[replica] = std::move(n);
    return ref;
  }

  // Allocates a deterministic pattern buffer and registers it.
  void reg(const std::string& replica, std::uint32_t shard,
           const std::string& name, std::size_t len, std::uint64_t salt) {
    Node& n = *nodes.at(replica);
    auto& v = n.bufs[{shard, name}];
    v.resize(len);
    fill(replica, shard, name, salt);
    REQUIRE(n.core->register_tensor(shard, name, {v.data(), v.size()}) ==
            Status::ok);
  }

  void fill(const std::string& replica, std::uint32_t shard,
            const std::string& name, std::uint64_t salt) {
    auto& v = nodes.at(replica)->bufs.at({shard, name});
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = std::byte((salt * 1315423911u + i * 131u) & 0xff);
  }

  std::span<const std::byte> buf(const std::string& replica,
                                 std::uint32_t shard,
                                 const std::string& name) {
    auto& v = nodes.at(replica)->bufs.at({shard, name});
    return {v.data(), v.size()};
  }

  bool same_bytes(const std::string& ra, const std::string& rb,
                  std::uint32_t shard, const std::string& name) {
    auto a = buf(ra, shard, name);
    auto b = buf(rb, shard, name);
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] != b[i]) return false;
    return true;
  }

  bool pump(std::function<bool()> p, Duration max = std::chrono::seconds(60)) {
    Time h = exec.now() + max;
    while (!p() && exec.step(h)) {
    }
    return p();
  }

  OpResult run(std::function<void(ClientCore::OpFn)> op,
               Duration max = std::chrono::seconds(60)) {
    std::optional<OpResult> out;
    op([&](OpResult r) { out = std::move(r); });
    pump([&] { return out.has_value(); }, max);
    REQUIRE(out.has_value());
    return std::move(*out);
  }

  bool traced(const std::string& kind) {
    for (auto& ev : log.events())
      if (ev.kind == kind) return true;
    return false;
  }
};

}  // namespace

TEST_SUITE_BEGIN("client_core");

TEST_CASE("open, publish, list, unpublish, close round trip") {
  ClusterFix fx;
  ClientCore& t = fx.make("T", 2);
  fx.reg("T", 0, "a", 3000, 1);
  fx.reg("T", 0, "b", 5000, 2);
  fx.reg("T", 1, "c", 4096, 3);

  auto r = fx.run([&](auto cb) { t.open(cb); });
  CHECK(r.status == Status::ok);

  r = fx.run([&](auto cb) { t.publish(1, cb); });
  CHECK(r.status == Status::ok);
  CHECK(r.version == VersionId{1});
  CHECK(t.is_published());
  CHECK(t.current_version() == VersionId{1});
  auto lm = fx.srv.listing("m");
  REQUIRE(lm.count(1));
  CHECK(lm[1].count("T"));

  r = fx.run([&](auto cb) { t.list(cb); });
  CHECK(r.status == Status::ok);
  REQUIRE(r.listing.count(1));
  CHECK(r.listing[1].count("T"));

  r = fx.run([&](auto cb) { t.unpublish(cb); });
  CHECK(r.status == Status::ok);
  CHECK_FALSE(t.is_published());
  CHECK(t.current_version() == VersionId{1});  // bytes still held locally
  CHECK(fx.srv.listing("m").empty());

  r = fx.run([&](auto cb) { t.close(cb); });
  CHECK(r.status == Status::ok);
  // The close notice is one-way; give the queued delivery a chance to land.
  REQUIRE(fx.pump([&] { return !fx.srv.replica_view("m", "T").has_value(); }));

  // Post-close operations are rejected.
  r = fx.run([&](auto cb) { t.list(cb); });
  CHECK(r.status == Status::closed);
}

TEST_CASE("replicate pulls bytes that verify against the manifest") {
  ClusterFix fx;
  ClientCore& t = fx.make("T", 2);
  fx.reg("T", 0, "big", 3u << 20, 7);
  fx.reg("T", 0, "t1", 1000, 8);
  fx.reg("T", 0, "t2", 2000, 9);
  fx.reg("T", 1, "u1", 4096, 10);
  REQUIRE(fx.run([&](auto cb) { t.publish(1, cb); }).status == Status::ok);

  ClientCore& w = fx.make("R", 2);
  fx.reg("R", 0, "big", 3u << 20, 100);
  fx.reg("R", 0, "t1", 1000, 100);
  fx.reg("R", 0, "t2", 2000, 100);
  fx.reg("R", 1, "u1", 4096, 100);

  auto r = fx.run([&](auto cb) { w.replicate(VersionSpec::latest(), cb); });
  CHECK(r.status == Status::ok);
  CHECK(r.version == VersionId{1});
  CHECK(w.is_published());
  CHECK(w.current_version() == VersionId{1});

  CHECK(fx.same_bytes("T", "R", 0, "big"));
  CHECK(fx.same_bytes("T", "R", 0, "t1"));
  CHECK(fx.same_bytes("T", "R", 0, "t2"));
  CHECK(fx.same_bytes("T", "R", 1, "u1"));

  // shard0: one big item + one packed group; shard1: one packed group.
  CHECK(w.stats().items_verified == 3);
  CHECK(w.stats().bytes_pulled == (3u << 20) + 1000 + 2000 + 4096);
  CHECK(w.stats().checksum_failures == 0);

  // Completion notices are one-way; wait for the server to settle.
  REQUIRE(fx.pump([&] {
    auto v = fx.srv.replica_view("m", "R");
    return v && v->lifecycle == "published";
  }));
  auto view = fx.srv.replica_view("m", "R");
  REQUIRE(view);
  CHECK(view->version == VersionId{1});
}

TEST_CASE("update reports no change, then pulls a newer version") {
  ClusterFix fx;
  ClientCore& t = fx.make("T", 1);
  fx.reg("T", 0, "w", 200000, 1);
  REQUIRE(fx.run([&](auto cb) { t.publish(1, cb); }).status == Status::ok);

  ClientCore& w = fx.make("R", 1);
  fx.reg("R", 0, "w", 200000, 50);
  REQUIRE(fx.run([&](auto cb) { w.replicate(VersionSpec::latest(), cb); })
              .status == Status::ok);

  auto r = fx.run([&](auto cb) { w.update(VersionSpec::latest(), cb); });
  CHECK(r.status == Status::ok);
  CHECK_FALSE(r.changed);
  CHECK(r.version == VersionId{1});

  // New trainer version: unpublish, mutate, publish v2.
  REQUIRE(fx.run([&](auto cb) { t.unpublish(cb); }).status == Status::ok);
  fx.fill("T", 0, "w", 2);
  REQUIRE(fx.run([&](auto cb) { t.publish(2, cb); }).status == Status::ok);

  r = fx.run([&](auto cb) { w.update(VersionSpec::latest(), cb); });
  CHECK(r.status == Status::ok);
  CHECK(r.changed);
  CHECK(r.version == VersionId{2});
  CHECK(w.current_version() == VersionId{2});
  CHECK(fx.same_bytes("T", "R", 0, "w"));
}

TEST_CASE("unpublish waits for an in-flight reader to finish") {
  ClusterFix fx;
  ClientCore& t = fx.make("T", 1);
  fx.reg("T", 0, "w", 64 * 1024, 3);
  REQUIRE(fx.run([&](auto cb) { t.publish(1, cb); }).status == Status::ok);

  // Tiny pull chunks so the reader's fill spans many executor events.
  ClientCore& w = fx.make("R", 1, [](ClientConfig& c) { c.chunk_bytes = 1024; });
  fx.reg("R", 0, "w", 64 * 1024, 90);

  int seq = 0, repl_at = -1, unpub_at = -1;
  Status repl_st = Status::ok, unpub_st = Status::ok;
  w.replicate(VersionSpec::latest(), [&](OpResult r) {
    repl_st = r.status;
    repl_at = seq++;
  });
  // Issue the unpublish once the reader is actually drawing from T.
  REQUIRE(fx.pump([&] {
    auto v = fx.srv.replica_view("m", "T");
    return v && v->serving > 0;
  }));
  t.unpublish([&](OpResult r) {
    unpub_st = r.status;
    unpub_at = seq++;
  });
  REQUIRE(fx.pump([&] { return repl_at >= 0 && unpub_at >= 0; }));

  CHECK(repl_st == Status::ok);
  CHECK(unpub_st == Status::ok);
  CHECK(repl_at < unpub_at);  // the reader finished before the ack
  CHECK(fx.same_bytes("T", "R", 0, "w"));

  // The server saw the unpublish while the reader was still attached.
  bool drained_with_reader = false;
  for (auto& ev : fx.log.events()) {
    if (ev.kind != "unpublish_start") continue;
    for (auto& [k, v] : ev.fields)
      if (k == "serving" && v != "0") drained_with_reader = true;
  }
  CHECK(drained_with_reader);
}

TEST_CASE("retention parks the only copy and a new replica releases it") {
  ClusterFix fx;
  ClientCore& t = fx.make("T", 1);
  RetentionRule rule;
  rule.lags = {0};
  t.set_retention(rule);
  fx.reg("T", 0, "w", 300000, 4);
  fx.reg("T", 0, "x", 1234, 5);
  REQUIRE(fx.run([&](auto cb) { t.publish(1, cb); }).status == Status::ok);

  auto r = fx.run([&](auto cb) { t.unpublish(cb); });
  CHECK(r.status == Status::ok);
  CHECK(t.stats().bytes_copied_local == 300000 + 1234);

  // The parked copy is a replica of its own, served from T's endpoint.
  auto off = fx.srv.replica_view("m", "T+offload@1");
  REQUIRE(off);
  CHECK(off->lifecycle == "published");
  auto lane =
      fx.nodes.at("T")->serves.find(ServeRegistry::key("m", "T+offload@1", 0));
  CHECK(lane != nullptr);

  // A fresh replica can still materialize v1 from the parked copy.
  ClientCore& w = fx.make("R", 1);
  fx.reg("R", 0, "w", 300000, 80);
  fx.reg("R", 0, "x", 1234, 81);
  r = fx.run([&](auto cb) { w.replicate(VersionSpec::latest(), cb); });
  CHECK(r.status == Status::ok);
  CHECK(r.version == VersionId{1});
  CHECK(fx.same_bytes("T", "R", 0, "w"));
  CHECK(fx.same_bytes("T", "R", 0, "x"));

  // A durable non-spot copy exists again: the parked buffer is released.
  REQUIRE(fx.pump([&] {
    return !fx.srv.replica_view("m", "T+offload@1").has_value();
  }));
  REQUIRE(fx.pump([&] {
    return fx.nodes.at("T")->serves.find(
               ServeRegistry::key("m", "T+offload@1", 0)) == nullptr;
  }));
}

TEST_CASE("a silent source is reported and the pull moves to a sibling") {
  ClusterFix fx;
  ClientCore& t1 = fx.make("T1", 1);
  fx.reg("T1", 0, "w", 150000, 6);
  REQUIRE(fx.run([&](auto cb) { t1.publish(1, cb); }).status == Status::ok);

  ClientCore& t2 = fx.make("T2", 1);
  fx.reg("T2", 0, "w", 150000, 60);
  REQUIRE(fx.run([&](auto cb) { t2.replicate(VersionSpec::latest(), cb); })
              .status == Status::ok);

  // T2 goes dark on the data plane. Least-recently-assigned ordering makes
  // T2 the first pick for the next reader (T1 already served T2's fill).
  fx.net.set_data_silent("ep:T2", true);

  ClientCore& w = fx.make("R", 1);
  fx.reg("R", 0, "w", 150000, 70);
  auto r = fx.run([&](auto cb) { w.replicate(VersionSpec::latest(), cb); });
  CHECK(r.status == Status::ok);
  CHECK(w.stats().failure_reports >= 1);
  CHECK(fx.same_bytes("T1", "R", 0, "w"));

  // The timeout report condemned T2; the copy list no longer offers it.
  auto lm = fx.srv.listing("m");
  REQUIRE(lm.count(1));
  CHECK_FALSE(lm[1].count("T2"));
  CHECK(lm[1].count("T1"));
}

TEST_CASE("corrupt source bytes: quiet retry, then a report and a re-pick") {
  ClusterFix fx;
  ClientCore& t1 = fx.make("T1", 1);
  fx.reg("T1", 0, "big", 3u << 20, 11);
  fx.reg("T1", 0, "tiny", 5000, 12);
  REQUIRE(fx.run([&](auto cb) { t1.publish(1, cb); }).status == Status::ok);

  ClientCore& t2 = fx.make("T2", 1);
  fx.reg("T2", 0, "big", 3u << 20, 20);
  fx.reg("T2", 0, "tiny", 5000, 21);
  REQUIRE(fx.run([&](auto cb) { t2.replicate(VersionSpec::latest(), cb); })
              .status == Status::ok);

  // Corrupt T2's copy in place. Least-recently-assigned ordering makes T2
  // the first pick for the next reader (T1 served T2's fill already).
  fx.nodes.at("T2")->bufs.at({0, "big"})[17] ^= std::byte{0xff};

  ClientCore& w = fx.make("R", 1);
  fx.reg("R", 0, "big", 3u << 20, 30);
  fx.reg("R", 0, "tiny", 5000, 31);
  auto r = fx.run([&](auto cb) { w.replicate(VersionSpec::latest(), cb); });
  CHECK(r.status == Status::ok);
  CHECK(w.stats().checksum_failures == 2);  // first attempt + quiet retry
  CHECK(w.stats().failure_reports == 1);
  CHECK(fx.same_bytes("T1", "R", 0, "big"));
  CHECK(fx.same_bytes("T1", "R", 0, "tiny"));

  // Corruption does not condemn the source replica.
  auto lm = fx.srv.listing("m");
  REQUIRE(lm.count(1));
  CHECK(lm[1].count("T2"));
}

TEST_CASE("server loss resets to unpublished but keeps local state") {
  ClusterFix fx;
  ServerCore srvB("B", ServerConfig{}, &fx.exec, &fx.log, fx.net.sender());
  fx.net.register_server("B", &srvB, &fx.exec);
  srvB.start();

  auto two = [](ClientConfig& c) { c.servers = {"A", "B"}; };
  ClientCore& t = fx.make("T", 1, two);
  fx.reg("T", 0, "w", 100000, 40);
  REQUIRE(fx.run([&](auto cb) { t.publish(1, cb); }).status == Status::ok);

  ClientCore& w = fx.make("R", 1, two);
  fx.reg("R", 0, "w", 100000, 41);
  REQUIRE(fx.run([&](auto cb) { w.replicate(VersionSpec::latest(), cb); })
              .status == Status::ok);
  std::uint64_t pulled_before = w.stats().bytes_pulled;

  // An op is in flight when the primary dies: it fails, it is not retried.
  Status wait_st = Status::ok;
  bool wait_done = false;
  w.wait_for([](const ListingMap& lm) { return lm.count(2) > 0; },
             std::chrono::seconds(60), [&](OpResult r) {
               wait_st = r.status;
               wait_done = true;
             });
  fx.pump([&] { return fx.srv.listing("m").count(1) > 0; });

  fx.net.crash_server("A");
  REQUIRE(fx.pump([&] { return wait_done; }));
  CHECK(wait_st == Status::server_unavailable);

  REQUIRE(fx.pump([&] { return t.stats().failovers >= 1; }));
  REQUIRE(fx.pump([&] { return w.stats().failovers >= 1; }));
  CHECK_FALSE(t.is_published());
  CHECK_FALSE(w.is_published());
  CHECK(t.current_version() == VersionId{1});  // bytes survive
  CHECK(w.current_version() == VersionId{1});
  CHECK(srvB.listing("m").empty());  // nothing auto-republished

  // Explicit re-publish lands on the backup; the holder re-registers its
  // copy without moving a byte.
  REQUIRE(fx.run([&](auto cb) { t.publish(1, cb); }).status == Status::ok);
  auto lm = srvB.listing("m");
  REQUIRE(lm.count(1));
  CHECK(lm[1].count("T"));

  auto r = fx.run([&](auto cb) { w.replicate(VersionSpec::latest(), cb); });
  CHECK(r.status == Status::ok);
  CHECK(w.is_published());
  CHECK(w.stats().bytes_pulled == pulled_before);  // resumed, no re-transfer
  REQUIRE(fx.pump([&] {
    auto cur = srvB.listing("m");
    return cur.count(1) && cur[1].count("R");
  }));
}

TEST_CASE("wait_for polls until the predicate holds or times out") {
  ClusterFix fx;
  ClientCore& t = fx.make("T", 1);
  fx.reg("T", 0, "w", 50000, 42);
  ClientCore& w = fx.make("R", 1);
  fx.reg("R", 0, "w", 50000, 43);

  fx.exec.schedule(std::chrono::milliseconds(500),
                   [&] { t.publish(1, [](OpResult) {}); });

  auto r = fx.run([&](auto cb) {
    w.wait_for([](const ListingMap& lm) { return lm.count(1) > 0; },
               std::chrono::seconds(30), cb);
  });
  CHECK(r.status == Status::ok);
  REQUIRE(r.listing.count(1));
  CHECK(fx.exec.now() >= std::chrono::milliseconds(500));

  r = fx.run([&](auto cb) {
    w.wait_for([](const ListingMap& lm) { return lm.count(99) > 0; },
               std::chrono::milliseconds(300), cb);
  });
  CHECK(r.status == Status::timeout);
}

TEST_CASE("cross-link update fills a host seed, then consumes it locally") {
  ClusterFix fx;
  ClientCore& t = fx.make("T", 2, [](ClientConfig& c) { c.datacenter = "dc1"; });
  fx.reg("T", 0, "w", 200000, 44);
  fx.reg("T", 1, "x", 100000, 45);
  REQUIRE(fx.run([&](auto cb) { t.publish(1, cb); }).status == Status::ok);

  ClientCore& f = fx.make("F", 2, [](ClientConfig& c) {
    c.datacenter = "dc2";
    c.offload_seed = true;
  });
  fx.reg("F", 0, "w", 200000, 46);
  fx.reg("F", 1, "x", 100000, 47);

  // First poll: the version is masked for dc2, a background fill starts.
  auto r = fx.run([&](auto cb) { f.update(VersionSpec::latest(), cb); });
  CHECK(r.status == Status::ok);
  CHECK_FALSE(r.changed);
  CHECK_FALSE(r.version.has_value());

  REQUIRE(fx.pump([&] {
    auto v = fx.srv.replica_view("m", "F+seed@1");
    return v && v->lifecycle == "published";
  }));
  CHECK(f.stats().bytes_pulled_cross_dc == 200000 + 100000);

  // Second poll: the change lands by consuming the local seed buffer.
  r = fx.run([&](auto cb) { f.update(VersionSpec::latest(), cb); });
  CHECK(r.status == Status::ok);
  CHECK(r.changed);
  CHECK(r.version == VersionId{1});
  CHECK(f.current_version() == VersionId{1});
  CHECK(fx.same_bytes("T", "F", 0, "w"));
  CHECK(fx.same_bytes("T", "F", 1, "x"));
  CHECK(f.stats().bytes_copied_local == 200000 + 100000);
  CHECK(f.stats().bytes_pulled_cross_dc == 200000 + 100000);  // only the fill

  // Consumed and drained: the buffer is handed back and the lane vanishes.
  REQUIRE(fx.pump(
      [&] { return !fx.srv.replica_view("m", "F+seed@1").has_value(); }));
  REQUIRE(fx.pump([&] {
    return fx.nodes.at("F")->serves.find(
               ServeRegistry::key("m", "F+seed@1", 0)) == nullptr;
  }));
}

TEST_CASE("one operation at a time; registration is fenced") {
  ClusterFix fx;
  ClientCore& t = fx.make("T", 1);
  fx.reg("T", 0, "w", 10000, 48);

  // Second op while the first is in flight is rejected outright.
  Status first = Status::ok, second = Status::ok;
  int done = 0;
  t.publish(1, [&](OpResult r) {
    first = r.status;
    done++;
  });
  t.publish(2, [&](OpResult r) {
    second = r.status;
    done++;
  });
  REQUIRE(fx.pump([&] { return done == 2; }));
  CHECK(first == Status::ok);
  CHECK(second == Status::invalid_state);

  CHECK(t.register_tensor(0, "late", {}) == Status::invalid_argument);
  auto& buf = fx.nodes.at("T")->bufs[{0, "late"}];
  buf.resize(64);
  CHECK(t.register_tensor(0, "late", {buf.data(), buf.size()}) ==
        Status::invalid_state);  // already published
  CHECK(t.unregister() == Status::invalid_state);

  // Close while published runs the unpublish drain first.
  auto r = fx.run([&](auto cb) { t.close(cb); });
  CHECK(r.status == Status::ok);
  CHECK(fx.srv.listing("m").empty());
  REQUIRE(fx.pump([&] { return !fx.srv.replica_view("m", "T").has_value(); }));
}

TEST_CASE("open fails cleanly when no server is reachable") {
  ClusterFix fx;
  ClientCore& t = fx.make("T", 1, [](ClientConfig& c) { c.servers = {"Z"}; });
  fx.reg("T", 0, "w", 1000, 49);
  auto r = fx.run([&](auto cb) { t.open(cb); });
  CHECK(r.status == Status::server_unavailable);

  ClientCore& u = fx.make("U", 1, [](ClientConfig& c) { c.servers = {}; });
  fx.reg("U", 0, "w", 1000, 50);
  r = fx.run([&](auto cb) { u.open(cb); });
  CHECK(r.status == Status::server_unavailable);
}

TEST_SUITE_END();
