#include "refstore/server_core.hpp"

#include <doctest.h>

#include <string>
#include <vector>

#include "refstore/manifest.hpp"

using namespace refstore;

namespace {

std::string test_manifest(VersionId version, std::uint32_t shard) {
  std::vector<EntryDesc> descs;
  for (int i = 0; i < 3; ++i) {
    EntryDesc d;
    d.name = "t" + std::to_string(shard) + "." + std::to_string(i);
    d.length = 4096 * (i + 1);
    d.digest = modeled_entry_digest(d.name, version, d.length);
    descs.push_back(d);
  }
  auto m = assemble_manifest(descs, ManifestLimits{});
  REQUIRE(m);
  seal_groups_modeled(*m);
  return m->encode();
}

struct Reply {
  ServerCore::ConnId conn = 0;
  ResponseMsg msg;
};
struct Direct {
  ServerCore::ConnId conn = 0;
  DirectiveMsg msg;
};

struct ServerFix {
  SimExecutor exec;
  NullTrace sink;
  std::vector<Reply> replies;
  std::vector<Direct> directives;
  ServerCore core;
  std::uint64_t next_req = 1;

  ServerFix()
      : core("srv", ServerConfig{}, &exec, &sink,
             [this](ServerCore::ConnId c, const Frame& f) { deliver(c, f); }) {
    core.start();
  }
  ~ServerFix() { core.stop(); }

  void deliver(ServerCore::ConnId c, const Frame& f) {
    if (f.type == static_cast<std::uint8_t>(MsgType::response)) {
      auto m = ResponseMsg::decode(f.body);
      REQUIRE(m);
      replies.push_back({c, *m});
    } else if (f.type == static_cast<std::uint8_t>(MsgType::directive)) {
      auto m = DirectiveMsg::decode(f.body);
      REQUIRE(m);
      directives.push_back({c, *m});
    } else {
      FAIL("unexpected frame type ", int(f.type));
    }
  }

  const ResponseMsg* reply(std::uint64_t req_id) const {
    for (auto& r : replies)
      if (r.msg.req_id == req_id) return &r.msg;
    return nullptr;
  }
  // The offload_first notification and the final answer share a req_id; this
  // returns the terminal one.
  const ResponseMsg* final_reply(std::uint64_t req_id) const {
    const ResponseMsg* out = nullptr;
    for (auto& r : replies)
      if (r.msg.req_id == req_id && r.msg.kind == ResponseKind::final)
        out = &r.msg;
    return out;
  }

  std::uint64_t open(ServerCore::ConnId conn, const std::string& model,
                     const std::string& rep, std::uint32_t n,
                     std::uint32_t idx, const std::string& dc = "dc0",
                     bool spot = false, std::set<std::uint64_t> lags = {},
                     bool offload_seed = false) {
    OpenReq o;
    o.req_id = next_req++;
    o.coord = {model, rep, n, idx};
    o.loc = {dc, spot, "ep:" + rep + ":" + std::to_string(idx)};
    o.retain.lags = std::move(lags);
    o.offload_seed = offload_seed;
    core.on_frame(conn, o.to_frame());
    auto* r = reply(o.req_id);
    REQUIRE(r);
    REQUIRE(r->status == Status::ok);
    REQUIRE(r->token.has_value());
    return *r->token;
  }

  std::uint64_t publish(ServerCore::ConnId conn, std::uint64_t token,
                        std::uint64_t op, VersionId v,
                        const std::string& manifest) {
    PublishReq p;
    p.req_id = next_req++;
    p.token = token;
    p.op_seq = op;
    p.version = v;
    p.manifest = manifest;
    core.on_frame(conn, p.to_frame());
    return p.req_id;
  }

  std::uint64_t unpublish(ServerCore::ConnId conn, std::uint64_t token,
                          std::uint64_t op) {
    UnpublishReq u;
    u.req_id = next_req++;
    u.token = token;
    u.op_seq = op;
    core.on_frame(conn, u.to_frame());
    return u.req_id;
  }

  std::uint64_t replicate(ServerCore::ConnId conn, std::uint64_t token,
                          std::uint64_t op, VersionSpec spec) {
    ReplicateReq q;
    q.req_id = next_req++;
    q.token = token;
    q.op_seq = op;
    q.spec = spec;
    core.on_frame(conn, q.to_frame());
    return q.req_id;
  }

  std::uint64_t update(ServerCore::ConnId conn, std::uint64_t token,
                       std::uint64_t op, VersionSpec spec,
                       std::optional<VersionId> current) {
    UpdateReq q;
    q.req_id = next_req++;
    q.token = token;
    q.op_seq = op;
    q.spec = spec;
    q.current = current;
    core.on_frame(conn, q.to_frame());
    return q.req_id;
  }

  void complete(ServerCore::ConnId conn, std::uint64_t token, std::uint64_t op,
                Status outcome = Status::ok,
                TransferRole role = TransferRole::primary) {
    CompleteMsg c;
    c.token = token;
    c.op_seq = op;
    c.role = role;
    c.outcome = outcome;
    core.on_frame(conn, c.to_frame());
  }

  void progress(ServerCore::ConnId conn, std::uint64_t token, std::uint64_t op,
                std::uint64_t items,
                TransferRole role = TransferRole::primary) {
    ProgressMsg p;
    p.token = token;
    p.op_seq = op;
    p.role = role;
    p.progress = items;
    core.on_frame(conn, p.to_frame());
  }

  std::uint64_t heartbeat(ServerCore::ConnId conn, std::uint64_t token) {
    HeartbeatMsg h;
    h.req_id = next_req++;
    h.token = token;
    core.on_frame(conn, h.to_frame());
    return h.req_id;
  }

  std::uint64_t report(ServerCore::ConnId conn, std::uint64_t token,
                       std::uint64_t op, const std::string& failed,
                       FailReason reason,
                       TransferRole role = TransferRole::primary) {
    FailureReportMsg f;
    f.req_id = next_req++;
    f.token = token;
    f.op_seq = op;
    f.role = role;
    f.failed_replica = failed;
    f.reason = reason;
    core.on_frame(conn, f.to_frame());
    return f.req_id;
  }

  std::uint64_t offload_confirm(ServerCore::ConnId conn, std::uint64_t token,
                                std::uint64_t op, VersionId v, bool ok,
                                const std::string& endpoint) {
    OffloadConfirmMsg m;
    m.req_id = next_req++;
    m.token = token;
    m.op_seq = op;
    m.version = v;
    m.ok = ok;
    m.endpoint = endpoint;
    core.on_frame(conn, m.to_frame());
    return m.req_id;
  }

  void advance(Duration d) { exec.run_until(exec.now() + d); }
};

}  // namespace

TEST_SUITE_BEGIN("server_core");

TEST_CASE("publish acks are withheld until the whole group arrives") {
  ServerFix fx;
  auto t0 = fx.open(1, "m", "trainer", 2, 0);
  auto t1 = fx.open(2, "m", "trainer", 2, 1);

  auto rq0 = fx.publish(1, t0, 1, 1, test_manifest(1, 0));
  CHECK(fx.reply(rq0) == nullptr);  // half the group: no answer yet

  auto rq1 = fx.publish(2, t1, 1, 1, test_manifest(1, 1));
  auto* a = fx.reply(rq0);
  auto* b = fx.reply(rq1);
  REQUIRE(a);
  REQUIRE(b);
  CHECK(a->status == Status::ok);
  CHECK(b->status == Status::ok);
  CHECK(a->version == 1);
  CHECK(b->version == 1);

  auto listing = fx.core.listing("m");
  REQUIRE(listing.count(1) == 1);
  CHECK(listing[1].count("trainer") == 1);

  auto view = fx.core.replica_view("m", "trainer");
  REQUIRE(view);
  CHECK(view->lifecycle == "published");
  CHECK(view->visible);
}

TEST_CASE("mutability: double publish, regression, drain-free unpublish") {
  ServerFix fx;
  auto tok = fx.open(1, "m", "trainer", 1, 0);

  CHECK(fx.reply(fx.publish(1, tok, 1, 5, test_manifest(5, 0)))->status ==
        Status::ok);
  // Publishing on top of a published replica violates the contract.
  CHECK(fx.reply(fx.publish(1, tok, 2, 6, test_manifest(6, 0)))->status ==
        Status::mutability_violation);

  CHECK(fx.reply(fx.unpublish(1, tok, 3))->status == Status::ok);
  CHECK(fx.core.listing("m").empty());

  // Re-publishing an older or equal version after unpublish is a regression.
  CHECK(fx.reply(fx.publish(1, tok, 4, 5, test_manifest(5, 0)))->status ==
        Status::version_regression);
  CHECK(fx.reply(fx.publish(1, tok, 5, 4, test_manifest(4, 0)))->status ==
        Status::version_regression);
  CHECK(fx.reply(fx.publish(1, tok, 6, 7, test_manifest(7, 0)))->status ==
        Status::ok);
}

TEST_CASE("same version number must republish identical manifests") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "a", 1, 0);
  auto tb = fx.open(2, "m", "b", 1, 0);
  std::string man = test_manifest(1, 0);

  CHECK(fx.reply(fx.publish(1, ta, 1, 1, man))->status == Status::ok);
  // Identical bytes: fine.
  CHECK(fx.reply(fx.publish(2, tb, 1, 1, man))->status == Status::ok);

  auto tc = fx.open(3, "m", "c", 1, 0);
  CHECK(fx.reply(fx.publish(3, tc, 1, 1, test_manifest(2, 0)))->status ==
        Status::manifest_conflict);
}

TEST_CASE("replicate: assignment, progress, completion, serving counts") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "src", 1, 0);
  fx.publish(1, ta, 1, 3, test_manifest(3, 0));

  auto tb = fx.open(2, "m", "dst", 1, 0);
  auto rq = fx.replicate(2, tb, 1, VersionSpec::latest());
  auto* r = fx.reply(rq);
  REQUIRE(r);
  REQUIRE(r->status == Status::ok);
  CHECK(r->version == 3);
  REQUIRE(r->assignment.has_value());
  CHECK(r->assignment->source_replica == "src");
  CHECK(r->assignment->source_endpoint == "ep:src:0");
  CHECK(r->assignment->source_complete);
  CHECK_FALSE(r->assignment->cross_dc);
  CHECK_FALSE(r->assignment->manifest.empty());

  auto sv = fx.core.replica_view("m", "src");
  CHECK(sv->serving == 1);
  auto dv = fx.core.replica_view("m", "dst");
  CHECK(dv->lifecycle == "replicating");

  fx.progress(2, tb, 1, 1);
  dv = fx.core.replica_view("m", "dst");
  CHECK(dv->min_progress == 1);

  fx.complete(2, tb, 1);
  dv = fx.core.replica_view("m", "dst");
  CHECK(dv->lifecycle == "published");
  CHECK(dv->visible);
  sv = fx.core.replica_view("m", "src");
  CHECK(sv->serving == 0);

  auto listing = fx.core.listing("m");
  CHECK(listing[3].size() == 2);
}

TEST_CASE("replicate parks until a version exists, then wakes in order") {
  ServerFix fx;
  auto tb = fx.open(2, "m", "dst1", 1, 0);
  auto tc = fx.open(3, "m", "dst2", 1, 0);
  auto rq1 = fx.replicate(2, tb, 1, VersionSpec::latest());
  auto rq2 = fx.replicate(3, tc, 1, VersionSpec::latest());
  CHECK(fx.reply(rq1) == nullptr);
  CHECK(fx.reply(rq2) == nullptr);

  auto ta = fx.open(1, "m", "src", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));

  auto* r1 = fx.reply(rq1);
  auto* r2 = fx.reply(rq2);
  REQUIRE(r1);
  REQUIRE(r2);
  CHECK(r1->status == Status::ok);
  CHECK(r2->status == Status::ok);
  // dst1 parked first, so it resolves first and pulls from the publisher;
  // with pipelining on, dst2 chains off dst1's in-flight copy.
  CHECK(r1->assignment->source_replica == "src");
  CHECK(r2->assignment->source_replica == "dst1");
  CHECK_FALSE(r2->assignment->source_complete);
}

TEST_CASE("group replicate answers land together and match") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "src", 2, 0);
  auto ta1 = fx.open(1, "m", "src", 2, 1);
  fx.publish(1, ta, 1, 2, test_manifest(2, 0));
  fx.publish(1, ta1, 1, 2, test_manifest(2, 1));

  auto tb0 = fx.open(2, "m", "dst", 2, 0);
  auto tb1 = fx.open(3, "m", "dst", 2, 1);
  auto rq0 = fx.replicate(2, tb0, 9, VersionSpec::latest());
  CHECK(fx.reply(rq0) == nullptr);  // group not assembled yet

  auto rq1 = fx.replicate(3, tb1, 9, VersionSpec::latest());
  auto* r0 = fx.reply(rq0);
  auto* r1 = fx.reply(rq1);
  REQUIRE(r0);
  REQUIRE(r1);
  CHECK(r0->version == r1->version);
  CHECK(r0->assignment->source_replica == r1->assignment->source_replica);
  // Per-shard endpoints differ: each shard pulls its own slice.
  CHECK(r0->assignment->source_endpoint == "ep:src:0");
  CHECK(r1->assignment->source_endpoint == "ep:src:1");
}

TEST_CASE("unpublish drains active readers before acking") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "src", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));

  auto tb = fx.open(2, "m", "dst", 1, 0);
  fx.replicate(2, tb, 1, VersionSpec::latest());

  auto rq = fx.unpublish(1, ta, 2);
  CHECK(fx.reply(rq) == nullptr);  // a reader is mid-pull: ack withheld
  CHECK_FALSE(fx.core.replica_view("m", "src")->visible);
  // While the only copy drains, a fresh replicate cannot start: it parks
  // until the in-flight reader turns into a visible copy.
  auto tc = fx.open(3, "m", "d2", 1, 0);
  auto rq2 = fx.replicate(3, tc, 1, VersionSpec::latest());
  CHECK(fx.reply(rq2) == nullptr);

  fx.complete(2, tb, 1);
  auto* r = fx.reply(rq);
  REQUIRE(r);
  CHECK(r->status == Status::ok);
  CHECK(fx.core.replica_view("m", "src")->lifecycle == "registered");
  // The parked replicate woke up against the freshly completed copy.
  auto* r2 = fx.reply(rq2);
  REQUIRE(r2);
  CHECK(r2->assignment->source_replica == "dst");
}

TEST_CASE("half-assembled groups abort on timeout; stragglers see the abort") {
  ServerFix fx;
  auto t0 = fx.open(1, "m", "trainer", 2, 0);
  auto t1 = fx.open(2, "m", "trainer", 2, 1);
  fx.heartbeat(1, t0);

  auto rq0 = fx.publish(1, t0, 7, 1, test_manifest(1, 0));
  CHECK(fx.reply(rq0) == nullptr);

  // Keep leases alive while the straggler clock runs.
  for (int i = 0; i < 70; ++i) {
    fx.advance(std::chrono::seconds(1));
    fx.heartbeat(1, t0);
    fx.heartbeat(2, t1);
  }
  auto* r0 = fx.reply(rq0);
  REQUIRE(r0);
  CHECK(r0->status == Status::group_aborted);

  // The late member of the same group op gets the same verdict.
  auto rq1 = fx.publish(2, t1, 7, 1, test_manifest(1, 1));
  CHECK(fx.reply(rq1)->status == Status::group_aborted);

  // A fresh op afterwards works.
  auto a = fx.publish(1, t0, 8, 1, test_manifest(1, 0));
  auto b = fx.publish(2, t1, 8, 1, test_manifest(1, 1));
  CHECK(fx.reply(a)->status == Status::ok);
  CHECK(fx.reply(b)->status == Status::ok);
}

TEST_CASE("retention offload: last durable copy is parked then released") {
  ServerFix fx;
  // Observer whose retention rule keeps the newest and one version back.
  fx.open(9, "m", "watcher", 1, 0, "dc0", false, {0, 1});

  auto ta = fx.open(1, "m", "trainer", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));

  // v1 is retained (lag 0 against max=1) and nothing else holds it.
  auto rq = fx.unpublish(1, ta, 2);
  REQUIRE(fx.replies.size() > 0);
  auto* note = fx.reply(rq);
  REQUIRE(note);
  CHECK(note->kind == ResponseKind::offload_first);
  CHECK(note->version == 1);
  CHECK(fx.final_reply(rq) == nullptr);

  // The client copies v1 to host memory and confirms.
  fx.offload_confirm(1, ta, 2, 1, true, "host:trainer:0");
  auto* fin = fx.final_reply(rq);
  REQUIRE(fin);
  CHECK(fin->status == Status::ok);

  auto ov = fx.core.replica_view("m", "trainer+offload@1");
  REQUIRE(ov);
  CHECK(ov->kind == "offload");
  CHECK(ov->version == 1);
  CHECK(ov->visible);

  // Next cycle: v2 goes up; v1 (lag 1) stays retained, offload survives.
  fx.publish(1, ta, 3, 2, test_manifest(2, 0));
  CHECK(fx.core.replica_view("m", "trainer+offload@1").has_value());

  // A reader replicates v1 out of the offload...
  auto tb = fx.open(2, "m", "reader", 1, 0);
  auto rrq = fx.replicate(2, tb, 1, VersionSpec::absolute(1));
  auto* rr = fx.reply(rrq);
  REQUIRE(rr);
  CHECK(rr->assignment->source_replica == "trainer+offload@1");
  CHECK(rr->assignment->source_endpoint == "host:trainer:0");
  fx.complete(2, tb, 1);

  // ...after which a durable worker copy exists and the buffer is released.
  CHECK_FALSE(fx.core.replica_view("m", "trainer+offload@1").has_value());
  bool released = false;
  for (auto& d : fx.directives)
    if (d.msg.kind == DirectiveKind::offload_release &&
        d.msg.purpose == OffloadPurpose::retention && d.msg.version == 1)
      released = true;
  CHECK(released);
}

TEST_CASE("two retained versions can be parked in offloads concurrently") {
  ServerFix fx;
  // Keep the newest and one back: two versions retained at any time.
  fx.open(9, "m", "watcher", 1, 0, "dc0", false, {0, 1});
  auto ta = fx.open(1, "m", "trainer", 1, 0);

  fx.publish(1, ta, 1, 1, test_manifest(1, 0));
  auto rq1 = fx.unpublish(1, ta, 2);
  fx.offload_confirm(1, ta, 2, 1, true, "host:trainer:0");
  REQUIRE(fx.final_reply(rq1));

  fx.publish(1, ta, 3, 2, test_manifest(2, 0));
  auto rq2 = fx.unpublish(1, ta, 4);
  fx.offload_confirm(1, ta, 4, 2, true, "host:trainer:0");
  REQUIRE(fx.final_reply(rq2));

  // Both versions survive, each in its own buffer.
  CHECK(fx.core.replica_view("m", "trainer+offload@1").has_value());
  CHECK(fx.core.replica_view("m", "trainer+offload@2").has_value());
  auto listing = fx.core.listing("m");
  CHECK(listing.count(1) == 1);
  CHECK(listing.count(2) == 1);

  // v3 shifts the retained window to {3,2}: the v1 buffer is released, the
  // v2 buffer stays.
  fx.publish(1, ta, 5, 3, test_manifest(3, 0));
  CHECK_FALSE(fx.core.replica_view("m", "trainer+offload@1").has_value());
  CHECK(fx.core.replica_view("m", "trainer+offload@2").has_value());
  bool released_v1 = false;
  for (auto& d : fx.directives)
    if (d.msg.kind == DirectiveKind::offload_release && d.msg.version == 1 &&
        d.msg.purpose == OffloadPurpose::retention)
      released_v1 = true;
  CHECK(released_v1);
}

TEST_CASE("spot copies neither suppress nor satisfy retention offloads") {
  ServerFix fx;
  fx.open(9, "m", "watcher", 1, 0, "dc0", false, {0, 1});
  auto ta = fx.open(1, "m", "trainer", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));

  // A spot replica holds v1 too — but it can vanish any time, so the
  // unpublish still demands an offload.
  auto ts = fx.open(2, "m", "spotty", 1, 0, "dc0", /*spot=*/true);
  fx.replicate(2, ts, 1, VersionSpec::absolute(1));
  fx.complete(2, ts, 1);

  auto rq = fx.unpublish(1, ta, 2);
  auto* note = fx.reply(rq);
  REQUIRE(note);
  CHECK(note->kind == ResponseKind::offload_first);
  fx.offload_confirm(1, ta, 2, 1, true, "host:trainer:0");
  REQUIRE(fx.final_reply(rq));

  // The spot copy does not count as durable: the offload stays.
  CHECK(fx.core.replica_view("m", "trainer+offload@1").has_value());
}

TEST_CASE("offload allocation failure cancels the unpublish") {
  ServerFix fx;
  fx.open(9, "m", "watcher", 1, 0, "dc0", false, {0});
  auto ta = fx.open(1, "m", "trainer", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));

  auto rq = fx.unpublish(1, ta, 2);
  REQUIRE(fx.reply(rq));
  CHECK(fx.reply(rq)->kind == ResponseKind::offload_first);
  fx.offload_confirm(1, ta, 2, 1, false, "");
  auto* fin = fx.final_reply(rq);
  REQUIRE(fin);
  CHECK(fin->status == Status::offload_failed);

  // Nothing was given up: still published, still visible.
  auto view = fx.core.replica_view("m", "trainer");
  CHECK(view->lifecycle == "published");
  CHECK(view->visible);
  CHECK(fx.core.listing("m").count(1) == 1);
}

TEST_CASE("lease expiry fails the replica and cascades to readers") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "src", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));
  auto tb = fx.open(2, "m", "dst", 1, 0);
  fx.replicate(2, tb, 1, VersionSpec::latest());

  // dst heartbeats; src goes silent and its lease lapses.
  for (int i = 0; i < 7; ++i) {
    fx.advance(std::chrono::seconds(1));
    fx.heartbeat(2, tb);
  }
  // The dead record is reclaimed outright once its last handle lapses; its
  // state is soft and a surviving process would simply re-open.
  CHECK_FALSE(fx.core.replica_view("m", "src").has_value());
  CHECK(fx.core.listing("m").empty());

  // The reader discovers the dead source by pull timeout and reports it;
  // no replacement exists, so its replication is voided.
  auto rq = fx.report(2, tb, 1, "src", FailReason::timeout);
  CHECK(fx.reply(rq)->status == Status::version_unavailable);
  CHECK(fx.core.replica_view("m", "dst")->lifecycle == "registered");
  bool aborted = false;
  for (auto& d : fx.directives)
    if (d.conn == 2 && d.msg.kind == DirectiveKind::group_aborted &&
        d.msg.op_seq == 1)
      aborted = true;
  CHECK(aborted);
}

TEST_CASE("failure report with a healthy sibling reassigns the pull") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "s1", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));
  auto tb = fx.open(2, "m", "s2", 1, 0);
  fx.replicate(2, tb, 1, VersionSpec::latest());
  fx.complete(2, tb, 1);

  auto tc = fx.open(3, "m", "dst", 1, 0);
  auto rq = fx.replicate(3, tc, 1, VersionSpec::latest());
  std::string first = fx.reply(rq)->assignment->source_replica;

  // Timeout report on the assigned source: it is declared dead and the
  // transfer moves to the survivor.
  auto rp = fx.report(3, tc, 1, first, FailReason::timeout);
  auto* r = fx.reply(rp);
  REQUIRE(r);
  REQUIRE(r->status == Status::ok);
  REQUIRE(r->assignment.has_value());
  CHECK(r->assignment->source_replica != first);
  CHECK(fx.core.replica_view("m", first)->lifecycle == "failed");
  fx.complete(3, tc, 1);
  CHECK(fx.core.replica_view("m", "dst")->lifecycle == "published");
}

TEST_CASE("checksum report reassigns without declaring the source dead") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "src", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));
  auto tb = fx.open(2, "m", "dst", 1, 0);
  fx.replicate(2, tb, 1, VersionSpec::latest());

  auto rp = fx.report(2, tb, 1, "src", FailReason::checksum);
  auto* r = fx.reply(rp);
  REQUIRE(r);
  REQUIRE(r->status == Status::ok);
  // Sole candidate: the same source is handed back, still healthy.
  CHECK(r->assignment->source_replica == "src");
  CHECK(fx.core.replica_view("m", "src")->lifecycle == "published");
}

TEST_CASE("update: changed with drain, then no-change") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "trainer", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));

  auto tb = fx.open(2, "m", "roll", 1, 0);
  fx.replicate(2, tb, 1, VersionSpec::latest());
  fx.complete(2, tb, 1);

  // Trainer moves on: unpublish v1 (roll holds a copy, no offload) and
  // publish v2.
  fx.unpublish(1, ta, 2);
  fx.publish(1, ta, 3, 2, test_manifest(2, 0));

  auto rq = fx.update(2, tb, 2, VersionSpec::latest(), 1);
  auto* r = fx.reply(rq);
  REQUIRE(r);
  REQUIRE(r->status == Status::ok);
  CHECK(r->changed == true);
  CHECK(r->version == 2);
  CHECK(r->assignment->source_replica == "trainer");
  fx.complete(2, tb, 2);
  CHECK(fx.core.replica_view("m", "roll")->version == 2);

  auto rq2 = fx.update(2, tb, 3, VersionSpec::latest(), 2);
  auto* r2 = fx.reply(rq2);
  REQUIRE(r2);
  CHECK(r2->changed == false);
  CHECK_FALSE(r2->assignment.has_value());
}

TEST_CASE("cross-link update with host seeding: fill, skip, consume") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "trainer", 1, 0, "dc1");
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));

  // Far-side worker asks with host seeding enabled: no version change, but a
  // background fill starts against the cross-link source.
  auto tb = fx.open(2, "m", "far", 1, 0, "dc2", false, {}, true);
  auto rq = fx.update(2, tb, 1, VersionSpec::latest(), std::nullopt);
  auto* r = fx.reply(rq);
  REQUIRE(r);
  CHECK(r->changed == false);
  REQUIRE(r->seed.has_value());
  CHECK(r->seed->op_seq == 1);
  CHECK(r->seed->assignment.source_replica == "trainer");
  CHECK(r->seed->assignment.cross_dc);
  CHECK(r->seed->assignment.seeding);

  auto seedv = fx.core.replica_view("m", "far+seed@1");
  REQUIRE(seedv);
  CHECK(seedv->lifecycle == "replicating");
  CHECK(seedv->seeding);

  // While the fill runs, v1 is masked for dc2: a plain replicate parks.
  auto tc = fx.open(3, "m", "neighbor", 1, 0, "dc2");
  auto prq = fx.replicate(3, tc, 1, VersionSpec::latest());
  CHECK(fx.reply(prq) == nullptr);
  // ...but dc1 still sees it.
  auto td = fx.open(4, "m", "near", 1, 0, "dc1");
  auto nrq = fx.replicate(4, td, 1, VersionSpec::latest());
  CHECK(fx.reply(nrq) != nullptr);

  // Seed completes: dc2 unmasks, the parked neighbor wakes onto the seed.
  fx.progress(2, tb, 1, 3, TransferRole::seed);
  fx.complete(2, tb, 1, Status::ok, TransferRole::seed);
  auto* pr = fx.reply(prq);
  REQUIRE(pr);
  CHECK(pr->assignment->source_replica == "far+seed@1");

  // The owner's next update consumes its own seed locally.
  auto rq2 = fx.update(2, tb, 2, VersionSpec::latest(), std::nullopt);
  auto* r2 = fx.reply(rq2);
  REQUIRE(r2);
  CHECK(r2->changed == true);
  REQUIRE(r2->assignment.has_value());
  CHECK(r2->assignment->source_replica == "far+seed@1");
  CHECK(r2->assignment->local_seed_consume);
  CHECK_FALSE(r2->assignment->cross_dc);

  fx.complete(3, tc, 1);   // neighbor finishes off the seed
  fx.complete(2, tb, 2);   // owner consumes
  // Consumed and drained: the seed buffer is released back to the owner.
  CHECK_FALSE(fx.core.replica_view("m", "far+seed@1").has_value());
  bool released = false;
  for (auto& d : fx.directives)
    if (d.conn == 2 && d.msg.kind == DirectiveKind::offload_release &&
        d.msg.purpose == OffloadPurpose::seed)
      released = true;
  CHECK(released);
  CHECK(fx.core.replica_view("m", "far")->version == 1);
}

TEST_CASE("close of a published replica is a failure; slot can be reused") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "w", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));

  CloseMsg c;
  c.req_id = fx.next_req++;
  c.token = ta;
  fx.core.on_frame(1, c.to_frame());
  CHECK(fx.reply(c.req_id)->status == Status::ok);
  CHECK(fx.core.listing("m").empty());

  // The name is reusable immediately (record was fully dead).
  auto tb = fx.open(1, "m", "w", 1, 0);
  CHECK(fx.reply(fx.publish(1, tb, 1, 1, test_manifest(1, 0)))->status ==
        Status::ok);
}

TEST_CASE("disconnect evicts every handle on the connection") {
  ServerFix fx;
  auto ta = fx.open(1, "m", "w", 2, 0);
  fx.open(1, "m", "w", 2, 1);
  (void)ta;
  fx.core.on_disconnect(1);
  // Fully dead record: the name is immediately reusable.
  fx.open(2, "m", "w", 2, 0);
}

TEST_CASE("duplicate shard open is rejected; shape mismatch is rejected") {
  ServerFix fx;
  fx.open(1, "m", "w", 2, 0);

  OpenReq dup;
  dup.req_id = fx.next_req++;
  dup.coord = {"m", "w", 2, 0};
  dup.loc = {"dc0", false, "ep"};
  fx.core.on_frame(2, dup.to_frame());
  CHECK(fx.reply(dup.req_id)->status == Status::already_exists);

  OpenReq shape;
  shape.req_id = fx.next_req++;
  shape.coord = {"m", "w", 4, 1};
  shape.loc = {"dc0", false, "ep"};
  fx.core.on_frame(2, shape.to_frame());
  CHECK(fx.reply(shape.req_id)->status == Status::invalid_argument);

  OpenReq plus;
  plus.req_id = fx.next_req++;
  plus.coord = {"m", "w+seed", 1, 0};
  plus.loc = {"dc0", false, "ep"};
  fx.core.on_frame(2, plus.to_frame());
  CHECK(fx.reply(plus.req_id)->status == Status::invalid_argument);
}

TEST_CASE("sources balance by load then by least-recent assignment") {
  ServerFix fx;
  ServerConfig cfg;
  // Build three complete copies, then fan out three more readers and check
  // they spread across distinct sources.
  auto ta = fx.open(1, "m", "a", 1, 0);
  fx.publish(1, ta, 1, 1, test_manifest(1, 0));
  auto tb = fx.open(2, "m", "b", 1, 0);
  fx.replicate(2, tb, 1, VersionSpec::latest());
  fx.complete(2, tb, 1);
  auto tc = fx.open(3, "m", "c", 1, 0);
  fx.replicate(3, tc, 1, VersionSpec::latest());
  fx.complete(3, tc, 1);

  std::set<std::string> sources;
  for (int i = 0; i < 3; ++i) {
    auto td = fx.open(10 + i, "m", "r" + std::to_string(i), 1, 0);
    auto rq = fx.replicate(10 + i, td, 1, VersionSpec::latest());
    sources.insert(fx.reply(rq)->assignment->source_replica);
  }
  CHECK(sources.size() == 3);
  (void)cfg;
}

TEST_SUITE_END();
