#include <string>

#include "doctest.h"
#include "refstore/codec.hpp"
#include "refstore/messages.hpp"

using namespace refstore;

namespace {

std::string hex(std::string_view s) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 15]);
  }
  return out;
}

}  // namespace

TEST_SUITE("codec") {

TEST_CASE("field round trip") {
  FieldWriter w;
  w.put_u64(1, 0xDEADBEEFCAFEBABEull);
  w.put_str(2, "hello");
  w.put_list(3, {"a", "bc", ""});
  w.put_bool(4, true);
  std::string bytes = w.take();

  FieldReader r(bytes);
  REQUIRE(r.ok());
  CHECK(r.get_u64(1) == 0xDEADBEEFCAFEBABEull);
  CHECK(r.get_bytes(2) == "hello");
  auto list = r.get_list(3);
  REQUIRE(list);
  REQUIRE(list->size() == 3);
  CHECK((*list)[0] == "a");
  CHECK((*list)[1] == "bc");
  CHECK((*list)[2] == "");
  CHECK(r.get_u64(4) == 1);
  CHECK(!r.has(9));
  CHECK(r.get_u64(9) == std::nullopt);
}

// Golden bytes: the documented layout, pinned so accidental format changes
// fail loudly. u64 field: tag,01,8B big-endian; bytes field: tag,02,len32,raw.
TEST_CASE("golden encoding bytes") {
  FieldWriter w;
  w.put_u64(1, 2);
  w.put_str(3, "ab");
  CHECK(hex(w.bytes()) == "0101000000000000000203020000000261"
                          "62");
}

TEST_CASE("frame golden bytes and decode") {
  Frame f{7, std::string("\x01\x01\x00\x00\x00\x00\x00\x00\x00\x05", 10)};
  std::string wire = encode_frame(f);
  // length = 1 + 10 = 11
  CHECK(hex(wire.substr(0, 5)) == "0000000b07");

  FrameDecoder dec;
  // Feed byte by byte: no frame until complete.
  for (std::size_t i = 0; i + 1 < wire.size(); ++i) {
    dec.feed(wire.substr(i, 1));
    CHECK(!dec.next());
  }
  dec.feed(wire.substr(wire.size() - 1));
  auto got = dec.next();
  REQUIRE(got);
  CHECK(got->type == 7);
  CHECK(got->body == f.body);
  CHECK(!dec.next());
}

TEST_CASE("decoder handles back to back frames") {
  std::string wire = encode_frame({1, "x"}) + encode_frame({2, "yz"});
  FrameDecoder dec;
  dec.feed(wire);
  auto a = dec.next();
  auto b = dec.next();
  REQUIRE(a);
  REQUIRE(b);
  CHECK(a->type == 1);
  CHECK(a->body == "x");
  CHECK(b->type == 2);
  CHECK(b->body == "yz");
}

TEST_CASE("malformed input rejected") {
  FieldReader r(std::string("\x01\x09", 2));  // unknown wire type
  CHECK(!r.ok());
  FieldReader r2(std::string("\x01\x02\x00\x00\x00\x09xx", 8));  // short bytes
  CHECK(!r2.ok());

  FrameDecoder dec;
  std::string bogus;
  append_u32be(bogus, 0);  // zero-length frame is invalid
  dec.feed(bogus);
  CHECK(!dec.next());
  CHECK(dec.error());
}

TEST_CASE("message round trips") {
  OpenReq open;
  open.req_id = 42;
  open.coord = {"m", "trainer-0", 4, 2};
  open.loc = {"dc1", true, "host:9000"};
  open.retain.lags = {0, 3};
  open.offload_seed = true;
  Frame f = open.to_frame();
  CHECK(f.type == static_cast<std::uint8_t>(MsgType::open));
  auto back = OpenReq::decode(f.body);
  REQUIRE(back);
  CHECK(back->req_id == 42);
  CHECK(back->coord == open.coord);
  CHECK(back->loc.datacenter == "dc1");
  CHECK(back->loc.spot);
  CHECK(back->loc.data_endpoint == "host:9000");
  CHECK(back->retain.lags == std::set<std::uint64_t>{0, 3});
  CHECK(back->offload_seed);

  UpdateReq up;
  up.req_id = 7;
  up.token = 9;
  up.op_seq = 3;
  up.spec = VersionSpec::latest(2);
  auto up2 = UpdateReq::decode(up.to_frame().body);
  REQUIRE(up2);
  CHECK(up2->spec == VersionSpec::latest(2));
  CHECK(!up2->current);
  up.current = 17;
  auto up3 = UpdateReq::decode(up.to_frame().body);
  REQUIRE(up3);
  CHECK(up3->current == VersionId{17});

  ResponseMsg resp;
  resp.req_id = 7;
  resp.kind = ResponseKind::final;
  resp.status = Status::ok;
  resp.changed = true;
  Assignment a;
  a.version = 12;
  a.source_replica = "trainer-0";
  a.source_endpoint = "host:9000";
  a.source_complete = true;
  a.manifest = "MMM";
  resp.assignment = a;
  resp.listing = ListingMap{{12, {"trainer-0", "rollout-1"}}, {13, {"x"}}};
  resp.seed = SeedStart{5, a};
  auto r2 = ResponseMsg::decode(resp.to_frame().body);
  REQUIRE(r2);
  CHECK(r2->req_id == 7);
  CHECK(r2->changed == true);
  REQUIRE(r2->assignment);
  CHECK(r2->assignment->version == 12);
  CHECK(r2->assignment->manifest == "MMM");
  REQUIRE(r2->listing);
  CHECK(r2->listing->at(12) == std::set<std::string>{"trainer-0", "rollout-1"});
  REQUIRE(r2->seed);
  CHECK(r2->seed->op_seq == 5);
  CHECK(r2->seed->assignment.source_replica == "trainer-0");

  DirectiveMsg d;
  d.token = 11;
  d.kind = DirectiveKind::offload_release;
  d.version = 8;
  d.purpose = OffloadPurpose::seed;
  auto d2 = DirectiveMsg::decode(d.to_frame().body);
  REQUIRE(d2);
  CHECK(d2->kind == DirectiveKind::offload_release);
  CHECK(d2->version == 8);
  CHECK(d2->purpose == OffloadPurpose::seed);
}

TEST_CASE("canonical encoding is deterministic") {
  ResponseMsg resp;
  resp.req_id = 1;
  resp.listing = ListingMap{{2, {"b", "a"}}};
  CHECK(resp.to_frame().body == resp.to_frame().body);
  // Same logical listing built in different insertion order.
  ResponseMsg resp2;
  resp2.req_id = 1;
  ListingMap m;
  m[2].insert("a");
  m[2].insert("b");
  resp2.listing = m;
  CHECK(resp.to_frame().body == resp2.to_frame().body);
}

}  // TEST_SUITE
