#include "refstore/messages.hpp"

namespace refstore {
namespace {

Frame make_frame(MsgType t, FieldWriter& w) {
  return Frame{static_cast<std::uint8_t>(t), w.take()};
}

}  // namespace

std::string Assignment::encode() const {
  FieldWriter w;
  w.put_u64(1, version);
  w.put_str(2, source_replica);
  w.put_str(3, source_endpoint);
  w.put_bool(4, source_complete);
  w.put_bool(5, cross_dc);
  w.put_bool(6, seeding);
  w.put_bool(7, local_seed_consume);
  w.put_bytes(8, manifest);
  return w.take();
}

Result<Assignment> Assignment::decode(std::string_view data) {
  FieldReader r(data);
  Assignment a;
  a.version = r.req_u64(1);
  a.source_replica = r.req_str(2);
  a.source_endpoint = r.req_str(3);
  a.source_complete = r.req_bool(4);
  a.cross_dc = r.req_bool(5);
  a.seeding = r.req_bool(6);
  a.local_seed_consume = r.req_bool(7);
  a.manifest = std::string(r.req_bytes(8));
  if (!r.all_found()) return Status::protocol_error;
  return a;
}

Frame OpenReq::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_str(3, coord.model);
  w.put_str(4, coord.replica);
  w.put_u32(5, coord.num_shards);
  w.put_u32(6, coord.shard_idx);
  w.put_str(7, loc.datacenter);
  w.put_bool(8, loc.spot);
  w.put_str(9, loc.data_endpoint);
  std::string lags;
  for (auto lag : retain.lags) append_u64be(lags, lag);
  w.put_bytes(10, lags);
  w.put_bool(11, offload_seed);
  return make_frame(MsgType::open, w);
}

Result<OpenReq> OpenReq::decode(std::string_view body) {
  FieldReader r(body);
  OpenReq m;
  m.req_id = r.req_u64(1);
  m.coord.model = r.req_str(3);
  m.coord.replica = r.req_str(4);
  m.coord.num_shards = r.req_u32(5);
  m.coord.shard_idx = r.req_u32(6);
  m.loc.datacenter = r.req_str(7);
  m.loc.spot = r.req_bool(8);
  m.loc.data_endpoint = r.req_str(9);
  std::string_view lags = r.req_bytes(10);
  m.offload_seed = r.req_bool(11);
  if (!r.all_found() || lags.size() % 8 != 0) return Status::protocol_error;
  for (std::size_t i = 0; i < lags.size(); i += 8)
    m.retain.lags.insert(
        load_u64be(reinterpret_cast<const unsigned char*>(lags.data() + i)));
  return m;
}

Frame PublishReq::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u64(2, token);
  w.put_u64(3, op_seq);
  w.put_u64(4, version);
  w.put_bytes(5, manifest);
  return make_frame(MsgType::publish, w);
}

Result<PublishReq> PublishReq::decode(std::string_view body) {
  FieldReader r(body);
  PublishReq m;
  m.req_id = r.req_u64(1);
  m.token = r.req_u64(2);
  m.op_seq = r.req_u64(3);
  m.version = r.req_u64(4);
  m.manifest = std::string(r.req_bytes(5));
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

Frame UnpublishReq::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u64(2, token);
  w.put_u64(3, op_seq);
  return make_frame(MsgType::unpublish, w);
}

Result<UnpublishReq> UnpublishReq::decode(std::string_view body) {
  FieldReader r(body);
  UnpublishReq m;
  m.req_id = r.req_u64(1);
  m.token = r.req_u64(2);
  m.op_seq = r.req_u64(3);
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

namespace {

void put_spec(FieldWriter& w, const VersionSpec& spec) {
  w.put_u8(4, spec.is_absolute() ? 0 : 1);
  w.put_u64(5, spec.is_absolute() ? spec.version() : spec.lag());
}

Result<VersionSpec> read_spec(FieldReader& r) {
  std::uint8_t kind = r.req_u8(4);
  std::uint64_t value = r.req_u64(5);
  if (kind > 1) return Status::protocol_error;
  return kind == 0 ? VersionSpec::absolute(value) : VersionSpec::latest(value);
}

}  // namespace

Frame ReplicateReq::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u64(2, token);
  w.put_u64(3, op_seq);
  put_spec(w, spec);
  return make_frame(MsgType::replicate, w);
}

Result<ReplicateReq> ReplicateReq::decode(std::string_view body) {
  FieldReader r(body);
  ReplicateReq m;
  m.req_id = r.req_u64(1);
  m.token = r.req_u64(2);
  m.op_seq = r.req_u64(3);
  auto spec = read_spec(r);
  if (!r.all_found() || !spec) return Status::protocol_error;
  m.spec = *spec;
  return m;
}

Frame UpdateReq::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u64(2, token);
  w.put_u64(3, op_seq);
  put_spec(w, spec);
  if (current) w.put_u64(6, *current);
  return make_frame(MsgType::update, w);
}

Result<UpdateReq> UpdateReq::decode(std::string_view body) {
  FieldReader r(body);
  UpdateReq m;
  m.req_id = r.req_u64(1);
  m.token = r.req_u64(2);
  m.op_seq = r.req_u64(3);
  auto spec = read_spec(r);
  if (!r.all_found() || !spec) return Status::protocol_error;
  m.spec = *spec;
  m.current = r.get_u64(6);
  return m;
}

Frame ProgressMsg::to_frame() const {
  FieldWriter w;
  w.put_u64(2, token);
  w.put_u64(3, op_seq);
  w.put_u8(4, static_cast<std::uint8_t>(role));
  w.put_u64(5, progress);
  return make_frame(MsgType::progress, w);
}

Result<ProgressMsg> ProgressMsg::decode(std::string_view body) {
  FieldReader r(body);
  ProgressMsg m;
  m.token = r.req_u64(2);
  m.op_seq = r.req_u64(3);
  m.role = static_cast<TransferRole>(r.req_u8(4));
  m.progress = r.req_u64(5);
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

Frame CompleteMsg::to_frame() const {
  FieldWriter w;
  w.put_u64(2, token);
  w.put_u64(3, op_seq);
  w.put_u8(4, static_cast<std::uint8_t>(role));
  w.put_u8(5, static_cast<std::uint8_t>(outcome));
  return make_frame(MsgType::complete, w);
}

Result<CompleteMsg> CompleteMsg::decode(std::string_view body) {
  FieldReader r(body);
  CompleteMsg m;
  m.token = r.req_u64(2);
  m.op_seq = r.req_u64(3);
  m.role = static_cast<TransferRole>(r.req_u8(4));
  m.outcome = static_cast<Status>(r.req_u8(5));
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

Frame ListReq::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u64(2, token);
  w.put_str(3, model);
  return make_frame(MsgType::list, w);
}

Result<ListReq> ListReq::decode(std::string_view body) {
  FieldReader r(body);
  ListReq m;
  m.req_id = r.req_u64(1);
  m.token = r.req_u64(2);
  m.model = r.req_str(3);
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

Frame HeartbeatMsg::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u64(2, token);
  return make_frame(MsgType::heartbeat, w);
}

Result<HeartbeatMsg> HeartbeatMsg::decode(std::string_view body) {
  FieldReader r(body);
  HeartbeatMsg m;
  m.req_id = r.req_u64(1);
  m.token = r.req_u64(2);
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

Frame FailureReportMsg::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u64(2, token);
  w.put_u64(3, op_seq);
  w.put_u8(4, static_cast<std::uint8_t>(role));
  w.put_str(5, failed_replica);
  w.put_u8(6, static_cast<std::uint8_t>(reason));
  return make_frame(MsgType::failure_report, w);
}

Result<FailureReportMsg> FailureReportMsg::decode(std::string_view body) {
  FieldReader r(body);
  FailureReportMsg m;
  m.req_id = r.req_u64(1);
  m.token = r.req_u64(2);
  m.op_seq = r.req_u64(3);
  m.role = static_cast<TransferRole>(r.req_u8(4));
  m.failed_replica = r.req_str(5);
  m.reason = static_cast<FailReason>(r.req_u8(6));
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

Frame OffloadConfirmMsg::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u64(2, token);
  w.put_u64(3, op_seq);
  w.put_u64(4, version);
  w.put_bool(5, ok);
  w.put_str(6, endpoint);
  return make_frame(MsgType::offload_confirm, w);
}

Result<OffloadConfirmMsg> OffloadConfirmMsg::decode(std::string_view body) {
  FieldReader r(body);
  OffloadConfirmMsg m;
  m.req_id = r.req_u64(1);
  m.token = r.req_u64(2);
  m.op_seq = r.req_u64(3);
  m.version = r.req_u64(4);
  m.ok = r.req_bool(5);
  m.endpoint = r.req_str(6);
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

Frame CloseMsg::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u64(2, token);
  return make_frame(MsgType::close, w);
}

Result<CloseMsg> CloseMsg::decode(std::string_view body) {
  FieldReader r(body);
  CloseMsg m;
  m.req_id = r.req_u64(1);
  m.token = r.req_u64(2);
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

Frame ResponseMsg::to_frame() const {
  FieldWriter w;
  w.put_u64(1, req_id);
  w.put_u8(2, static_cast<std::uint8_t>(kind));
  w.put_u8(3, static_cast<std::uint8_t>(status));
  if (token) w.put_u64(4, *token);
  if (version) w.put_u64(5, *version);
  if (changed) w.put_bool(6, *changed);
  if (assignment) w.put_bytes(7, assignment->encode());
  if (listing) {
    std::vector<std::string> rows;
    for (const auto& [v, names] : *listing) {
      FieldWriter rw;
      rw.put_u64(1, v);
      rw.put_list(2, std::vector<std::string>(names.begin(), names.end()));
      rows.push_back(rw.take());
    }
    w.put_list(8, rows);
  }
  if (seed) {
    FieldWriter sw;
    sw.put_u64(1, seed->op_seq);
    sw.put_bytes(2, seed->assignment.encode());
    w.put_bytes(9, sw.take());
  }
  return make_frame(MsgType::response, w);
}

Result<ResponseMsg> ResponseMsg::decode(std::string_view body) {
  FieldReader r(body);
  ResponseMsg m;
  m.req_id = r.req_u64(1);
  m.kind = static_cast<ResponseKind>(r.req_u8(2));
  m.status = static_cast<Status>(r.req_u8(3));
  if (!r.all_found()) return Status::protocol_error;
  m.token = r.get_u64(4);
  m.version = r.get_u64(5);
  if (auto c = r.get_u64(6)) m.changed = (*c != 0);
  if (auto a = r.get_bytes(7)) {
    auto dec = Assignment::decode(*a);
    if (!dec) return Status::protocol_error;
    m.assignment = *dec;
  }
  if (auto rows = r.get_list(8)) {
    ListingMap map;
    for (auto row : *rows) {
      FieldReader rr(row);
      VersionId v = rr.req_u64(1);
      auto names = rr.get_list(2);
      if (!rr.all_found() || !names) return Status::protocol_error;
      auto& set = map[v];
      for (auto n : *names) set.insert(std::string(n));
    }
    m.listing = std::move(map);
  }
  if (auto s = r.get_bytes(9)) {
    FieldReader sr(*s);
    SeedStart seed;
    seed.op_seq = sr.req_u64(1);
    auto a = Assignment::decode(sr.req_bytes(2));
    if (!sr.all_found() || !a) return Status::protocol_error;
    seed.assignment = *a;
    m.seed = std::move(seed);
  }
  return m;
}

Frame DirectiveMsg::to_frame() const {
  FieldWriter w;
  w.put_u64(2, token);
  w.put_u8(3, static_cast<std::uint8_t>(kind));
  w.put_u64(4, op_seq);
  w.put_u8(5, static_cast<std::uint8_t>(role));
  w.put_u64(6, version);
  w.put_u8(7, static_cast<std::uint8_t>(purpose));
  return make_frame(MsgType::directive, w);
}

Result<DirectiveMsg> DirectiveMsg::decode(std::string_view body) {
  FieldReader r(body);
  DirectiveMsg m;
  m.token = r.req_u64(2);
  m.kind = static_cast<DirectiveKind>(r.req_u8(3));
  m.op_seq = r.req_u64(4);
  m.role = static_cast<TransferRole>(r.req_u8(5));
  m.version = r.req_u64(6);
  m.purpose = static_cast<OffloadPurpose>(r.req_u8(7));
  if (!r.all_found()) return Status::protocol_error;
  return m;
}

}  // namespace refstore
