#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "refstore/codec.hpp"
#include "refstore/types.hpp"

namespace refstore {

// Control-plane message types. Byte layouts are specified in
// docs/protocol.md; field tags below match that document.
enum class MsgType : std::uint8_t {
  open = 1,
  publish = 2,
  unpublish = 3,
  replicate = 4,
  update = 5,
  progress = 6,
  complete = 7,
  list = 8,
  heartbeat = 9,
  failure_report = 10,
  offload_confirm = 11,
  close = 12,
  response = 32,
  directive = 33,
};

// Which transfer lane of a handle a message refers to.
enum class TransferRole : std::uint8_t { primary = 0, seed = 1 };

enum class FailReason : std::uint8_t { timeout = 0, checksum = 1 };

// A replication source grant: where to pull one shard of `version` from.
struct Assignment {
  VersionId version = 0;
  std::string source_replica;
  std::string source_endpoint;
  bool source_complete = false;
  bool cross_dc = false;
  bool seeding = false;            // requester transfers over a slow link
  bool local_seed_consume = false; // source is the requester's own seed buffer
  std::string manifest;            // encoded TensorManifest for this shard

  std::string encode() const;
  static Result<Assignment> decode(std::string_view data);
};

struct OpenReq {
  std::uint64_t req_id = 0;
  ShardCoord coord;
  LocationInfo loc;
  RetentionRule retain;
  bool offload_seed = false;
  Frame to_frame() const;
  static Result<OpenReq> decode(std::string_view body);
};

struct PublishReq {
  std::uint64_t req_id = 0, token = 0, op_seq = 0;
  VersionId version = 0;
  std::string manifest;
  Frame to_frame() const;
  static Result<PublishReq> decode(std::string_view body);
};

struct UnpublishReq {
  std::uint64_t req_id = 0, token = 0, op_seq = 0;
  Frame to_frame() const;
  static Result<UnpublishReq> decode(std::string_view body);
};

struct ReplicateReq {
  std::uint64_t req_id = 0, token = 0, op_seq = 0;
  VersionSpec spec = VersionSpec::latest();
  Frame to_frame() const;
  static Result<ReplicateReq> decode(std::string_view body);
};

struct UpdateReq {
  std::uint64_t req_id = 0, token = 0, op_seq = 0;
  VersionSpec spec = VersionSpec::latest();
  std::optional<VersionId> current;  // version the handle holds locally
  Frame to_frame() const;
  static Result<UpdateReq> decode(std::string_view body);
};

// One-way: transferred-item watermark for a replicating shard.
struct ProgressMsg {
  std::uint64_t token = 0, op_seq = 0;
  TransferRole role = TransferRole::primary;
  std::uint64_t progress = 0;  // items
  Frame to_frame() const;
  static Result<ProgressMsg> decode(std::string_view body);
};

// One-way: terminal outcome of a shard's transfer.
struct CompleteMsg {
  std::uint64_t token = 0, op_seq = 0;
  TransferRole role = TransferRole::primary;
  Status outcome = Status::ok;
  Frame to_frame() const;
  static Result<CompleteMsg> decode(std::string_view body);
};

struct ListReq {
  std::uint64_t req_id = 0, token = 0;
  std::string model;  // empty = the handle's model
  Frame to_frame() const;
  static Result<ListReq> decode(std::string_view body);
};

struct HeartbeatMsg {
  std::uint64_t req_id = 0, token = 0;
  Frame to_frame() const;
  static Result<HeartbeatMsg> decode(std::string_view body);
};

struct FailureReportMsg {
  std::uint64_t req_id = 0, token = 0, op_seq = 0;
  TransferRole role = TransferRole::primary;
  std::string failed_replica;
  FailReason reason = FailReason::timeout;
  Frame to_frame() const;
  static Result<FailureReportMsg> decode(std::string_view body);
};

struct OffloadConfirmMsg {
  std::uint64_t req_id = 0, token = 0, op_seq = 0;
  VersionId version = 0;
  bool ok = false;  // false: allocation failed, offload impossible
  std::string endpoint;
  Frame to_frame() const;
  static Result<OffloadConfirmMsg> decode(std::string_view body);
};

struct CloseMsg {
  std::uint64_t req_id = 0, token = 0;
  Frame to_frame() const;
  static Result<CloseMsg> decode(std::string_view body);
};

enum class ResponseKind : std::uint8_t {
  final = 0,
  // Non-terminal reply to unpublish/update: copy the named version to host
  // memory, send OFFLOAD_CONFIRM, then await the final reply.
  offload_first = 1,
};

using ListingMap = std::map<VersionId, std::set<std::string>>;

// Reply to update that also starts a background cross-link seed fill.
struct SeedStart {
  std::uint64_t op_seq = 0;
  Assignment assignment;
};

struct ResponseMsg {
  std::uint64_t req_id = 0;
  ResponseKind kind = ResponseKind::final;
  Status status = Status::ok;
  std::optional<std::uint64_t> token;
  std::optional<VersionId> version;
  std::optional<bool> changed;
  std::optional<Assignment> assignment;
  std::optional<ListingMap> listing;
  std::optional<SeedStart> seed;
  Frame to_frame() const;
  static Result<ResponseMsg> decode(std::string_view body);
};

enum class DirectiveKind : std::uint8_t {
  group_aborted = 0,   // abandon the in-flight group operation op_seq
  offload_release = 1, // free the named offload buffer
};

enum class OffloadPurpose : std::uint8_t { retention = 0, seed = 1 };

struct DirectiveMsg {
  std::uint64_t token = 0;
  DirectiveKind kind = DirectiveKind::group_aborted;
  std::uint64_t op_seq = 0;
  TransferRole role = TransferRole::primary;
  VersionId version = 0;
  OffloadPurpose purpose = OffloadPurpose::retention;
  Frame to_frame() const;
  static Result<DirectiveMsg> decode(std::string_view body);
};

}  // namespace refstore
