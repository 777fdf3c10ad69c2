#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <variant>

namespace refstore {

using VersionId = std::uint64_t;

// Nanoseconds since an arbitrary epoch (sim t0 or process steady-clock start).
using Time = std::chrono::nanoseconds;
using Duration = std::chrono::nanoseconds;

inline constexpr Time kTimeNever = Time::max();

enum class Status : std::uint8_t {
  ok = 0,
  invalid_argument = 1,
  invalid_state = 2,
  already_exists = 3,
  not_found = 4,
  version_regression = 5,
  manifest_conflict = 6,
  mutability_violation = 7,
  version_unavailable = 8,
  group_aborted = 9,
  server_unavailable = 10,
  transfer_failed = 11,
  checksum_mismatch = 12,
  not_serving = 13,
  timeout = 14,
  offload_failed = 15,
  protocol_error = 16,
  closed = 17,
};

const char* status_name(Status s);

inline bool ok(Status s) { return s == Status::ok; }

// Minimal result: value or status. No message payload; callers trace context.
template <typename T>
class Result {
 public:
  Result(T value) : v_(std::move(value)) {}
  Result(Status s) : v_(s) {}

  bool has_value() const { return std::holds_alternative<T>(v_); }
  explicit operator bool() const { return has_value(); }
  Status status() const {
    return has_value() ? Status::ok : std::get<Status>(v_);
  }
  T& value() { return std::get<T>(v_); }
  const T& value() const { return std::get<T>(v_); }
  T& operator*() { return value(); }
  const T& operator*() const { return value(); }
  T* operator->() { return &value(); }
  const T* operator->() const { return &value(); }

 private:
  std::variant<T, Status> v_;
};

// A version selector: absolute("17"), or relative to newest ("latest",
// "latest-3"). relative lag 0 means the newest published version.
class VersionSpec {
 public:
  static VersionSpec absolute(VersionId v) { return VersionSpec(true, v); }
  static VersionSpec latest(std::uint64_t lag = 0) {
    return VersionSpec(false, lag);
  }

  bool is_absolute() const { return absolute_; }
  VersionId version() const { return value_; }   // absolute only
  std::uint64_t lag() const { return value_; }   // relative only

  static Result<VersionSpec> parse(std::string_view text);
  std::string to_string() const;

  bool operator==(const VersionSpec&) const = default;

 private:
  VersionSpec(bool absolute, std::uint64_t value)
      : absolute_(absolute), value_(value) {}
  bool absolute_;
  std::uint64_t value_;
};

// Resolve a spec against the set of available version ids.
// absolute(v): v if present. latest(k): k-th newest available.
// nullopt when nothing matches.
std::optional<VersionId> resolve_version(const VersionSpec& spec,
                                         const std::set<VersionId>& available);

// Identity of one shard handle within a sharded replica.
struct ShardCoord {
  std::string model;
  std::string replica;
  std::uint32_t num_shards = 1;
  std::uint32_t shard_idx = 0;

  Status validate() const;
  bool operator==(const ShardCoord&) const = default;
};

struct LocationInfo {
  std::string datacenter;
  bool spot = false;
  std::string data_endpoint;  // where peers pull this handle's bytes from
};

// Which historical versions a handle asks the cluster to keep reachable,
// as lags behind the newest published version (0 = newest).
struct RetentionRule {
  std::set<std::uint64_t> lags;
  bool operator==(const RetentionRule&) const = default;
};

}  // namespace refstore
