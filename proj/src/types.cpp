#include "refstore/types.hpp"

#include <charconv>

namespace refstore {

const char* status_name(Status s) {
  switch (s) {
    case Status::ok: return "ok";
    case Status::invalid_argument: return "invalid_argument";
    case Status::invalid_state: return "invalid_state";
    case Status::already_exists: return "already_exists";
    case Status::not_found: return "not_found";
    case Status::version_regression: return "version_regression";
    case Status::manifest_conflict: return "manifest_conflict";
    case Status::mutability_violation: return "mutability_violation";
    case Status::version_unavailable: return "version_unavailable";
    case Status::group_aborted: return "group_aborted";
    case Status::server_unavailable: return "server_unavailable";
    case Status::transfer_failed: return "transfer_failed";
    case Status::checksum_mismatch: return "checksum_mismatch";
    case Status::not_serving: return "not_serving";
    case Status::timeout: return "timeout";
    case Status::offload_failed: return "offload_failed";
    case Status::protocol_error: return "protocol_error";
    case Status::closed: return "closed";
  }
  return "unknown";
}

Result<VersionSpec> VersionSpec::parse(std::string_view text) {
  if (text.empty()) return Status::invalid_argument;
  if (text == "latest") return VersionSpec::latest(0);
  if (text.rfind("latest-", 0) == 0) {
    std::string_view rest = text.substr(7);
    std::uint64_t lag = 0;
    auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), lag);
    if (ec != std::errc() || p != rest.data() + rest.size())
      return Status::invalid_argument;
    return VersionSpec::latest(lag);
  }
  VersionId v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size())
    return Status::invalid_argument;
  return VersionSpec::absolute(v);
}

std::string VersionSpec::to_string() const {
  if (absolute_) return std::to_string(value_);
  if (value_ == 0) return "latest";
  return "latest-" + std::to_string(value_);
}

std::optional<VersionId> resolve_version(const VersionSpec& spec,
                                         const std::set<VersionId>& available) {
  if (available.empty()) return std::nullopt;
  if (spec.is_absolute()) {
    if (available.count(spec.version())) return spec.version();
    return std::nullopt;
  }
  if (spec.lag() >= available.size()) return std::nullopt;
  auto it = available.rbegin();
  std::advance(it, static_cast<std::ptrdiff_t>(spec.lag()));
  return *it;
}

Status ShardCoord::validate() const {
  if (model.empty() || replica.empty()) return Status::invalid_argument;
  if (num_shards == 0 || shard_idx >= num_shards) return Status::invalid_argument;
  return Status::ok;
}

}  // namespace refstore
