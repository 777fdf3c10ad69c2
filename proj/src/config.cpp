#include "refstore/config.hpp"

#include <cstdlib>
#include <sstream>

#include "json.hpp"

namespace refstore {
namespace {

using nlohmann::json;

Duration seconds_to_duration(double s) {
  return Duration(static_cast<std::int64_t>(s * 1e9));
}

Result<json> parse(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return Status::invalid_argument;
  return j;
}

bool take_duration(json& j, const char* key, Duration& out) {
  if (!j.contains(key)) return true;
  if (!j[key].is_number()) return false;
  out = seconds_to_duration(j[key].get<double>());
  j.erase(key);
  return true;
}

bool take_u64(json& j, const char* key, std::uint64_t& out) {
  if (!j.contains(key)) return true;
  if (!j[key].is_number_unsigned()) return false;
  out = j[key].get<std::uint64_t>();
  j.erase(key);
  return true;
}

bool take_bool(json& j, const char* key, bool& out) {
  if (!j.contains(key)) return true;
  if (!j[key].is_boolean()) return false;
  out = j[key].get<bool>();
  j.erase(key);
  return true;
}

bool take_str(json& j, const char* key, std::string& out) {
  if (!j.contains(key)) return true;
  if (!j[key].is_string()) return false;
  out = j[key].get<std::string>();
  j.erase(key);
  return true;
}

}  // namespace

Result<ServerConfig> load_server_config(const std::string& text) {
  auto parsed = parse(text);
  if (!parsed) return parsed.status();
  json j = std::move(*parsed);
  ServerConfig cfg;
  if (!take_duration(j, "heartbeat_timeout", cfg.heartbeat_timeout) ||
      !take_duration(j, "txn_timeout", cfg.txn_timeout) ||
      !take_duration(j, "sweep_interval", cfg.sweep_interval) ||
      !take_bool(j, "pipeline", cfg.pipeline) ||
      !take_bool(j, "smart_skipping", cfg.smart_skipping))
    return Status::invalid_argument;
  if (!j.empty()) return Status::invalid_argument;
  return cfg;
}

Result<ClientConfig> load_client_config(const std::string& text) {
  auto parsed = parse(text);
  if (!parsed) return parsed.status();
  json j = std::move(*parsed);
  ClientConfig cfg;
  if (j.contains("servers")) {
    if (!j["servers"].is_array()) return Status::invalid_argument;
    for (const auto& s : j["servers"]) {
      if (!s.is_string()) return Status::invalid_argument;
      cfg.servers.push_back(s.get<std::string>());
    }
    j.erase("servers");
  }
  if (!take_str(j, "datacenter", cfg.datacenter) ||
      !take_bool(j, "spot", cfg.spot) ||
      !take_str(j, "data_endpoint", cfg.data_endpoint) ||
      !take_bool(j, "offload_seed", cfg.offload_seed) ||
      !take_duration(j, "heartbeat_interval", cfg.heartbeat_interval) ||
      !take_duration(j, "server_timeout", cfg.server_timeout) ||
      !take_duration(j, "wait_poll", cfg.wait_poll) ||
      !take_duration(j, "pull_timeout", cfg.pull_timeout) ||
      !take_u64(j, "chunk_bytes", cfg.chunk_bytes) ||
      !take_bool(j, "pipeline", cfg.pipeline) ||
      !take_u64(j, "tiny_threshold", cfg.manifest.tiny_threshold) ||
      !take_u64(j, "group_target", cfg.manifest.group_target))
    return Status::invalid_argument;
  std::uint64_t retries = static_cast<std::uint64_t>(cfg.checksum_retries);
  if (!take_u64(j, "checksum_retries", retries)) return Status::invalid_argument;
  cfg.checksum_retries = static_cast<int>(retries);
  if (!j.empty()) return Status::invalid_argument;
  return cfg;
}

Result<SimNetConfig> load_net_config(const std::string& text) {
  auto parsed = parse(text);
  if (!parsed) return parsed.status();
  json j = std::move(*parsed);
  SimNetConfig cfg;
  if (!take_u64(j, "endpoint_bps", cfg.endpoint_bps) ||
      !take_u64(j, "dc_link_bps", cfg.dc_link_bps) ||
      !take_duration(j, "control_latency", cfg.control_latency) ||
      !take_duration(j, "data_latency", cfg.data_latency) ||
      !take_duration(j, "keepalive_interval", cfg.keepalive_interval))
    return Status::invalid_argument;
  if (j.contains("dc_links")) {
    // {"dc1->dc2": 125000000, ...}
    if (!j["dc_links"].is_object()) return Status::invalid_argument;
    for (auto& [key, value] : j["dc_links"].items()) {
      auto sep = key.find("->");
      if (sep == std::string::npos || !value.is_number_unsigned())
        return Status::invalid_argument;
      cfg.dc_link_override[{key.substr(0, sep), key.substr(sep + 2)}] =
          value.get<std::uint64_t>();
    }
    j.erase("dc_links");
  }
  if (!j.empty()) return Status::invalid_argument;
  return cfg;
}

void apply_env_overrides(ClientConfig& cfg) {
  if (const char* servers = std::getenv("REFSTORE_SERVERS")) {
    cfg.servers.clear();
    std::stringstream ss{std::string(servers)};
    std::string part;
    while (std::getline(ss, part, ','))
      if (!part.empty()) cfg.servers.push_back(part);
  }
  if (const char* dc = std::getenv("REFSTORE_DC")) cfg.datacenter = dc;
  if (const char* spot = std::getenv("REFSTORE_SPOT"))
    cfg.spot = std::string(spot) == "1" || std::string(spot) == "true";
  if (const char* ep = std::getenv("REFSTORE_ENDPOINT")) cfg.data_endpoint = ep;
  if (const char* seed = std::getenv("REFSTORE_OFFLOAD_SEED"))
    cfg.offload_seed = std::string(seed) == "1" || std::string(seed) == "true";
}

}  // namespace refstore
