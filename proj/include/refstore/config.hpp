#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refstore/manifest.hpp"
#include "refstore/types.hpp"

namespace refstore {

using namespace std::chrono_literals;

struct ServerConfig {
  Duration heartbeat_timeout = 5s;  // lease length granted per heartbeat
  Duration txn_timeout = 60s;       // group op straggler bound
  Duration sweep_interval = 250ms;
  bool pipeline = true;        // partially-filled replicas may serve
  bool smart_skipping = true;  // hide versions that only exist as local seeds
};

struct ClientConfig {
  std::vector<std::string> servers;  // primary first, then backups
  std::string datacenter = "dc0";
  bool spot = false;
  std::string data_endpoint;  // advertised pull address for this process
  // Shard slice this handle owns within its replica group: global ids
  // [first_shard, first_shard + num_shards). group_shards is the group's
  // total count (0 = num_shards). Separate workers can thus share one
  // replica, each driving its own shards, provided they issue the same
  // group operations in the same order.
  std::uint32_t first_shard = 0;
  std::uint32_t group_shards = 0;
  bool offload_seed = false;  // fill cross-link updates via host memory
  Duration heartbeat_interval = 1s;
  Duration server_timeout = 5s;  // unacked heartbeat age forcing failover
  Duration wait_poll = 100ms;
  Duration pull_timeout = 4s;  // silence on a pull before reporting failure
  std::uint64_t chunk_bytes = 8ull << 20;  // pull granularity while chasing
  // When on, every pull is chunked so this replica's own progress counter
  // advances while it downloads and peers may chase it; when off, complete
  // sources are drained with a single whole-remainder pull.
  bool pipeline = true;
  int checksum_retries = 3;  // failure reports per item before giving up
  ManifestLimits manifest;
};

// Bandwidth/latency model for the simulated fabric.
struct SimNetConfig {
  std::uint64_t endpoint_bps = 500'000'000;  // per endpoint, each direction
  std::uint64_t dc_link_bps = 125'000'000;   // per ordered DC pair default
  std::map<std::pair<std::string, std::string>, std::uint64_t> dc_link_override;
  Duration control_latency = 500us;  // per control frame, either way
  Duration data_latency = 500us;     // per pull request/response leg
  Duration keepalive_interval = 1s;  // source liveness ticks during a pull
};

// JSON loaders; unknown keys rejected so typos fail loudly. Durations are
// given in seconds (numbers), rates in bytes/second.
Result<ServerConfig> load_server_config(const std::string& json_text);
Result<ClientConfig> load_client_config(const std::string& json_text);
Result<SimNetConfig> load_net_config(const std::string& json_text);

// Applies REFSTORE_SERVERS / REFSTORE_DC / REFSTORE_SPOT / REFSTORE_ENDPOINT /
// REFSTORE_OFFLOAD_SEED when set.
void apply_env_overrides(ClientConfig& cfg);

}  // namespace refstore
