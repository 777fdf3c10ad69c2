#include <cstdlib>

#include "doctest.h"
#include "refstore/config.hpp"

using namespace refstore;
using namespace std::chrono_literals;

TEST_SUITE("config") {

TEST_CASE("server config defaults and overrides") {
  auto def = load_server_config("{}");
  REQUIRE(def);
  CHECK(def->heartbeat_timeout == 5s);
  CHECK(def->txn_timeout == 60s);
  CHECK(def->pipeline);
  CHECK(def->smart_skipping);

  auto cfg = load_server_config(
      R"({"heartbeat_timeout": 2.5, "pipeline": false, "txn_timeout": 10})");
  REQUIRE(cfg);
  CHECK(cfg->heartbeat_timeout == 2500ms);
  CHECK(!cfg->pipeline);
  CHECK(cfg->txn_timeout == 10s);

  CHECK(!load_server_config(R"({"no_such_key": 1})"));
  CHECK(!load_server_config("not json"));
}

TEST_CASE("client config") {
  auto cfg = load_client_config(R"({
    "servers": ["a:1", "b:2"],
    "datacenter": "dc2",
    "spot": true,
    "pull_timeout": 1.5,
    "chunk_bytes": 1048576,
    "tiny_threshold": 4096,
    "offload_seed": true
  })");
  REQUIRE(cfg);
  CHECK(cfg->servers == std::vector<std::string>{"a:1", "b:2"});
  CHECK(cfg->datacenter == "dc2");
  CHECK(cfg->spot);
  CHECK(cfg->pull_timeout == 1500ms);
  CHECK(cfg->chunk_bytes == 1048576);
  CHECK(cfg->manifest.tiny_threshold == 4096);
  CHECK(cfg->offload_seed);
  // Untouched defaults survive.
  CHECK(cfg->heartbeat_interval == 1s);
  CHECK(cfg->server_timeout == 5s);
  CHECK(cfg->checksum_retries == 3);
}

TEST_CASE("net config with dc link overrides") {
  auto cfg = load_net_config(R"({
    "endpoint_bps": 1000,
    "dc_link_bps": 250,
    "dc_links": {"dc1->dc2": 125},
    "control_latency": 0.001
  })");
  REQUIRE(cfg);
  CHECK(cfg->endpoint_bps == 1000);
  CHECK(cfg->dc_link_bps == 250);
  CHECK(cfg->dc_link_override.at({"dc1", "dc2"}) == 125);
  CHECK(cfg->control_latency == 1ms);
}

TEST_CASE("env overrides") {
  ClientConfig cfg;
  setenv("REFSTORE_SERVERS", "x:1,y:2", 1);
  setenv("REFSTORE_DC", "dc9", 1);
  setenv("REFSTORE_SPOT", "1", 1);
  apply_env_overrides(cfg);
  CHECK(cfg.servers == std::vector<std::string>{"x:1", "y:2"});
  CHECK(cfg.datacenter == "dc9");
  CHECK(cfg.spot);
  unsetenv("REFSTORE_SERVERS");
  unsetenv("REFSTORE_DC");
  unsetenv("REFSTORE_SPOT");
}

}  // TEST_SUITE
