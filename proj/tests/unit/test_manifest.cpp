#include <cstring>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "refstore/digest.hpp"
#include "refstore/manifest.hpp"

using namespace refstore;

namespace {

std::vector<std::byte> filled(std::size_t n, unsigned seed) {
  std::vector<std::byte> out(n);
  std::uint64_t x = seed;
  for (std::size_t i = 0; i < n; ++i) {
    x = x * 6364136223846793005ULL + 1442695040888963407ULL;
    out[i] = static_cast<std::byte>(x >> 56);
  }
  return out;
}

}  // namespace

TEST_SUITE("manifest") {

// Hand-computed packing oracle: threshold 100, target 250.
// Sizes:   e0=50 tiny, e1=200 big, e2=60 tiny, e3=70 tiny, e4=80 tiny, e5=30 tiny
// Group 0: e0@0, e2@50, e3@110            (packed 180; +e4 would hit 260 > 250)
// Group 1: e4@0, e5@80                    (packed 110)
// Items:   [group0 @ e0], [e1], [group1 @ e4]; stream offsets 0, 180, 380.
TEST_CASE("packing oracle") {
  ManifestLimits limits{100, 250};
  std::vector<EntryDesc> descs = {
      {"e0", 50, 1}, {"e1", 200, 2}, {"e2", 60, 3},
      {"e3", 70, 4}, {"e4", 80, 5},  {"e5", 30, 6},
  };
  auto m = assemble_manifest(descs, limits);
  REQUIRE(m);
  CHECK(m->total_bytes() == 490);
  REQUIRE(m->groups.size() == 2);
  const auto& g0 = m->groups[0];
  CHECK(g0.packed_length == 180);
  REQUIRE(g0.members.size() == 3);
  CHECK(g0.members[0].entry_idx == 0);
  CHECK(g0.members[0].offset == 0);
  CHECK(g0.members[1].entry_idx == 2);
  CHECK(g0.members[1].offset == 50);
  CHECK(g0.members[2].entry_idx == 3);
  CHECK(g0.members[2].offset == 110);
  const auto& g1 = m->groups[1];
  CHECK(g1.packed_length == 110);
  REQUIRE(g1.members.size() == 2);
  CHECK(g1.members[0].entry_idx == 4);
  CHECK(g1.members[1].entry_idx == 5);
  CHECK(g1.members[1].offset == 80);

  const auto& items = m->items();
  REQUIRE(items.size() == 3);
  CHECK(items[0].is_group);
  CHECK(items[0].index == 0);
  CHECK(items[0].length == 180);
  CHECK(items[0].stream_offset == 0);
  CHECK(!items[1].is_group);
  CHECK(items[1].index == 1);
  CHECK(items[1].stream_offset == 180);
  CHECK(items[2].is_group);
  CHECK(items[2].index == 1);
  CHECK(items[2].stream_offset == 380);

  CHECK(m->group_of_entry(0) == 0u);
  CHECK(!m->group_of_entry(1));
  CHECK(m->group_of_entry(5) == 1u);
  CHECK(m->item_of_entry(1).item == 1);
  CHECK(m->item_of_entry(3).item == 0);
  CHECK(m->item_of_entry(3).offset == 110);
  CHECK(m->item_of_entry(5).item == 2);
  CHECK(m->item_of_entry(5).offset == 80);
}

TEST_CASE("entries at the threshold stay unpacked") {
  ManifestLimits limits{100, 250};
  std::vector<EntryDesc> descs = {{"a", 100, 1}, {"b", 99, 2}};
  auto m = assemble_manifest(descs, limits);
  REQUIRE(m);
  REQUIRE(m->groups.size() == 1);
  CHECK(m->groups[0].members.size() == 1);
  CHECK(m->groups[0].members[0].entry_idx == 1);
  CHECK(m->items().size() == 2);
  CHECK(!m->items()[0].is_group);
}

TEST_CASE("default limits pack 1MB entries 67 to a group") {
  std::vector<EntryDesc> descs;
  for (int i = 0; i < 1000; ++i)
    descs.push_back({"t" + std::to_string(i), 1'000'000, 0});
  auto m = assemble_manifest(descs, ManifestLimits{});
  REQUIRE(m);
  // 64 MiB / 1 MB = 67 full entries per group; 1000 = 14*67 + 62.
  REQUIRE(m->groups.size() == 15);
  for (int g = 0; g < 14; ++g) CHECK(m->groups[g].members.size() == 67);
  CHECK(m->groups[14].members.size() == 62);
  CHECK(m->items().size() == 15);
  CHECK(m->total_bytes() == 1'000'000'000ull);
}

TEST_CASE("pack and unpack round trip with digests") {
  ManifestLimits limits{100, 250};
  std::vector<EntryDesc> descs = {
      {"e0", 50, 0}, {"e1", 200, 0}, {"e2", 60, 0}, {"e3", 70, 0}};
  std::vector<std::vector<std::byte>> data;
  for (std::size_t i = 0; i < descs.size(); ++i) {
    data.push_back(filled(descs[i].length, static_cast<unsigned>(i + 1)));
    descs[i].digest = digest64(data.back().data(), data.back().size());
  }
  auto m = assemble_manifest(descs, limits);
  REQUIRE(m);
  REQUIRE(m->groups.size() == 1);

  std::vector<std::span<const std::byte>> regions;
  for (auto& d : data) regions.emplace_back(d.data(), d.size());
  std::vector<std::byte> staging(m->groups[0].packed_length);
  std::uint64_t gd = pack_group(*m, 0, regions, staging);
  CHECK(gd == digest64(staging.data(), staging.size()));
  CHECK(m->groups[0].digest == gd);
  // Item digest stays in sync with the group digest.
  bool found = false;
  for (const auto& it : m->items())
    if (it.is_group && it.index == 0) {
      CHECK(it.digest == gd);
      found = true;
    }
  CHECK(found);

  std::vector<std::vector<std::byte>> out(data.size());
  std::vector<std::span<std::byte>> out_regions;
  for (std::size_t i = 0; i < data.size(); ++i) {
    out[i].resize(data[i].size());
    out_regions.emplace_back(out[i].data(), out[i].size());
  }
  unpack_group(*m, 0, staging, out_regions);
  for (std::size_t i : {0u, 2u, 3u}) CHECK(out[i] == data[i]);
}

TEST_CASE("encode decode round trip preserves identity") {
  ManifestLimits limits{100, 250};
  std::vector<EntryDesc> descs = {
      {"w.a", 50, 11}, {"w.b", 200, 22}, {"w.c", 60, 33}};
  auto m = assemble_manifest(descs, limits);
  REQUIRE(m);
  seal_groups_modeled(*m);
  std::string bytes = m->encode();
  auto back = TensorManifest::decode(bytes);
  REQUIRE(back);
  CHECK(back->same_as(*m));
  CHECK(back->encode() == bytes);
  CHECK(back->items().size() == m->items().size());
  CHECK(back->total_bytes() == m->total_bytes());

  // A digest change alters identity.
  auto m2 = *m;
  m2.entries[0].digest ^= 1;
  CHECK(!m2.same_as(*m));
}

TEST_CASE("modeled digests are deterministic and version sensitive") {
  CHECK(modeled_entry_digest("layer.0", 3, 100) ==
        modeled_entry_digest("layer.0", 3, 100));
  CHECK(modeled_entry_digest("layer.0", 3, 100) !=
        modeled_entry_digest("layer.0", 4, 100));
  CHECK(modeled_entry_digest("layer.0", 3, 100) !=
        modeled_entry_digest("layer.1", 3, 100));

  std::vector<EntryDesc> descs = {{"a", 10, modeled_entry_digest("a", 1, 10)},
                                  {"b", 20, modeled_entry_digest("b", 1, 20)}};
  auto m1 = assemble_manifest(descs, ManifestLimits{100, 250});
  auto m2 = assemble_manifest(descs, ManifestLimits{100, 250});
  REQUIRE(m1);
  REQUIRE(m2);
  seal_groups_modeled(*m1);
  seal_groups_modeled(*m2);
  CHECK(m1->same_as(*m2));
  CHECK(m1->groups[0].digest != 0);
}

TEST_CASE("structural validation rejects malformed manifests") {
  TensorManifest m;
  m.entries = {{"a", 10, 1}, {"a", 20, 2}};  // duplicate name
  CHECK(m.finalize() == Status::invalid_argument);

  TensorManifest m2;
  m2.entries = {{"a", 10, 1}};
  m2.groups.push_back({10, 0, {{0, 5}}});  // bad member offset
  CHECK(m2.finalize() == Status::invalid_argument);

  TensorManifest m3;
  m3.entries = {{"a", 10, 1}};
  m3.groups.push_back({9, 0, {{0, 0}}});  // packed length mismatch
  CHECK(m3.finalize() == Status::invalid_argument);

  CHECK(!TensorManifest::decode("garbage"));
}

}  // TEST_SUITE
