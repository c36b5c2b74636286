// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <persistheap/error.hpp>
#include <persistheap/management.hpp>

using namespace persistheap;
namespace fs = std::filesystem;

namespace {

struct temp_dir {
  fs::path path;
  temp_dir() {
    path = fs::temp_directory_path() /
           ("ph_mgmt_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~temp_dir() { fs::remove_all(path); }
  static int &counter() {
    static int c = 0;
    return c;
  }
};

std::vector<char> slurp(const fs::path &p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path &p, const std::vector<char> &bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("chunk directory state machine") {
  size_class_table t;
  chunk_directory d(16);
  CHECK(d.high_water() == 0);
  CHECK(d.find_empty_chunks(1) == 0u);
  CHECK(d.find_empty_chunks(16) == 0u);
  CHECK(!d.find_empty_chunks(17).has_value());

  d.mark_small(0, 3, 100);
  CHECK(d.high_water() == 1);
  CHECK(d.record(0).kind == chunk_kind::small);
  CHECK(d.record(0).bin == 3);
  REQUIRE(d.record(0).slots != nullptr);
  CHECK(d.record(0).slots->num_slots() == 100);

  d.mark_large(2, 3);  // chunks 2,3,4
  CHECK(d.high_water() == 5);
  CHECK(d.record(2).kind == chunk_kind::large_head);
  CHECK(d.record(2).span_chunks == 3);
  CHECK(d.record(3).kind == chunk_kind::large_body);
  CHECK(d.record(4).kind == chunk_kind::large_body);

  // Lowest-fit: the gap at 1 is found before the tail.
  CHECK(d.find_empty_chunks(1) == 1u);
  CHECK(d.find_empty_chunks(2) == 5u);

  d.mark_empty(2);
  CHECK(d.record(2).kind == chunk_kind::empty);
  CHECK(d.record(3).kind == chunk_kind::empty);
  CHECK(d.record(4).kind == chunk_kind::empty);
  CHECK(d.find_empty_chunks(4) == 1u);

  d.mark_empty(0);
  CHECK(d.find_empty_chunks(1) == 0u);
  // High water never recedes.
  CHECK(d.high_water() == 5);
}

TEST_CASE("bin directory is LIFO") {
  bin_directory b(4);
  CHECK(!b.pop(2).has_value());
  b.push(2, 10);
  b.push(2, 11);
  b.push(2, 12);
  CHECK(b.depth(2) == 3);
  CHECK(b.peek(2) == 12u);
  CHECK(b.pop(2) == 12u);
  CHECK(b.pop(2) == 11u);
  b.push(2, 13);
  CHECK(b.pop(2) == 13u);
  CHECK(b.pop(2) == 10u);
  CHECK(!b.pop(2).has_value());

  b.push(1, 7);
  b.push(1, 8);
  CHECK(b.remove(1, 7));
  CHECK(!b.remove(1, 7));
  CHECK(b.pop(1) == 8u);
  CHECK(b.count(1, 8) == 0);
}

TEST_CASE("name directory") {
  name_directory n;
  n.insert({"alpha", 64, 10, 8, "vec"});
  n.insert({"beta", 128, 1, 32, "map"});
  CHECK(n.size() == 2);
  auto r = n.find("alpha");
  REQUIRE(r.has_value());
  CHECK(r->offset == 64);
  CHECK(r->length == 10);
  CHECK(r->element_size == 8);
  CHECK(r->type_tag == "vec");
  CHECK_THROWS_AS(n.insert({"alpha", 0, 0, 0, ""}), error);
  CHECK(!n.find("gamma").has_value());
  CHECK(n.erase("alpha"));
  CHECK(!n.erase("alpha"));
  CHECK(n.size() == 1);
}

TEST_CASE("chunk directory round trip") {
  temp_dir td;
  const auto file = td.path / "chunks.bin";
  size_class_table t(1 << 16);
  const auto slots_of = [&](std::uint8_t bin) {
    return static_cast<std::uint32_t>(t.chunk_size() / t.class_of_bin(bin));
  };

  chunk_directory d(64);
  d.mark_small(0, 0, slots_of(0));
  for (int i = 0; i < 600; ++i) d.record(0).slots->find_and_set_first_free();
  d.record(0).slots->clear(17);
  d.mark_large(1, 4);
  const auto last_bin = static_cast<std::uint8_t>(t.num_bins() - 1);
  d.mark_small(5, last_bin, slots_of(last_bin));  // 2 slots at this geometry
  d.record(5).slots->find_and_set_first_free();
  d.record(5).slots->find_and_set_first_free();  // full chunk
  d.mark_small(9, 12, slots_of(12));             // untouched (empty bitset)
  d.mark_large(10, 1);

  save_chunk_directory(d, file);
  chunk_directory re = load_chunk_directory(file, 64, t);

  CHECK(re.high_water() == d.high_water());
  CHECK(re.size() == 64);
  for (std::uint64_t c = 0; c < 64; ++c) {
    const auto &a = d.record(c);
    const auto &b = re.record(c);
    REQUIRE(a.kind == b.kind);
    CHECK(a.bin == b.bin);
    CHECK(a.span_chunks == b.span_chunks);
    if (a.kind == chunk_kind::small) {
      REQUIRE(b.slots != nullptr);
      REQUIRE(a.slots->num_slots() == b.slots->num_slots());
      for (std::uint32_t s = 0; s < a.slots->num_slots(); ++s) {
        REQUIRE(a.slots->test(s) == b.slots->test(s));
      }
    }
  }

  // Byte-exact determinism of the writer.
  const auto once = slurp(file);
  save_chunk_directory(re, file);
  CHECK(slurp(file) == once);
}

TEST_CASE("name directory round trip is deterministic") {
  temp_dir td;
  const auto file = td.path / "names.bin";
  name_directory n;
  n.insert({"zeta", 1, 2, 3, "vec"});
  n.insert({"alpha", 4, 5, 6, "map"});
  n.insert({"mid", 7, 8, 9, "graph"});
  save_name_directory(n, file);
  const auto once = slurp(file);

  name_directory re = load_name_directory(file);
  CHECK(re.size() == 3);
  auto r = re.find("zeta");
  REQUIRE(r.has_value());
  CHECK(r->offset == 1);
  CHECK(r->type_tag == "vec");

  // Insertion order must not leak into the bytes.
  name_directory other;
  other.insert({"mid", 7, 8, 9, "graph"});
  other.insert({"zeta", 1, 2, 3, "vec"});
  other.insert({"alpha", 4, 5, 6, "map"});
  save_name_directory(other, file);
  CHECK(slurp(file) == once);
}

TEST_CASE("rebuild_bins recovers non-full chunks in index order") {
  size_class_table t;
  chunk_directory d(32);
  d.mark_small(0, 5, 100);
  d.mark_small(1, 5, 2);
  d.record(1).slots->find_and_set_first_free();
  d.record(1).slots->find_and_set_first_free();  // full -> not binned
  d.mark_small(2, 5, 100);
  d.mark_small(3, 9, 50);
  d.mark_large(4, 2);

  bin_directory b = rebuild_bins(d, t);
  CHECK(b.num_bins() == t.num_bins());
  CHECK(b.depth(5) == 2);
  CHECK(b.entries(5) == std::vector<std::uint64_t>{0, 2});
  CHECK(b.depth(9) == 1);
  CHECK(b.peek(9) == 3u);
}

TEST_CASE("corrupt files are rejected") {
  temp_dir td;
  const auto file = td.path / "chunks.bin";
  size_class_table t(1 << 16);
  chunk_directory d(8);
  d.mark_small(0, 1, static_cast<std::uint32_t>(t.chunk_size() / 16));
  save_chunk_directory(d, file);

  auto good = slurp(file);
  REQUIRE(good.size() > 24);

  SUBCASE("flipped payload byte fails the checksum") {
    auto bad = good;
    bad[bad.size() - 1] ^= 0x40;
    spit(file, bad);
    CHECK_THROWS_AS(load_chunk_directory(file, 8, t), error);
  }
  SUBCASE("wrong magic") {
    auto bad = good;
    bad[0] = 'X';
    spit(file, bad);
    CHECK_THROWS_AS(load_chunk_directory(file, 8, t), error);
  }
  SUBCASE("truncated payload") {
    auto bad = good;
    bad.resize(bad.size() - 3);
    spit(file, bad);
    CHECK_THROWS_AS(load_chunk_directory(file, 8, t), error);
  }
  SUBCASE("unsupported version") {
    auto bad = good;
    bad[4] = 99;
    spit(file, bad);
    CHECK_THROWS_AS(load_chunk_directory(file, 8, t), error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_chunk_directory(td.path / "absent.bin", 8, t), error);
    CHECK_THROWS_AS(load_name_directory(td.path / "absent.bin"), error);
  }
  SUBCASE("error carries bad_format code") {
    auto bad = good;
    bad[0] = 'X';
    spit(file, bad);
    try {
      load_chunk_directory(file, 8, t);
      FAIL("expected throw");
    } catch (const error &e) {
      CHECK(e.code() == errc::bad_format);
    }
  }
}
