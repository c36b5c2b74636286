// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <persistheap/error.hpp>
#include <persistheap/manager.hpp>

using namespace persistheap;
namespace fs = std::filesystem;

namespace {

// Small geometry so multi-chunk behavior shows up quickly.
manager_options small_opts() {
  manager_options o;
  o.chunk_size = 1 << 16;       // 64 KiB
  o.file_size = 1 << 20;        // 1 MiB
  o.reservation = 64 << 20;     // 64 MiB
  return o;
}

struct temp_store {
  fs::path path;
  temp_store() {
    path = fs::temp_directory_path() /
           ("ph_mgr_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
  }
  ~temp_store() { fs::remove_all(path); }
  static int &counter() {
    static int c = 0;
    return c;
  }
};

// Runs fn in a forked child; the child's exit code must be 0.
void in_child(const std::function<void()> &fn) {
  const pid_t pid = ::fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    try {
      fn();
      ::_exit(0);
    } catch (...) {
      ::_exit(1);
    }
  }
  int status = 0;
  REQUIRE(::waitpid(pid, &status, 0) == pid);
  REQUIRE(WIFEXITED(status));
  REQUIRE(WEXITSTATUS(status) == 0);
}

}  // namespace

TEST_CASE("deterministic small placement from a fresh store") {
  temp_store ts;
  auto m = manager::create(ts.path, small_opts());
  // First chunk, first slot, lowest class: offset 0.
  CHECK(m.allocate(8) == 0);
  CHECK(m.allocate(8) == 8);
  CHECK(m.allocate(8) == 16);
  // A different class opens the next empty chunk.
  CHECK(m.allocate(16) == m.table().chunk_size());
  CHECK(m.allocate(9) == m.table().chunk_size() + 16);
  m.audit();
  m.close();
}

TEST_CASE("small slots recycle lowest-first after a drain") {
  temp_store ts;
  manager_options o = small_opts();
  o.cache_budget_bytes = 0;  // frees go straight back to the bitset
  auto m = manager::create(ts.path, o);
  std::vector<std::uint64_t> offs;
  for (int i = 0; i < 10; ++i) offs.push_back(m.allocate(32));
  m.deallocate(offs[7]);
  m.deallocate(offs[2]);
  m.deallocate(offs[4]);
  CHECK(m.allocate(32) == offs[2]);
  CHECK(m.allocate(32) == offs[4]);
  CHECK(m.allocate(32) == offs[7]);
  m.audit();
  m.close();
}

TEST_CASE("cache serves frees LIFO before the bitset") {
  temp_store ts;
  auto m = manager::create(ts.path, small_opts());  // default cache budget
  std::vector<std::uint64_t> offs;
  for (int i = 0; i < 10; ++i) offs.push_back(m.allocate(32));
  m.deallocate(offs[2]);
  m.deallocate(offs[7]);
  // LIFO: the most recent free comes back first even though 2 < 7.
  CHECK(m.allocate(32) == offs[7]);
  CHECK(m.allocate(32) == offs[2]);
  m.audit();
  m.close();
}

TEST_CASE("large allocations take contiguous power-of-two spans") {
  temp_store ts;
  auto m = manager::create(ts.path, small_opts());
  const auto cs = m.table().chunk_size();
  const auto a = m.allocate(cs / 2 + 1);  // 1 chunk
  const auto b = m.allocate(cs + 1);      // 2 chunks
  const auto c = m.allocate(3 * cs);      // 4 chunks
  CHECK(a % cs == 0);
  CHECK(b % cs == 0);
  CHECK(c % cs == 0);
  CHECK(b == a + cs);
  CHECK(c == b + 2 * cs);
  auto states = m.chunk_states();
  CHECK(states[a / cs].kind == chunk_kind::large_head);
  CHECK(states[b / cs].span_chunks == 2);
  CHECK(states[b / cs + 1].kind == chunk_kind::large_body);
  m.deallocate(b);
  CHECK(m.chunk_states()[b / cs].kind == chunk_kind::empty);
  // The freed span is reused lowest-first.
  CHECK(m.allocate(2 * cs) == b);
  m.audit();
  m.close();
}

TEST_CASE("allocation errors") {
  temp_store ts;
  auto m = manager::create(ts.path, small_opts());
  CHECK_THROWS_AS(m.allocate(0), error);
  // Beyond the reservation.
  CHECK_THROWS_AS(m.allocate(std::uint64_t{128} << 20), error);
  const auto off = m.allocate(64);
  m.deallocate(off);
  CHECK_THROWS_AS(m.deallocate(off), error);        // double free
  CHECK_THROWS_AS(m.deallocate(3), error);          // unaligned
  CHECK_THROWS_AS(m.deallocate(std::uint64_t{60} << 20), error);  // untracked
  m.close();
}

TEST_CASE("named objects round trip through sessions") {
  temp_store ts;
  {
    auto m = manager::create(ts.path, small_opts());
    const auto off = m.construct_named("counters", 8, 100, "u64");
    auto *p = reinterpret_cast<std::uint64_t *>(m.resolve(off));
    for (int i = 0; i < 100; ++i) CHECK(p[i] == 0);  // zero-initialized
    for (int i = 0; i < 100; ++i) p[i] = i * 3 + 1;
    CHECK_THROWS_AS(m.construct_named("counters", 8, 1), error);
    m.close();
  }
  in_child([&] {
    auto m = manager::open(ts.path, open_mode::open_only);
    auto rec = m.find_named("counters");
    if (!rec || rec->length != 100 || rec->element_size != 8 ||
        rec->type_tag != "u64") {
      throw std::runtime_error("bad record");
    }
    auto *p = reinterpret_cast<std::uint64_t *>(m.resolve(rec->offset));
    for (std::uint64_t i = 0; i < 100; ++i) {
      if (p[i] != i * 3 + 1) throw std::runtime_error("bad payload");
    }
    p[0] = 777;
    m.close();
  });
  {
    auto m = manager::open(ts.path, open_mode::open_only);
    auto rec = m.find_named("counters");
    REQUIRE(rec.has_value());
    CHECK(reinterpret_cast<std::uint64_t *>(m.resolve(rec->offset))[0] == 777);
    CHECK(m.destroy_named("counters"));
    CHECK(!m.destroy_named("counters"));
    CHECK(!m.find_named("counters").has_value());
    m.audit();
    m.close();
  }
}

TEST_CASE("open failure modes") {
  temp_store ts;
  CHECK_THROWS_AS(manager::open(ts.path, open_mode::open_only), error);
  {
    auto m = manager::create(ts.path, small_opts());
    m.close();
    CHECK_THROWS_AS(m.close(), error);
    CHECK_THROWS_AS(m.allocate(8), error);
    CHECK(m.closed());
  }
  CHECK_THROWS_AS(manager::create(ts.path), error);  // already exists
  {
    auto m = manager::open(ts.path, open_mode::open_read_only);
    CHECK(m.read_only());
    CHECK_THROWS_AS(m.allocate(8), error);
    CHECK_THROWS_AS(m.construct_named("x", 8, 1), error);
    CHECK_THROWS_AS(m.destroy_named("x"), error);
    m.close();
  }
}

TEST_CASE("info reports live bytes and capabilities") {
  temp_store ts;
  auto m = manager::create(ts.path, small_opts());
  auto i0 = m.info();
  CHECK(i0.bytes_live == 0);
  CHECK(i0.named_objects == 0);

  m.allocate(32);
  m.allocate(60);               // class 64
  const auto cs = i0.chunk_size;
  m.allocate(cs + 1);           // 2 chunks
  m.construct_named("v", 8, 4);

  auto i1 = m.info();
  CHECK(i1.chunk_size == (1u << 16));
  CHECK(i1.bytes_live == 32 + 64 + 2 * cs + 32);
  CHECK(i1.named_objects == 1);
  CHECK(i1.chunks_large_head == 1);
  CHECK(i1.chunks_large_body == 1);
  CHECK(i1.chunks_small == 2);  // the named 8*4 rounds to class 32, chunk 0
  CHECK(i1.pagemap_available == bs_msync::pagemap_available());
  m.close();
}

TEST_CASE("small-path lock discipline") {
  temp_store ts;
  manager_options o = small_opts();
  o.cache_budget_bytes = 0;
  auto m = manager::create(ts.path, o);
  const auto slots_per_chunk = (1 << 16) / 64;  // class 64
  // Fill one chunk exactly: one refill when the bin is first empty.
  std::vector<std::uint64_t> offs;
  for (int i = 0; i < slots_per_chunk; ++i) offs.push_back(m.allocate(64));
  auto ev = m.lock_events();
  CHECK(ev.bin_refill == 1);
  CHECK(ev.last_slot_release == 0);
  CHECK(ev.other == 0);
  // Steady-state churn in a non-full, non-empty chunk: no chunk-lock trips.
  offs.push_back(m.allocate(64));  // second chunk: one more refill
  m.deallocate(offs.back());
  offs.pop_back();
  ev = m.lock_events();
  CHECK(ev.bin_refill == 2);
  CHECK(ev.last_slot_release == 1);  // chunk 2 emptied by that free
  for (int i = 0; i < 100; ++i) {
    m.deallocate(offs.back());
    offs.pop_back();
  }
  m.deallocate(offs[0]);
  offs.erase(offs.begin());
  for (int i = 0; i < 50; ++i) offs.push_back(m.allocate(64));
  ev = m.lock_events();
  CHECK(ev.bin_refill == 2);
  CHECK(ev.last_slot_release == 1);
  CHECK(ev.other == 0);
  m.audit();
  m.close();
}

TEST_CASE("multithreaded churn keeps every invariant") {
  temp_store ts;
  auto m = manager::create(ts.path, small_opts());
  constexpr int k_threads = 4;
  constexpr int k_ops = 20000;
  std::vector<std::thread> workers;
  for (int t = 0; t < k_threads; ++t) {
    workers.emplace_back([&, t] {
      std::mt19937_64 rng(1000 + t);
      std::vector<std::pair<std::uint64_t, std::uint64_t>> live;  // off, size
      for (int i = 0; i < k_ops; ++i) {
        if (live.empty() || rng() % 5 < 3) {
          const std::uint64_t n = 1 + rng() % 300;
          const auto off = m.allocate(n);
          std::memset(m.resolve(off), static_cast<int>(t + 1), n);
          live.emplace_back(off, n);
        } else {
          const auto idx = rng() % live.size();
          m.deallocate(live[idx].first);
          live[idx] = live.back();
          live.pop_back();
        }
      }
      for (auto &[off, n] : live) m.deallocate(off);
    });
  }
  for (auto &w : workers) w.join();
  m.flush();  // drains every thread cache
  m.audit();
  auto info = m.info();
  CHECK(info.bytes_live == 0);
  CHECK(m.lock_events().other == 0);
  m.close();
}

TEST_CASE("flushed data survives a crash; private-batch writes do not leak") {
  temp_store ts;
  // Session 1 (crashes without close): everything before flush() must land.
  in_child([&] {
    auto m = manager::create(ts.path, small_opts());
    const auto off = m.construct_named("v", 8, 3);
    auto *p = reinterpret_cast<std::uint64_t *>(m.resolve(off));
    p[0] = 10;
    p[1] = 20;
    p[2] = 30;
    m.flush();
    ::_exit(0);  // crash: no close
  });
  {
    auto m = manager::open(ts.path, open_mode::open_only);
    auto rec = m.find_named("v");
    REQUIRE(rec.has_value());
    auto *p = reinterpret_cast<std::uint64_t *>(m.resolve(rec->offset));
    CHECK(p[0] == 10);
    CHECK(p[1] == 20);
    CHECK(p[2] == 30);
    m.close();
  }
  // Session 2 (private batch, crashes before flush): the store is untouched.
  in_child([&] {
    auto m = manager::open(ts.path, open_mode::open_only, /*private_batch=*/true);
    auto rec = m.find_named("v");
    auto *p = reinterpret_cast<std::uint64_t *>(m.resolve(rec->offset));
    p[0] = 999;
    ::_exit(0);  // crash before flush
  });
  {
    auto m = manager::open(ts.path, open_mode::open_only);
    auto rec = m.find_named("v");
    REQUIRE(rec.has_value());
    CHECK(reinterpret_cast<std::uint64_t *>(m.resolve(rec->offset))[0] == 10);
    m.close();
  }
}

TEST_CASE("snapshot is an independent, isolated copy") {
  temp_store ts;
  temp_store snap;
  auto m = manager::create(ts.path, small_opts());
  const auto off = m.construct_named("v", 8, 8);
  auto *p = reinterpret_cast<std::uint64_t *>(m.resolve(off));
  for (int i = 0; i < 8; ++i) p[i] = i;
  const auto how = m.snapshot(snap.path);
  CHECK((how == snapshot_method::cloned || how == snapshot_method::copied));
  CHECK_THROWS_AS(m.snapshot(snap.path), error);  // destination exists

  // Mutate the source after the snapshot.
  for (int i = 0; i < 8; ++i) p[i] = 1000 + i;
  m.flush();
  {
    auto s = manager::open(snap.path, open_mode::open_only);
    auto rec = s.find_named("v");
    REQUIRE(rec.has_value());
    auto *q = reinterpret_cast<std::uint64_t *>(s.resolve(rec->offset));
    for (std::uint64_t i = 0; i < 8; ++i) CHECK(q[i] == i);
    // And mutating the snapshot leaves the source alone.
    q[0] = 42;
    s.flush();
    s.audit();
    s.close();
  }
  m.close();
  auto m2 = manager::open(ts.path, open_mode::open_only);
  auto rec = m2.find_named("v");
  CHECK(reinterpret_cast<std::uint64_t *>(m2.resolve(rec->offset))[0] == 1000);
  m2.close();
}
