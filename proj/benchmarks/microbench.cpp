// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <benchmark/benchmark.h>

#include <persistheap/containers.hpp>
#include <persistheap/manager.hpp>
#include <persistheap/multilayer_bitset.hpp>
#include <persistheap/size_class_table.hpp>

using namespace persistheap;
namespace fs = std::filesystem;

namespace {

struct temp_store {
  fs::path path;
  temp_store() {
    path = fs::temp_directory_path() /
           ("ph_microbench_" + std::to_string(::getpid()));
    fs::remove_all(path);
  }
  ~temp_store() { fs::remove_all(path); }
};

manager_options bench_opts() {
  manager_options o;
  o.chunk_size = 1 << 21;
  o.file_size = 64 << 20;
  o.reservation = std::uint64_t{1} << 30;
  return o;
}

}  // namespace

static void BM_class_for(benchmark::State &state) {
  size_class_table t;
  std::mt19937_64 rng(1);
  std::vector<std::uint64_t> requests(4096);
  for (auto &r : requests) r = 1 + rng() % t.half_chunk();
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(t.class_for(requests[i++ & 4095]));
  }
}
BENCHMARK(BM_class_for);

static void BM_bin_for(benchmark::State &state) {
  size_class_table t;
  std::mt19937_64 rng(2);
  std::vector<std::uint64_t> requests(4096);
  for (auto &r : requests) r = 1 + rng() % t.half_chunk();
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(t.bin_for(requests[i++ & 4095]));
  }
}
BENCHMARK(BM_bin_for);

static void BM_bitset_search(benchmark::State &state) {
  const auto slots = static_cast<std::uint32_t>(state.range(0));
  multilayer_bitset mb(slots);
  // Hold the bitset at half load; time one search+release round trip.
  for (std::uint32_t i = 0; i < slots / 2; ++i) mb.find_and_set_first_free();
  for (auto _ : state) {
    auto s = mb.find_and_set_first_free();
    benchmark::DoNotOptimize(s);
    if (s) mb.clear(*s);
  }
}
BENCHMARK(BM_bitset_search)->Arg(64)->Arg(64 * 64)->Arg(64 * 64 * 64);

static void BM_small_alloc_free(benchmark::State &state) {
  temp_store ts;
  auto m = manager::create(ts.path, bench_opts());
  const auto size = static_cast<std::uint64_t>(state.range(0));
  for (auto _ : state) {
    const auto off = m.allocate(size);
    benchmark::DoNotOptimize(off);
    m.deallocate(off);
  }
  m.close();
}
BENCHMARK(BM_small_alloc_free)->Arg(8)->Arg(64)->Arg(4096)->Arg(64 * 1024);

static void BM_large_alloc_free(benchmark::State &state) {
  temp_store ts;
  auto m = manager::create(ts.path, bench_opts());
  const auto size = static_cast<std::uint64_t>(state.range(0));
  for (auto _ : state) {
    const auto off = m.allocate(size);
    benchmark::DoNotOptimize(off);
    m.deallocate(off);
  }
  m.close();
}
BENCHMARK(BM_large_alloc_free)->Arg(2 << 20)->Arg(8 << 20);

static void BM_edge_insert(benchmark::State &state) {
  temp_store ts;
  auto m = manager::create(ts.path, bench_opts());
  auto g = banked_adjacency_list::create(m, "graph");
  std::mt19937_64 rng(3);
  for (auto _ : state) {
    g.insert_edge(rng() % 65536, rng() % 65536);
  }
  state.SetItemsProcessed(state.iterations());
  m.close();
}
BENCHMARK(BM_edge_insert);
