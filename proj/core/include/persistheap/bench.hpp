// SPDX-License-Identifier: Apache-2.0

#ifndef PERSISTHEAP_BENCH_HPP
#define PERSISTHEAP_BENCH_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <persistheap/containers.hpp>
#include <persistheap/manager.hpp>

namespace persistheap::bench {

using edge = std::pair<std::uint64_t, std::uint64_t>;

// Recursive-matrix graph model. SCALE s gives 2^s vertices and 2^s * 16
// undirected edges; both directions are inserted, so 2^s * 16 * 2 directed
// insertions. Quadrant probabilities default to the Graph500 convention.
struct rmat_params {
  unsigned scale = 16;
  std::uint64_t edge_factor = 16;
  double a = 0.57;
  double b = 0.19;
  double c = 0.19;
  double d = 0.05;
  std::uint64_t seed = 1;
  bool scramble = true;

  std::uint64_t num_vertices() const { return std::uint64_t{1} << scale; }
  std::uint64_t undirected_edges() const { return num_vertices() * edge_factor; }
};

struct bench_iteration {
  std::uint64_t iteration = 0;
  std::uint64_t edges = 0;  // directed insertions
  double ingest_s = 0.0;
  double flush_s = 0.0;
};

struct bench_report {
  std::string mode;
  unsigned scale = 0;
  unsigned threads = 1;
  std::vector<bench_iteration> iterations;

  std::uint64_t total_edges() const;
  double total_ingest_s() const;
  double total_flush_s() const;
  double edges_per_second() const;  // over ingest + flush

  // CSV rows: iteration,edges,ingest_s,flush_s
  void write_csv(std::ostream &os) const;
};

// Directed edge pairs for one chunk of chunk_undirected undirected edges;
// deterministic for (params.seed, chunk_index). Both directions emitted.
std::vector<edge> generate_chunk(const rmat_params &params,
                                 std::uint64_t chunk_index,
                                 std::uint64_t chunk_undirected);

// Inserts [begin, end) of edges with `threads` workers pulling ranges from a
// shared cursor; per-bank locks are the only graph-side synchronization.
void ingest(banked_adjacency_list &graph, const std::vector<edge> &edges,
            unsigned threads);

// One-shot build: fresh datastore, named graph "graph", edges generated in
// chunks (generation excluded from timing), one final timed flush+close.
bench_report run_bulk(const std::filesystem::path &store_path,
                      const rmat_params &params, unsigned threads,
                      std::uint64_t chunk_edges,
                      manager_options opts = {});

// Session-per-batch build: iteration 0 creates the store, every later
// iteration opens, ingests, flushes, closes. private_batch selects the
// user-space batch write-back flush path.
bench_report run_incremental(const std::filesystem::path &store_path,
                             const std::vector<std::vector<edge>> &batches,
                             bool private_batch, unsigned threads = 1,
                             manager_options opts = {});

// Reads a CSV edge list (src,dst,timestamp; optional header line) and
// partitions it into n_batches by equal-width timestamp ranges.
std::vector<std::vector<edge>> read_timestamped_batches(
    const std::filesystem::path &csv, unsigned n_batches);

}  // namespace persistheap::bench

#endif  // PERSISTHEAP_BENCH_HPP
