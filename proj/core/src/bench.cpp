// SPDX-License-Identifier: Apache-2.0

#include <persistheap/bench.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include <persistheap/error.hpp>

namespace persistheap::bench {

namespace {

using clock = std::chrono::steady_clock;

double seconds_since(clock::time_point t0) {
  return std::chrono::duration<double>(clock::now() - t0).count();
}

}  // namespace

std::uint64_t bench_report::total_edges() const {
  std::uint64_t n = 0;
  for (const auto &it : iterations) n += it.edges;
  return n;
}

double bench_report::total_ingest_s() const {
  double s = 0;
  for (const auto &it : iterations) s += it.ingest_s;
  return s;
}

double bench_report::total_flush_s() const {
  double s = 0;
  for (const auto &it : iterations) s += it.flush_s;
  return s;
}

double bench_report::edges_per_second() const {
  const double t = total_ingest_s() + total_flush_s();
  return t > 0 ? static_cast<double>(total_edges()) / t : 0.0;
}

void bench_report::write_csv(std::ostream &os) const {
  os << "iteration,edges,ingest_s,flush_s\n";
  for (const auto &it : iterations) {
    os << it.iteration << ',' << it.edges << ',' << it.ingest_s << ','
       << it.flush_s << '\n';
  }
}

std::vector<edge> generate_chunk(const rmat_params &params,
                                 std::uint64_t chunk_index,
                                 std::uint64_t chunk_undirected) {
  if (std::abs(params.a + params.b + params.c + params.d - 1.0) > 1e-9) {
    throw_error(errc::invalid_argument, "quadrant probabilities must sum to 1");
  }
  std::mt19937_64 rng(mix64(params.seed) ^ mix64(chunk_index + 1));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const std::uint64_t mask = params.num_vertices() - 1;

  std::vector<edge> out;
  out.reserve(chunk_undirected * 2);
  for (std::uint64_t e = 0; e < chunk_undirected; ++e) {
    std::uint64_t src = 0;
    std::uint64_t dst = 0;
    for (unsigned level = 0; level < params.scale; ++level) {
      const double r = uni(rng);
      const bool src_bit = r >= params.a + params.b;
      const bool dst_bit =
          src_bit ? (r >= params.a + params.b + params.c) : (r >= params.a);
      src = (src << 1) | src_bit;
      dst = (dst << 1) | dst_bit;
    }
    if (params.scramble) {
      src = mix64(src) & mask;
      dst = mix64(dst) & mask;
    }
    out.emplace_back(src, dst);
    out.emplace_back(dst, src);
  }
  return out;
}

void ingest(banked_adjacency_list &graph, const std::vector<edge> &edges,
            unsigned threads) {
  if (threads <= 1) {
    for (const auto &[src, dst] : edges) graph.insert_edge(src, dst);
    return;
  }
  constexpr std::uint64_t k_grain = 1024;
  std::atomic<std::uint64_t> cursor{0};
  std::vector<std::thread> workers;
  workers.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    workers.emplace_back([&] {
      for (;;) {
        const std::uint64_t begin = cursor.fetch_add(k_grain);
        if (begin >= edges.size()) break;
        const std::uint64_t end =
            std::min<std::uint64_t>(begin + k_grain, edges.size());
        for (std::uint64_t i = begin; i < end; ++i) {
          graph.insert_edge(edges[i].first, edges[i].second);
        }
      }
    });
  }
  for (auto &w : workers) w.join();
}

bench_report run_bulk(const std::filesystem::path &store_path,
                      const rmat_params &params, unsigned threads,
                      std::uint64_t chunk_edges, manager_options opts) {
  if (std::filesystem::exists(store_path)) {
    throw_error(errc::already_exists,
                "benchmark store exists: " + store_path.string());
  }
  bench_report report;
  report.mode = "bulk";
  report.scale = params.scale;
  report.threads = threads;

  manager mgr = manager::create(store_path, opts);
  auto graph = banked_adjacency_list::create(mgr, "graph");

  const std::uint64_t total = params.undirected_edges();
  std::uint64_t done = 0;
  std::uint64_t chunk_index = 0;
  while (done < total) {
    const std::uint64_t n = std::min(chunk_edges, total - done);
    const auto edges = generate_chunk(params, chunk_index, n);  // untimed
    const auto t0 = clock::now();
    ingest(graph, edges, threads);
    report.iterations.push_back(
        {chunk_index, edges.size(), seconds_since(t0), 0.0});
    done += n;
    ++chunk_index;
  }
  const auto t0 = clock::now();
  mgr.close();
  if (!report.iterations.empty()) {
    report.iterations.back().flush_s = seconds_since(t0);
  }
  return report;
}

bench_report run_incremental(const std::filesystem::path &store_path,
                             const std::vector<std::vector<edge>> &batches,
                             bool private_batch, unsigned threads,
                             manager_options opts) {
  bench_report report;
  report.mode = "incremental";
  report.threads = threads;
  opts.private_batch = private_batch;

  for (std::size_t i = 0; i < batches.size(); ++i) {
    manager mgr = i == 0 ? manager::create(store_path, opts)
                         : manager::open(store_path, open_mode::open_only,
                                         private_batch, opts.populate);
    auto graph = i == 0 ? banked_adjacency_list::create(mgr, "graph")
                        : banked_adjacency_list::open(mgr, "graph");
    const auto t0 = clock::now();
    ingest(graph, batches[i], threads);
    const double ingest_s = seconds_since(t0);
    const auto t1 = clock::now();
    mgr.close();  // flush + serialize + unmap
    report.iterations.push_back(
        {i, batches[i].size(), ingest_s, seconds_since(t1)});
  }
  return report;
}

std::vector<std::vector<edge>> read_timestamped_batches(
    const std::filesystem::path &csv, unsigned n_batches) {
  if (n_batches == 0) {
    throw_error(errc::invalid_argument, "batch count must be positive");
  }
  std::ifstream is(csv);
  if (!is) {
    throw_error(errc::not_found, "cannot open edge list " + csv.string());
  }
  struct row {
    std::uint64_t src, dst;
    std::int64_t ts;
  };
  std::vector<row> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f0, f1, f2;
    if (!std::getline(ls, f0, ',') || !std::getline(ls, f1, ',') ||
        !std::getline(ls, f2, ',')) {
      throw_error(errc::bad_format, "edge list row needs src,dst,timestamp");
    }
    try {
      rows.push_back({std::stoull(f0), std::stoull(f1), std::stoll(f2)});
    } catch (const std::exception &) {
      if (rows.empty()) continue;  // header line
      throw_error(errc::bad_format, "non-numeric edge list row: " + line);
    }
  }
  std::vector<std::vector<edge>> batches(n_batches);
  if (rows.empty()) return batches;
  std::int64_t lo = rows.front().ts, hi = rows.front().ts;
  for (const auto &r : rows) {
    lo = std::min(lo, r.ts);
    hi = std::max(hi, r.ts);
  }
  const double width = static_cast<double>(hi - lo + 1) / n_batches;
  for (const auto &r : rows) {
    auto b = static_cast<std::size_t>(static_cast<double>(r.ts - lo) / width);
    if (b >= n_batches) b = n_batches - 1;
    batches[b].emplace_back(r.src, r.dst);
  }
  return batches;
}

}  // namespace persistheap::bench
