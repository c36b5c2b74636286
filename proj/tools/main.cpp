// SPDX-License-Identifier: Apache-2.0
//
// persistheap command line tool: create, inspect, snapshot, and benchmark
// persistent datastores.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include <persistheap/bench.hpp>
#include <persistheap/containers.hpp>
#include <persistheap/error.hpp>
#include <persistheap/manager.hpp>

namespace {

// Exit codes: 0 success, 2 usage error, 3 malformed datastore, 4 I/O
// failure, 5 capability unsupported on this system.
constexpr int k_exit_usage = 2;
constexpr int k_exit_format = 3;
constexpr int k_exit_io = 4;
constexpr int k_exit_unsupported = 5;

int exit_code_for(persistheap::errc code) {
  using persistheap::errc;
  switch (code) {
    case errc::invalid_argument:
    case errc::out_of_domain:
      return k_exit_usage;
    case errc::bad_format:
      return k_exit_format;
    case errc::unsupported:
      return k_exit_unsupported;
    default:
      return k_exit_io;
  }
}

std::uint64_t default_reservation() {
  if (const char *env = std::getenv("PERSISTHEAP_RESERVATION")) {
    try {
      return std::stoull(env);
    } catch (const std::exception &) {
      throw persistheap::error(persistheap::errc::invalid_argument,
                               "PERSISTHEAP_RESERVATION must be a byte count");
    }
  }
  return persistheap::k_default_reservation;
}

int cmd_create(const std::string &path, std::uint64_t reservation,
               std::uint64_t chunk_size, std::uint64_t file_size) {
  persistheap::manager_options opts;
  opts.reservation = reservation;
  opts.chunk_size = chunk_size;
  opts.file_size = file_size;
  auto m = persistheap::manager::create(path, opts);
  m.close();
  std::cout << "created datastore at " << path << "\n";
  return 0;
}

int cmd_info(const std::string &path, bool as_json) {
  auto m = persistheap::manager::open(path,
                                      persistheap::open_mode::open_read_only);
  const auto info = m.info();
  m.close();
  if (as_json) {
    nlohmann::json j{
        {"chunk_size", info.chunk_size},
        {"file_size", info.file_size},
        {"reservation", info.reservation},
        {"num_files", info.num_files},
        {"chunks", {{"empty", info.chunks_empty},
                    {"small", info.chunks_small},
                    {"large_head", info.chunks_large_head},
                    {"large_body", info.chunks_large_body}}},
        {"bytes_live", info.bytes_live},
        {"named_objects", info.named_objects},
        {"capabilities", {{"punch_holes", info.can_punch_holes},
                          {"reflink", info.can_reflink},
                          {"pagemap", info.pagemap_available}}},
    };
    auto bins = nlohmann::json::array();
    for (const auto &[bin, count] : info.nonfull_bins) {
      bins.push_back({{"bin", bin}, {"chunks", count}});
    }
    j["nonfull_bins"] = bins;
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  std::cout << "chunk size:     " << info.chunk_size << "\n"
            << "file size:      " << info.file_size << "\n"
            << "reservation:    " << info.reservation << "\n"
            << "backing files:  " << info.num_files << "\n"
            << "chunks:         " << info.chunks_small << " small, "
            << info.chunks_large_head << " large ("
            << info.chunks_large_body << " body), " << info.chunks_empty
            << " empty\n"
            << "bytes live:     " << info.bytes_live << "\n"
            << "named objects:  " << info.named_objects << "\n"
            << "capabilities:   punch=" << (info.can_punch_holes ? "yes" : "no")
            << " reflink=" << (info.can_reflink ? "yes" : "no")
            << " pagemap=" << (info.pagemap_available ? "yes" : "no") << "\n";
  return 0;
}

int cmd_snapshot(const std::string &src, const std::string &dst) {
  auto m = persistheap::manager::open(src, persistheap::open_mode::open_only);
  const auto how = m.snapshot(dst);
  m.close();
  std::cout << "snapshot written to " << dst << " ("
            << (how == persistheap::snapshot_method::cloned ? "cloned"
                                                            : "copied")
            << ")\n";
  return 0;
}

bool verify_against_oracle(const std::filesystem::path &store,
                           const std::vector<std::vector<persistheap::bench::edge>> &batches) {
  std::multiset<std::pair<std::uint64_t, std::uint64_t>> want;
  for (const auto &b : batches) {
    for (const auto &e : b) want.insert(e);
  }
  auto m = persistheap::manager::open(store,
                                      persistheap::open_mode::open_only);
  auto g = persistheap::banked_adjacency_list::open(m, "graph");
  std::multiset<std::pair<std::uint64_t, std::uint64_t>> got;
  g.for_each_edge(
      [&](std::uint64_t s, std::uint64_t d) { got.insert({s, d}); });
  m.audit();
  m.close();
  return got == want;
}

struct bench_args {
  std::string store;
  std::string mode = "bulk";
  std::string csv_out;
  std::string edges_csv;
  unsigned scale = 16;
  std::uint64_t edge_factor = 16;
  unsigned threads = 1;
  unsigned batches = 8;
  std::uint64_t seed = 1;
  std::uint64_t chunk_edges = 1 << 20;
  bool private_batch = false;
  bool verify = false;
};

int cmd_bench(const bench_args &a) {
  using namespace persistheap::bench;
  rmat_params params;
  params.scale = a.scale;
  params.edge_factor = a.edge_factor;
  params.seed = a.seed;

  persistheap::manager_options opts;
  opts.reservation = default_reservation();

  bench_report report;
  std::vector<std::vector<edge>> batches;
  if (a.mode == "bulk") {
    report = run_bulk(a.store, params, a.threads, a.chunk_edges, opts);
    std::uint64_t done = 0, chunk = 0;
    if (a.verify) {
      while (done < params.undirected_edges()) {
        const auto n =
            std::min(a.chunk_edges, params.undirected_edges() - done);
        batches.push_back(generate_chunk(params, chunk, n));
        done += n;
        ++chunk;
      }
    }
  } else if (a.mode == "incremental") {
    if (!a.edges_csv.empty()) {
      batches = read_timestamped_batches(a.edges_csv, a.batches);
    } else {
      const auto per_batch =
          (params.undirected_edges() + a.batches - 1) / a.batches;
      for (unsigned b = 0; b < a.batches; ++b) {
        const auto lo = std::uint64_t{b} * per_batch;
        const auto n =
            std::min<std::uint64_t>(per_batch, params.undirected_edges() - lo);
        if (n == 0) break;
        batches.push_back(generate_chunk(params, b, n));
      }
    }
    report = run_incremental(a.store, batches, a.private_batch, a.threads, opts);
  } else {
    std::cerr << "unknown bench mode: " << a.mode << "\n";
    return k_exit_usage;
  }
  report.scale = params.scale;

  if (!a.csv_out.empty()) {
    std::ofstream f(a.csv_out);
    if (!f) {
      std::cerr << "cannot write " << a.csv_out << "\n";
      return k_exit_io;
    }
    report.write_csv(f);
  } else {
    report.write_csv(std::cout);
  }
  std::cerr << report.mode << " scale=" << report.scale
            << " threads=" << report.threads << ": " << report.total_edges()
            << " edges in " << report.total_ingest_s() << "s ingest + "
            << report.total_flush_s() << "s flush ("
            << static_cast<std::uint64_t>(report.edges_per_second())
            << " edges/s)\n";

  if (a.verify) {
    if (!verify_against_oracle(a.store, batches)) {
      std::cerr << "verification FAILED: stored graph differs from oracle\n";
      return 1;
    }
    std::cerr << "verification passed\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"persistheap datastore tool"};
  app.require_subcommand(1);

  std::string path, dst;
  std::uint64_t chunk_size = persistheap::k_default_chunk_size;
  std::uint64_t file_size = persistheap::k_default_file_size;
  std::uint64_t reservation = 0;
  bool as_json = false;
  bench_args bargs;

  auto *create = app.add_subcommand("create", "create an empty datastore");
  create->add_option("path", path, "datastore directory")->required();
  create->add_option("--chunk-size", chunk_size, "chunk bytes (power of two)");
  create->add_option("--file-size", file_size, "backing file bytes");
  create->add_option("--reservation", reservation, "address reservation bytes");

  auto *info = app.add_subcommand("info", "describe a datastore");
  info->add_option("path", path, "datastore directory")->required();
  info->add_flag("--json", as_json, "machine-readable output");

  auto *snapshot = app.add_subcommand("snapshot", "copy a datastore");
  snapshot->add_option("src", path, "source datastore")->required();
  snapshot->add_option("dst", dst, "snapshot destination")->required();

  auto *bench = app.add_subcommand("bench", "graph ingestion benchmark");
  bench->add_option("store", bargs.store, "datastore directory")->required();
  bench->add_option("--mode", bargs.mode, "bulk or incremental");
  bench->add_option("--scale", bargs.scale, "log2 of the vertex count");
  bench->add_option("--edge-factor", bargs.edge_factor, "edges per vertex");
  bench->add_option("--threads", bargs.threads, "ingest worker threads");
  bench->add_option("--batches", bargs.batches, "incremental batch count");
  bench->add_option("--seed", bargs.seed, "generator seed");
  bench->add_option("--chunk-edges", bargs.chunk_edges,
                    "undirected edges generated per chunk");
  bench->add_option("--csv", bargs.csv_out, "write the per-iteration CSV here");
  bench->add_option("--edges-csv", bargs.edges_csv,
                    "ingest a src,dst,timestamp CSV instead of generating");
  bench->add_flag("--private-batch", bargs.private_batch,
                  "use copy-on-write batch write-back sessions");
  bench->add_flag("--verify", bargs.verify,
                  "check the stored graph against an in-memory oracle");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : k_exit_usage;
  }

  try {
    if (create->parsed()) {
      const auto resv = reservation ? reservation : default_reservation();
      return cmd_create(path, resv, chunk_size, file_size);
    }
    if (info->parsed()) return cmd_info(path, as_json);
    if (snapshot->parsed()) return cmd_snapshot(path, dst);
    if (bench->parsed()) return cmd_bench(bargs);
  } catch (const persistheap::error &e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return k_exit_io;
  }
  return k_exit_usage;
}
