// SPDX-License-Identifier: Apache-2.0

#ifndef PERSISTHEAP_MANAGER_HPP
#define PERSISTHEAP_MANAGER_HPP

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <persistheap/management.hpp>
#include <persistheap/segment.hpp>
#include <persistheap/size_class_table.hpp>

namespace persistheap {

struct manager_options {
  std::uint64_t reservation = k_default_reservation;
  std::uint64_t chunk_size = k_default_chunk_size;
  std::uint64_t file_size = k_default_file_size;
  bool private_batch = false;
  bool populate = false;
  std::uint64_t cache_budget_bytes = 256 * 1024;  // per thread
};

enum class open_mode { open_only, open_read_only };

struct manager_info {
  std::uint64_t chunk_size = 0;
  std::uint64_t file_size = 0;
  std::uint64_t reservation = 0;
  std::uint64_t num_files = 0;
  std::uint64_t chunks_empty = 0;
  std::uint64_t chunks_small = 0;
  std::uint64_t chunks_large_head = 0;
  std::uint64_t chunks_large_body = 0;
  std::uint64_t bytes_live = 0;  // occupied slots + large spans, class-rounded
  std::uint64_t named_objects = 0;
  std::vector<std::pair<std::size_t, std::size_t>> nonfull_bins;  // bin, count
  bool can_punch_holes = false;
  bool can_reflink = false;
  bool pagemap_available = false;
};

// Chunk-directory lock acquisitions from the small-object paths, by reason.
// Small allocation/deallocation touches the shared chunk lock only to refill
// an empty bin or to release a chunk whose last slot was freed; `other` must
// stay zero.
struct lock_event_counts {
  std::uint64_t bin_refill = 0;
  std::uint64_t last_slot_release = 0;
  std::uint64_t other = 0;
};

enum class snapshot_method { cloned, copied };

class object_cache;

// The persistent heap. One manager owns one datastore directory; multiple
// managers with independent datastores can coexist in a process. Thread-safe
// under one mutex for the chunk directory, one for the name directory, and
// one per bin; small frees go through per-thread object caches first.
class manager {
 public:
  static manager create(const std::filesystem::path &path,
                        const manager_options &opts = {});
  static manager open(const std::filesystem::path &path, open_mode mode,
                      bool private_batch = false, bool populate = false);

  ~manager();
  manager(manager &&other) noexcept;
  manager &operator=(manager &&) = delete;
  manager(const manager &) = delete;
  manager &operator=(const manager &) = delete;

  // Returns the datastore offset of a fresh allocation of n bytes. Offsets
  // are 8-byte aligned and class-aligned for small requests. Contents of
  // recycled small slots are unspecified.
  std::uint64_t allocate(std::uint64_t n);
  void deallocate(std::uint64_t offset);

  // Allocates element_size * length zero-initialized bytes and records them
  // under `name` for reattachment in later sessions.
  std::uint64_t construct_named(const std::string &name,
                                std::uint64_t element_size,
                                std::uint64_t length,
                                const std::string &type_tag = "");
  std::optional<name_record> find_named(const std::string &name) const;
  bool destroy_named(const std::string &name);

  // Drains caches, writes the management files and manifest, and syncs the
  // segment. Persistence is guaranteed only at these points.
  bs_msync::flush_stats flush();
  void close();

  // Copies the datastore to dst as an independently openable store. Uses
  // filesystem block cloning when available, sparse byte copy otherwise.
  snapshot_method snapshot(const std::filesystem::path &dst);

  manager_info info() const;

  std::byte *base() const;
  std::byte *resolve(std::uint64_t offset) const { return base() + offset; }
  const size_class_table &table() const;
  const std::filesystem::path &path() const;
  bool read_only() const;
  bool closed() const noexcept { return core_ == nullptr || is_closed(); }

  // --- introspection (info, tests, the audit walk) ---
  struct chunk_state {
    chunk_kind kind;
    std::uint8_t bin;
    std::uint32_t span_chunks;
    std::uint32_t occupancy;
    std::uint32_t num_slots;
  };
  std::vector<chunk_state> chunk_states() const;
  lock_event_counts lock_events() const;

  // Full consistency walk over chunk/bin/name directories; throws on any
  // violated invariant. Takes every lock; call from quiescent tests.
  void audit() const;

  struct core;  // implementation state; opaque outside manager.cpp

 private:
  manager() = default;
  bool is_closed() const;
  core &require_open() const;
  core &require_writable() const;

  std::unique_ptr<core> core_;
};

}  // namespace persistheap

#endif  // PERSISTHEAP_MANAGER_HPP
