// SPDX-License-Identifier: Apache-2.0

#ifndef PERSISTHEAP_SEGMENT_HPP
#define PERSISTHEAP_SEGMENT_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <vector>

#include <persistheap/bs_msync.hpp>

namespace persistheap {

inline constexpr std::uint64_t k_default_file_size = std::uint64_t{256} << 20;
inline constexpr std::uint64_t k_default_reservation = std::uint64_t{1} << 40;

enum class segment_mode {
  read_write,     // shared mappings, kernel write-back
  read_only,      // write-protected shared mappings
  private_batch,  // copy-on-write mappings, user-space batch write-back
};

// Versioned on-disk description of a datastore.
struct datastore_manifest {
  std::uint64_t chunk_size = 0;
  std::uint64_t file_size = 0;
  std::uint64_t reservation = 0;
  std::uint64_t num_files = 0;

  void save(const std::filesystem::path &file) const;
  static datastore_manifest load(const std::filesystem::path &file);
};

// A contiguous reserved address range with numbered backing files mapped
// into it on demand:
//   <root>/manifest
//   <root>/management/chunks.bin, names.bin   (written by the manager)
//   <root>/segment/seg-00000, seg-00001, ...
//
// Files are created sparse; physical and file blocks are consumed only for
// pages actually touched.
class segment {
 public:
  static segment create(const std::filesystem::path &root,
                        std::uint64_t reservation, std::uint64_t chunk_size,
                        std::uint64_t file_size, segment_mode mode,
                        bool populate = false);
  static segment open(const std::filesystem::path &root, segment_mode mode,
                      bool populate = false);

  ~segment();
  segment(segment &&other) noexcept;
  segment &operator=(segment &&) = delete;
  segment(const segment &) = delete;
  segment &operator=(const segment &) = delete;

  std::byte *base() const noexcept { return base_; }
  std::uint64_t reservation() const noexcept { return manifest_.reservation; }
  std::uint64_t chunk_size() const noexcept { return manifest_.chunk_size; }
  std::uint64_t file_size() const noexcept { return manifest_.file_size; }
  std::uint64_t num_mapped_files() const noexcept { return manifest_.num_files; }
  segment_mode mode() const noexcept { return mode_; }
  const std::filesystem::path &root() const noexcept { return root_; }
  bool can_punch_holes() const noexcept { return can_punch_; }

  // Creates and maps backing files until coverage >= upto bytes. Idempotent.
  void ensure_mapped(std::uint64_t upto);

  // Releases file blocks and cached pages of a chunk range (hole punch);
  // the range subsequently reads as zeros. Downgrades to page-cache release
  // when the filesystem cannot punch. No-op in private_batch mode, where
  // local copies are the data of record until the next flush.
  void free_chunk_space(std::uint64_t chunk_index, std::uint64_t n_chunks);

  // Makes all dirty content durable. Shared mode: kernel sync per file.
  // private_batch: user-space batch write-back, one worker per file.
  bs_msync::flush_stats flush(bool sync = true);

  // Rewrites the manifest (num_files grows as files are added).
  void sync_manifest() const;

 private:
  segment() = default;
  void map_file(std::uint64_t index);

  std::filesystem::path root_;
  datastore_manifest manifest_;
  segment_mode mode_ = segment_mode::read_write;
  bool populate_ = false;
  std::byte *base_ = nullptr;
  std::vector<int> fds_;
  std::vector<bs_msync::private_mapping> private_maps_;
  bool can_punch_ = true;
  std::mutex grow_mutex_;
};

}  // namespace persistheap

#endif  // PERSISTHEAP_SEGMENT_HPP
