// SPDX-License-Identifier: Apache-2.0

#ifndef PERSISTHEAP_BS_MSYNC_HPP
#define PERSISTHEAP_BS_MSYNC_HPP

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace persistheap::bs_msync {

// Maximal run of consecutive dirty pages.
struct dirty_run {
  std::uint64_t start_page = 0;
  std::uint64_t n_pages = 0;

  bool operator==(const dirty_run &) const = default;
};

struct flush_stats {
  std::uint64_t pages_scanned = 0;
  std::uint64_t pages_dirty = 0;
  std::uint64_t runs_written = 0;
  std::uint64_t bytes_written = 0;
  unsigned workers_used = 0;
};

// Whether /proc/self/pagemap is readable; without it the whole module
// reports unsupported and the segment stays in shared-mapping mode.
bool pagemap_available();

// Copy-on-write view of a file range. The kernel never writes updates back;
// write_back() detects dirty pages through the pagemap export and writes
// them itself. Does not own the file descriptor.
class private_mapping {
 public:
  // fixed_addr non-null maps at exactly that address (used by the segment to
  // install file views inside its reservation).
  private_mapping(int fd, std::uint64_t file_offset, std::uint64_t len,
                  bool populate, void *fixed_addr = nullptr,
                  bool writable = true);
  ~private_mapping();

  private_mapping(private_mapping &&other) noexcept;
  private_mapping &operator=(private_mapping &&other) noexcept;
  private_mapping(const private_mapping &) = delete;
  private_mapping &operator=(const private_mapping &) = delete;

  std::byte *data() const noexcept { return base_; }
  std::uint64_t len() const noexcept { return len_; }
  std::uint64_t file_offset() const noexcept { return file_offset_; }
  int fd() const noexcept { return fd_; }
  std::uint64_t page_size() const noexcept { return page_size_; }
  std::uint64_t n_pages() const noexcept { return (len_ + page_size_ - 1) / page_size_; }

  // A page is dirty iff pagemap bit 61 is zero and bit 62 or 63 is set.
  // Runs come back sorted, non-overlapping, maximal.
  std::vector<dirty_run> scan_dirty() const;

  // Discards local modifications and restarts dirty tracking by installing a
  // fresh copy-on-write view over the same range.
  void reset_tracking();

 private:
  void map(bool populate);

  std::byte *base_ = nullptr;
  std::uint64_t len_ = 0;
  std::uint64_t file_offset_ = 0;
  int fd_ = -1;
  std::uint64_t page_size_ = 0;
  bool fixed_ = false;
  bool writable_ = true;
};

// Writes every dirty page of every mapping to its file position with
// run-granular writes, fsyncs each file, then resets dirty tracking.
// At most `workers` mappings are flushed concurrently (one thread per file).
flush_stats write_back(std::span<private_mapping *> mappings, unsigned workers);
flush_stats write_back(private_mapping &mapping);

}  // namespace persistheap::bs_msync

#endif  // PERSISTHEAP_BS_MSYNC_HPP
