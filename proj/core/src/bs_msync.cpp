// SPDX-License-Identifier: Apache-2.0

#include <persistheap/bs_msync.hpp>

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <string>
#include <thread>

#include <fcntl.h>
#include <sys/mman.h>
#include <unistd.h>

#include <persistheap/error.hpp>

namespace persistheap::bs_msync {

namespace {

std::uint64_t system_page_size() {
  return static_cast<std::uint64_t>(::sysconf(_SC_PAGESIZE));
}

bool entry_is_dirty(std::uint64_t entry) {
  const bool file_or_shared = (entry >> 61) & 1;
  const bool swapped = (entry >> 62) & 1;
  const bool present = (entry >> 63) & 1;
  return !file_or_shared && (swapped || present);
}

}  // namespace

bool pagemap_available() {
  const int fd = ::open("/proc/self/pagemap", O_RDONLY);
  if (fd < 0) return false;
  std::uint64_t entry = 0;
  // Entry for this function's stack page; any successful read will do.
  const auto vpn = reinterpret_cast<std::uintptr_t>(&entry) / system_page_size();
  const ssize_t n = ::pread(fd, &entry, sizeof(entry),
                            static_cast<off_t>(vpn * sizeof(entry)));
  ::close(fd);
  return n == sizeof(entry);
}

private_mapping::private_mapping(int fd, std::uint64_t file_offset,
                                 std::uint64_t len, bool populate,
                                 void *fixed_addr, bool writable)
    : len_(len),
      file_offset_(file_offset),
      fd_(fd),
      page_size_(system_page_size()),
      fixed_(fixed_addr != nullptr),
      writable_(writable) {
  if (len == 0 || file_offset % page_size_ != 0) {
    throw_error(errc::invalid_argument,
                "mapping length/offset must be positive and page aligned");
  }
  base_ = static_cast<std::byte *>(fixed_addr);
  map(populate);
}

void private_mapping::map(bool populate) {
  int flags = MAP_PRIVATE;
  if (fixed_) flags |= MAP_FIXED;
  if (populate) flags |= MAP_POPULATE;
  const int prot = PROT_READ | (writable_ ? PROT_WRITE : 0);
  void *p = ::mmap(base_, len_, prot, flags, fd_,
                   static_cast<off_t>(file_offset_));
  if (p == MAP_FAILED) {
    throw_error(errc::io_error, "mmap(MAP_PRIVATE) failed");
  }
  base_ = static_cast<std::byte *>(p);
}

private_mapping::~private_mapping() {
  // A fixed mapping sits inside the segment reservation; the segment unmaps
  // the whole range itself.
  if (base_ != nullptr && !fixed_) {
    ::munmap(base_, len_);
  }
}

private_mapping::private_mapping(private_mapping &&other) noexcept
    : base_(other.base_),
      len_(other.len_),
      file_offset_(other.file_offset_),
      fd_(other.fd_),
      page_size_(other.page_size_),
      fixed_(other.fixed_),
      writable_(other.writable_) {
  other.base_ = nullptr;
}

private_mapping &private_mapping::operator=(private_mapping &&other) noexcept {
  if (this != &other) {
    if (base_ != nullptr && !fixed_) ::munmap(base_, len_);
    base_ = other.base_;
    len_ = other.len_;
    file_offset_ = other.file_offset_;
    fd_ = other.fd_;
    page_size_ = other.page_size_;
    fixed_ = other.fixed_;
    writable_ = other.writable_;
    other.base_ = nullptr;
  }
  return *this;
}

std::vector<dirty_run> private_mapping::scan_dirty() const {
  const int pm = ::open("/proc/self/pagemap", O_RDONLY);
  if (pm < 0) {
    throw_error(errc::unsupported, "pagemap export is not readable");
  }
  std::vector<dirty_run> runs;
  const std::uint64_t total = n_pages();
  const std::uint64_t first_vpn =
      reinterpret_cast<std::uintptr_t>(base_) / page_size_;

  constexpr std::uint64_t k_batch = 1024;
  std::uint64_t entries[k_batch];
  for (std::uint64_t p = 0; p < total; p += k_batch) {
    const std::uint64_t n = std::min(k_batch, total - p);
    const ssize_t got =
        ::pread(pm, entries, n * sizeof(std::uint64_t),
                static_cast<off_t>((first_vpn + p) * sizeof(std::uint64_t)));
    if (got != static_cast<ssize_t>(n * sizeof(std::uint64_t))) {
      ::close(pm);
      throw_error(errc::unsupported, "short read from pagemap export");
    }
    for (std::uint64_t i = 0; i < n; ++i) {
      if (!entry_is_dirty(entries[i])) continue;
      const std::uint64_t page = p + i;
      if (!runs.empty() && runs.back().start_page + runs.back().n_pages == page) {
        ++runs.back().n_pages;
      } else {
        runs.push_back({page, 1});
      }
    }
  }
  ::close(pm);
  return runs;
}

void private_mapping::reset_tracking() {
  // The pagemap export cannot tell "dirtied before flush" from "after", so
  // tracking restarts by replacing the anonymous copies with a fresh
  // copy-on-write file view at the same address.
  void *p = ::mmap(base_, len_, PROT_READ | (writable_ ? PROT_WRITE : 0),
                   MAP_PRIVATE | MAP_FIXED, fd_,
                   static_cast<off_t>(file_offset_));
  if (p == MAP_FAILED) {
    throw_error(errc::io_error, "remap for dirty-tracking reset failed");
  }
}

namespace {

flush_stats flush_one(private_mapping &m) {
  flush_stats stats;
  stats.pages_scanned = m.n_pages();
  const auto runs = m.scan_dirty();
  const std::uint64_t pg = m.page_size();
  for (const auto &run : runs) {
    std::uint64_t done = 0;
    std::uint64_t want = std::min(run.n_pages * pg, m.len() - run.start_page * pg);
    while (done < want) {
      const ssize_t n = ::pwrite(
          m.fd(), m.data() + run.start_page * pg + done, want - done,
          static_cast<off_t>(m.file_offset() + run.start_page * pg + done));
      if (n <= 0) {
        throw_error(errc::io_error,
                    "write-back failed at file offset " +
                        std::to_string(m.file_offset() + run.start_page * pg));
      }
      done += static_cast<std::uint64_t>(n);
    }
    stats.pages_dirty += run.n_pages;
    ++stats.runs_written;
  }
  stats.bytes_written = stats.pages_dirty * pg;
  if (!runs.empty()) {
    if (::fsync(m.fd()) != 0) {
      throw_error(errc::io_error, "fsync after write-back failed");
    }
    m.reset_tracking();
  }
  return stats;
}

}  // namespace

flush_stats write_back(std::span<private_mapping *> mappings, unsigned workers) {
  flush_stats total;
  if (mappings.empty()) return total;
  const unsigned n_workers = std::max(1u, std::min<unsigned>(
      workers, static_cast<unsigned>(mappings.size())));
  total.workers_used = n_workers;

  std::mutex merge_mutex;
  std::exception_ptr first_error;
  std::atomic<std::size_t> cursor{0};

  auto worker = [&] {
    for (;;) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= mappings.size()) break;
      try {
        const flush_stats s = flush_one(*mappings[i]);
        std::lock_guard lock(merge_mutex);
        total.pages_scanned += s.pages_scanned;
        total.pages_dirty += s.pages_dirty;
        total.runs_written += s.runs_written;
        total.bytes_written += s.bytes_written;
      } catch (...) {
        std::lock_guard lock(merge_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };

  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(n_workers);
    for (unsigned i = 0; i < n_workers; ++i) threads.emplace_back(worker);
    for (auto &t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return total;
}

flush_stats write_back(private_mapping &mapping) {
  private_mapping *one[] = {&mapping};
  return write_back(one, 1);
}

}  // namespace persistheap::bs_msync
