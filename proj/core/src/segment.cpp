// SPDX-License-Identifier: Apache-2.0

#include <persistheap/segment.hpp>

#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <persistheap/error.hpp>
#include <persistheap/size_class_table.hpp>

namespace persistheap {

namespace {

constexpr char k_manifest_magic[4] = {'M', 'T', 'L', 'L'};
constexpr std::uint32_t k_manifest_version = 1;

std::filesystem::path seg_file_path(const std::filesystem::path &root,
                                    std::uint64_t index) {
  char name[16];
  std::snprintf(name, sizeof(name), "seg-%05llu",
                static_cast<unsigned long long>(index));
  return root / "segment" / name;
}

void put_le(char *dst, std::uint64_t v, unsigned n) {
  for (unsigned i = 0; i < n; ++i) dst[i] = static_cast<char>(v >> (8 * i));
}

std::uint64_t get_le(const char *src, unsigned n) {
  std::uint64_t v = 0;
  for (unsigned i = 0; i < n; ++i) {
    v |= std::uint64_t(static_cast<unsigned char>(src[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void datastore_manifest::save(const std::filesystem::path &file) const {
  char buf[44];
  std::memcpy(buf, k_manifest_magic, 4);
  put_le(buf + 4, k_manifest_version, 4);
  put_le(buf + 8, chunk_size, 8);
  put_le(buf + 16, file_size, 8);
  put_le(buf + 24, reservation, 8);
  put_le(buf + 32, num_files, 8);
  const auto crc = ::crc32(0, reinterpret_cast<const Bytef *>(buf + 4), 36);
  put_le(buf + 40, crc, 4);

  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os || !os.write(buf, sizeof(buf))) {
    throw_error(errc::io_error, "cannot write manifest " + file.string());
  }
}

datastore_manifest datastore_manifest::load(const std::filesystem::path &file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) {
    throw_error(errc::not_found, "cannot open manifest " + file.string());
  }
  char buf[44];
  if (!is.read(buf, sizeof(buf))) {
    throw_error(errc::bad_format, "truncated manifest " + file.string());
  }
  if (std::memcmp(buf, k_manifest_magic, 4) != 0) {
    throw_error(errc::bad_format, "bad magic in manifest " + file.string());
  }
  if (get_le(buf + 4, 4) != k_manifest_version) {
    throw_error(errc::bad_format, "unsupported manifest version");
  }
  const auto crc = ::crc32(0, reinterpret_cast<const Bytef *>(buf + 4), 36);
  if (get_le(buf + 40, 4) != crc) {
    throw_error(errc::bad_format, "manifest checksum mismatch");
  }
  datastore_manifest m;
  m.chunk_size = get_le(buf + 8, 8);
  m.file_size = get_le(buf + 16, 8);
  m.reservation = get_le(buf + 24, 8);
  m.num_files = get_le(buf + 32, 8);
  return m;
}

segment segment::create(const std::filesystem::path &root,
                        std::uint64_t reservation, std::uint64_t chunk_size,
                        std::uint64_t file_size, segment_mode mode,
                        bool populate) {
  if (mode == segment_mode::read_only) {
    throw_error(errc::invalid_argument, "cannot create a read-only datastore");
  }
  if (chunk_size < k_min_chunk_size || !std::has_single_bit(chunk_size)) {
    throw_error(errc::invalid_argument, "chunk size must be a power of two >= 64 KiB");
  }
  if (file_size == 0 || file_size % chunk_size != 0) {
    throw_error(errc::invalid_argument, "file size must be a multiple of the chunk size");
  }
  if (reservation == 0 || reservation % file_size != 0) {
    throw_error(errc::invalid_argument, "reservation must be a multiple of the file size");
  }
  std::error_code ec;
  if (std::filesystem::exists(root) &&
      !std::filesystem::is_empty(root, ec)) {
    throw_error(errc::already_exists, "datastore path is not empty: " + root.string());
  }
  std::filesystem::create_directories(root / "segment");
  std::filesystem::create_directories(root / "management");

  segment seg;
  seg.root_ = root;
  seg.manifest_ = {chunk_size, file_size, reservation, 0};
  seg.mode_ = mode;
  seg.populate_ = populate;
  void *p = ::mmap(nullptr, reservation, PROT_NONE,
                   MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
  if (p == MAP_FAILED) {
    throw_error(errc::io_error, "cannot reserve address space");
  }
  seg.base_ = static_cast<std::byte *>(p);
  seg.sync_manifest();
  return seg;
}

segment segment::open(const std::filesystem::path &root, segment_mode mode,
                      bool populate) {
  const auto manifest_path = root / "manifest";
  if (!std::filesystem::exists(manifest_path)) {
    throw_error(errc::not_found, "no datastore at " + root.string());
  }
  segment seg;
  seg.root_ = root;
  seg.manifest_ = datastore_manifest::load(manifest_path);
  seg.mode_ = mode;
  seg.populate_ = populate;
  void *p = ::mmap(nullptr, seg.manifest_.reservation, PROT_NONE,
                   MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
  if (p == MAP_FAILED) {
    throw_error(errc::io_error, "cannot reserve address space");
  }
  seg.base_ = static_cast<std::byte *>(p);
  const std::uint64_t files = seg.manifest_.num_files;
  seg.manifest_.num_files = 0;
  for (std::uint64_t i = 0; i < files; ++i) {
    seg.map_file(i);
    ++seg.manifest_.num_files;
  }
  return seg;
}

segment::~segment() {
  private_maps_.clear();  // fixed views; the reservation unmap below covers them
  if (base_ != nullptr) {
    ::munmap(base_, manifest_.reservation);
  }
  for (int fd : fds_) {
    if (fd >= 0) ::close(fd);
  }
}

segment::segment(segment &&other) noexcept
    : root_(std::move(other.root_)),
      manifest_(other.manifest_),
      mode_(other.mode_),
      populate_(other.populate_),
      base_(other.base_),
      fds_(std::move(other.fds_)),
      private_maps_(std::move(other.private_maps_)),
      can_punch_(other.can_punch_) {
  other.base_ = nullptr;
  other.fds_.clear();
  other.private_maps_.clear();
}

void segment::map_file(std::uint64_t index) {
  const auto path = seg_file_path(root_, index);
  const int oflags =
      (mode_ == segment_mode::read_only) ? O_RDONLY : (O_RDWR | O_CREAT);
  const int fd = ::open(path.c_str(), oflags, 0644);
  if (fd < 0) {
    throw_error(errc::io_error, "cannot open backing file " + path.string());
  }
  if (mode_ != segment_mode::read_only) {
    if (::ftruncate(fd, static_cast<off_t>(manifest_.file_size)) != 0) {
      ::close(fd);
      throw_error(errc::io_error, "cannot size backing file " + path.string());
    }
  }
  std::byte *addr = base_ + index * manifest_.file_size;
  switch (mode_) {
    case segment_mode::read_write:
    case segment_mode::read_only: {
      const int prot =
          PROT_READ | (mode_ == segment_mode::read_write ? PROT_WRITE : 0);
      int flags = MAP_SHARED | MAP_FIXED;
      if (populate_) flags |= MAP_POPULATE;
      if (::mmap(addr, manifest_.file_size, prot, flags, fd, 0) == MAP_FAILED) {
        ::close(fd);
        throw_error(errc::io_error, "cannot map backing file " + path.string());
      }
      break;
    }
    case segment_mode::private_batch:
      private_maps_.emplace_back(fd, 0, manifest_.file_size, populate_, addr);
      break;
  }
  if (fds_.size() <= index) fds_.resize(index + 1, -1);
  fds_[index] = fd;
}

void segment::ensure_mapped(std::uint64_t upto) {
  if (upto > manifest_.reservation) {
    throw_error(errc::out_of_space, "requested offset exceeds the reservation");
  }
  const std::uint64_t needed =
      (upto + manifest_.file_size - 1) / manifest_.file_size;
  if (needed <= manifest_.num_files) return;
  std::lock_guard lock(grow_mutex_);
  while (manifest_.num_files < needed) {
    if (mode_ == segment_mode::read_only) {
      throw_error(errc::read_only, "cannot grow a read-only datastore");
    }
    map_file(manifest_.num_files);
    ++manifest_.num_files;
  }
}

void segment::free_chunk_space(std::uint64_t chunk_index,
                               std::uint64_t n_chunks) {
  if (mode_ == segment_mode::read_only) {
    throw_error(errc::read_only, "cannot free space in read-only mode");
  }
  const std::uint64_t begin = chunk_index * manifest_.chunk_size;
  const std::uint64_t end = begin + n_chunks * manifest_.chunk_size;
  if (n_chunks == 0 || end > manifest_.num_files * manifest_.file_size) {
    throw_error(errc::invalid_argument, "chunk range is not file backed");
  }
  if (mode_ == segment_mode::private_batch) return;

  for (std::uint64_t off = begin; off < end;) {
    const std::uint64_t file = off / manifest_.file_size;
    const std::uint64_t in_file = off % manifest_.file_size;
    const std::uint64_t len = std::min(end - off, manifest_.file_size - in_file);
    if (can_punch_) {
      if (::fallocate(fds_[file], FALLOC_FL_PUNCH_HOLE | FALLOC_FL_KEEP_SIZE,
                      static_cast<off_t>(in_file),
                      static_cast<off_t>(len)) != 0) {
        if (errno == EOPNOTSUPP || errno == ENOTSUP) {
          can_punch_ = false;
        } else {
          throw_error(errc::io_error, "hole punch failed");
        }
      }
    }
    if (!can_punch_) {
      ::madvise(base_ + off, len, MADV_DONTNEED);
    }
    off += len;
  }
}

bs_msync::flush_stats segment::flush(bool sync) {
  if (mode_ == segment_mode::read_only) {
    throw_error(errc::read_only, "cannot flush a read-only datastore");
  }
  bs_msync::flush_stats stats;
  if (mode_ == segment_mode::read_write) {
    for (std::uint64_t i = 0; i < manifest_.num_files; ++i) {
      if (::msync(base_ + i * manifest_.file_size, manifest_.file_size,
                  sync ? MS_SYNC : MS_ASYNC) != 0) {
        throw_error(errc::io_error,
                    "msync failed on backing file " + std::to_string(i));
      }
    }
    return stats;
  }
  std::vector<bs_msync::private_mapping *> maps;
  maps.reserve(private_maps_.size());
  for (auto &m : private_maps_) maps.push_back(&m);
  return bs_msync::write_back(maps, static_cast<unsigned>(maps.size()));
}

void segment::sync_manifest() const {
  manifest_.save(root_ / "manifest");
}

}  // namespace persistheap
