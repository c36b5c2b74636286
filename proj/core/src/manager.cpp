// SPDX-License-Identifier: Apache-2.0

#include <persistheap/manager.hpp>

#include <algorithm>
#include <cstring>
#include <unordered_map>

#include <fcntl.h>
#include <linux/fs.h>
#include <sys/ioctl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <persistheap/error.hpp>

namespace persistheap {

namespace {

std::filesystem::path chunks_file(const std::filesystem::path &root) {
  return root / "management" / "chunks.bin";
}

std::filesystem::path names_file(const std::filesystem::path &root) {
  return root / "management" / "names.bin";
}

}  // namespace

// Per-thread LIFO lists of freed small offsets, indexed by bin. Slots held
// here stay marked occupied in their bitsets; they are reserved, not free.
class object_cache {
 public:
  explicit object_cache(std::size_t num_bins) : per_bin(num_bins) {}

  std::mutex m;  // uncontended except while another thread drains us
  std::vector<std::vector<std::uint64_t>> per_bin;
  std::uint64_t cached_bytes = 0;
};

struct manager::core {
  core(std::filesystem::path root_in, size_class_table table_in,
       segment seg_in, chunk_directory chunks_in, bin_directory bins_in,
       name_directory names_in, bool writable_in, std::uint64_t budget)
      : root(std::move(root_in)),
        table(std::move(table_in)),
        seg(std::move(seg_in)),
        chunks(std::move(chunks_in)),
        bins(std::move(bins_in)),
        names(std::move(names_in)),
        writable(writable_in),
        cache_budget(budget),
        bin_mutexes(std::make_unique<std::mutex[]>(table.num_bins())),
        live_token(std::make_shared<core *>(this)) {}

  std::filesystem::path root;
  size_class_table table;
  std::optional<segment> seg;
  chunk_directory chunks;
  bin_directory bins;
  name_directory names;
  bool writable;
  std::uint64_t cache_budget;
  bool closed = false;

  mutable std::mutex chunk_mutex;
  mutable std::mutex name_mutex;
  std::unique_ptr<std::mutex[]> bin_mutexes;

  std::atomic<std::uint64_t> ev_refill{0};
  std::atomic<std::uint64_t> ev_release{0};
  std::atomic<std::uint64_t> ev_other{0};

  std::mutex caches_mutex;
  std::vector<std::shared_ptr<object_cache>> caches;
  std::shared_ptr<core *> live_token;

  mutable std::mutex reflink_mutex;
  mutable int reflink_probe = -1;  // -1 unknown, 0 no, 1 yes
};

// ------------------------------------------------------- thread-local link

namespace {

std::mutex g_link_mutex;

void drain_cache_locked(manager::core &c, object_cache &cache);

struct tl_entry {
  std::shared_ptr<object_cache> cache;
  std::weak_ptr<manager::core *> token;
};

struct tl_registry {
  std::unordered_map<const void *, tl_entry> entries;

  ~tl_registry() {
    std::lock_guard link(g_link_mutex);
    for (auto &[key, entry] : entries) {
      auto token = entry.token.lock();
      if (!token || *token == nullptr) continue;
      manager::core &c = **token;
      std::lock_guard cl(entry.cache->m);
      try {
        drain_cache_locked(c, *entry.cache);
      } catch (...) {
        // a failed drain at thread exit leaves the slots reserved; the next
        // manager flush drains the registered cache again
      }
    }
  }
};

thread_local tl_registry t_caches;

object_cache &local_cache(manager::core &c) {
  auto it = t_caches.entries.find(&c);
  if (it != t_caches.entries.end()) {
    auto token = it->second.token.lock();
    if (token && *token == &c) return *it->second.cache;
    t_caches.entries.erase(it);
  }
  auto cache = std::make_shared<object_cache>(c.table.num_bins());
  {
    std::lock_guard reg(c.caches_mutex);
    c.caches.push_back(cache);
  }
  t_caches.entries[&c] = tl_entry{cache, c.live_token};
  return *cache;
}

// Frees one small slot for real. Caller holds the bin mutex.
void release_small_slot(manager::core &c, std::size_t bin,
                        std::uint64_t offset) {
  const std::uint64_t chunk_size = c.table.chunk_size();
  const std::uint64_t cls = c.table.class_of_bin(bin);
  const std::uint64_t chunk = offset / chunk_size;
  const auto slot =
      static_cast<std::uint32_t>((offset % chunk_size) / cls);
  auto &rec = c.chunks.record(chunk);
  const bool was_full = rec.slots->is_full();
  const bool now_empty = rec.slots->clear(slot);
  if (now_empty) {
    {
      std::lock_guard cl(c.chunk_mutex);
      c.ev_release.fetch_add(1, std::memory_order_relaxed);
      c.bins.remove(bin, chunk);
      c.chunks.mark_empty(chunk);
    }
    c.seg->free_chunk_space(chunk, 1);
  } else if (was_full) {
    c.bins.push(bin, chunk);
  }
}

void drain_cache_locked(manager::core &c, object_cache &cache) {
  for (std::size_t bin = 0; bin < cache.per_bin.size(); ++bin) {
    auto &list = cache.per_bin[bin];
    if (list.empty()) continue;
    std::lock_guard bl(c.bin_mutexes[bin]);
    while (!list.empty()) {
      release_small_slot(c, bin, list.back());
      list.pop_back();
    }
  }
  cache.cached_bytes = 0;
}

void drain_all_caches(manager::core &c) {
  std::lock_guard reg(c.caches_mutex);
  for (auto &cache : c.caches) {
    std::lock_guard cl(cache->m);
    drain_cache_locked(c, *cache);
  }
}

bool clone_or_sparse_copy(const std::filesystem::path &src,
                          const std::filesystem::path &dst) {
  const int sfd = ::open(src.c_str(), O_RDONLY);
  if (sfd < 0) throw_error(errc::io_error, "cannot open " + src.string());
  const int dfd = ::open(dst.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (dfd < 0) {
    ::close(sfd);
    throw_error(errc::io_error, "cannot create " + dst.string());
  }
  bool cloned = false;
  if (::ioctl(dfd, FICLONE, sfd) == 0) {
    cloned = true;
  } else {
    // Sparse-aware byte copy: walk SEEK_DATA/SEEK_HOLE so holes stay holes.
    struct stat st{};
    ::fstat(sfd, &st);
    off_t pos = 0;
    for (;;) {
      const off_t data = ::lseek(sfd, pos, SEEK_DATA);
      if (data < 0) break;  // ENXIO: no more data
      off_t hole = ::lseek(sfd, data, SEEK_HOLE);
      if (hole < 0) hole = st.st_size;
      off_t remaining = hole - data;
      off_t off_in = data;
      off_t off_out = data;
      while (remaining > 0) {
        const ssize_t n = ::copy_file_range(sfd, &off_in, dfd, &off_out,
                                            static_cast<size_t>(remaining), 0);
        if (n <= 0) {
          ::close(sfd);
          ::close(dfd);
          throw_error(errc::io_error, "copy failed for " + src.string());
        }
        remaining -= n;
      }
      pos = hole;
    }
    if (::ftruncate(dfd, st.st_size) != 0) {
      ::close(sfd);
      ::close(dfd);
      throw_error(errc::io_error, "cannot size " + dst.string());
    }
  }
  ::close(sfd);
  ::close(dfd);
  return cloned;
}

bool detect_reflink(manager::core &c) {
  std::lock_guard lock(c.reflink_mutex);
  if (c.reflink_probe < 0) {
    const auto a = c.root / ".reflink-probe-a";
    const auto b = c.root / ".reflink-probe-b";
    const int afd = ::open(a.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    bool ok = false;
    if (afd >= 0) {
      (void)!::write(afd, "x", 1);
      const int bfd = ::open(b.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
      if (bfd >= 0) {
        ok = ::ioctl(bfd, FICLONE, afd) == 0;
        ::close(bfd);
      }
      ::close(afd);
    }
    std::filesystem::remove(a);
    std::filesystem::remove(b);
    c.reflink_probe = ok ? 1 : 0;
  }
  return c.reflink_probe == 1;
}

}  // namespace

// ----------------------------------------------------------- construction

manager manager::create(const std::filesystem::path &path,
                        const manager_options &opts) {
  size_class_table table(opts.chunk_size);
  segment seg = segment::create(
      path, opts.reservation, opts.chunk_size, opts.file_size,
      opts.private_batch ? segment_mode::private_batch
                         : segment_mode::read_write,
      opts.populate);
  chunk_directory chunks(opts.reservation / opts.chunk_size);
  bin_directory bins(table.num_bins());

  manager m;
  m.core_ = std::make_unique<core>(path, std::move(table), std::move(seg),
                                   std::move(chunks), std::move(bins),
                                   name_directory{}, true,
                                   opts.cache_budget_bytes);
  // Empty management files so a freshly created store is openable as-is.
  save_chunk_directory(m.core_->chunks, chunks_file(path));
  save_name_directory(m.core_->names, names_file(path));
  return m;
}

manager manager::open(const std::filesystem::path &path, open_mode mode,
                      bool private_batch, bool populate) {
  const bool writable = mode == open_mode::open_only;
  segment seg = segment::open(
      path,
      !writable ? segment_mode::read_only
                : (private_batch ? segment_mode::private_batch
                                 : segment_mode::read_write),
      populate);
  size_class_table table(seg.chunk_size());
  const std::uint64_t reserved_chunks = seg.reservation() / seg.chunk_size();
  chunk_directory chunks =
      load_chunk_directory(chunks_file(path), reserved_chunks, table);
  name_directory names = load_name_directory(names_file(path));
  bin_directory bins = rebuild_bins(chunks, table);

  manager m;
  m.core_ = std::make_unique<core>(path, std::move(table), std::move(seg),
                                   std::move(chunks), std::move(bins),
                                   std::move(names), writable,
                                   manager_options{}.cache_budget_bytes);
  return m;
}

manager::manager(manager &&other) noexcept : core_(std::move(other.core_)) {}

manager::~manager() {
  if (core_ && !core_->closed) {
    try {
      close();
    } catch (...) {
      // destructor persistence is best effort; call close() to observe errors
    }
  }
}

bool manager::is_closed() const { return core_->closed; }

manager::core &manager::require_open() const {
  if (!core_ || core_->closed) {
    throw_error(errc::invalid_argument, "manager is closed");
  }
  return *core_;
}

manager::core &manager::require_writable() const {
  core &c = require_open();
  if (!c.writable) {
    throw_error(errc::read_only, "datastore is open read-only");
  }
  return c;
}

std::byte *manager::base() const { return require_open().seg->base(); }
const size_class_table &manager::table() const { return require_open().table; }
const std::filesystem::path &manager::path() const { return require_open().root; }
bool manager::read_only() const { return !require_open().writable; }

// ------------------------------------------------------------- allocation

std::uint64_t manager::allocate(std::uint64_t n) {
  core &c = require_writable();
  if (n == 0) {
    throw_error(errc::invalid_argument, "cannot allocate zero bytes");
  }
  const std::uint64_t chunk_size = c.table.chunk_size();

  if (n > c.table.half_chunk()) {  // large: whole contiguous chunks
    const std::uint64_t span = c.table.round_large(n) / chunk_size;
    std::lock_guard cl(c.chunk_mutex);
    const auto chunk = c.chunks.find_empty_chunks(span);
    if (!chunk) {
      throw_error(errc::out_of_space, "no contiguous empty run fits");
    }
    c.chunks.mark_large(*chunk, static_cast<std::uint32_t>(span));
    try {
      c.seg->ensure_mapped((*chunk + span) * chunk_size);
    } catch (...) {
      c.chunks.mark_empty(*chunk);
      throw;
    }
    return *chunk * chunk_size;
  }

  const std::size_t bin = c.table.bin_for(n);
  const std::uint64_t cls = c.table.class_of_bin(bin);

  object_cache &cache = local_cache(c);
  {
    std::lock_guard lock(cache.m);
    auto &list = cache.per_bin[bin];
    if (!list.empty()) {
      const std::uint64_t offset = list.back();
      list.pop_back();
      cache.cached_bytes -= cls;
      return offset;
    }
  }

  std::lock_guard bl(c.bin_mutexes[bin]);
  std::uint64_t chunk;
  if (auto top = c.bins.peek(bin)) {
    chunk = *top;
  } else {
    std::lock_guard cl(c.chunk_mutex);
    c.ev_refill.fetch_add(1, std::memory_order_relaxed);
    const auto found = c.chunks.find_empty_chunks(1);
    if (!found) {
      throw_error(errc::out_of_space, "no empty chunk for bin refill");
    }
    chunk = *found;
    c.chunks.mark_small(chunk, static_cast<std::uint8_t>(bin),
                        static_cast<std::uint32_t>(chunk_size / cls));
    c.bins.push(bin, chunk);
  }
  c.seg->ensure_mapped((chunk + 1) * chunk_size);
  auto &rec = c.chunks.record(chunk);
  const std::uint32_t slot = *rec.slots->find_and_set_first_free();
  if (rec.slots->is_full()) {
    c.bins.remove(bin, chunk);
  }
  return chunk * chunk_size + slot * cls;
}

void manager::deallocate(std::uint64_t offset) {
  core &c = require_writable();
  const std::uint64_t chunk_size = c.table.chunk_size();
  const std::uint64_t chunk = offset / chunk_size;
  if (offset % 8 != 0 || chunk >= c.chunks.size()) {
    throw_error(errc::invalid_argument, "offset is not an allocation start");
  }
  // The header of a live allocation's chunk record is stable; only the
  // owner can free it, so an unlocked read of kind/bin is safe here.
  const auto &rec = c.chunks.record(chunk);
  const chunk_kind kind = rec.kind;

  switch (kind) {
    case chunk_kind::empty:
      throw_error(errc::double_free, "offset is not live");
    case chunk_kind::large_body:
      throw_error(errc::invalid_argument,
                  "offset points inside a large allocation");
    case chunk_kind::large_head: {
      if (offset % chunk_size != 0) {
        throw_error(errc::invalid_argument,
                    "offset is not the start of the large allocation");
      }
      std::uint64_t span;
      {
        std::lock_guard cl(c.chunk_mutex);
        auto &head = c.chunks.record(chunk);
        if (head.kind != chunk_kind::large_head) {
          throw_error(errc::double_free, "offset is not live");
        }
        span = head.span_chunks;
        c.chunks.mark_empty(chunk);
      }
      // Large frees release file space immediately, chunk-granular.
      c.seg->free_chunk_space(chunk, span);
      return;
    }
    case chunk_kind::small:
      break;
  }

  const std::size_t bin = rec.bin;
  const std::uint64_t cls = c.table.class_of_bin(bin);
  if (offset % chunk_size % cls != 0) {
    throw_error(errc::invalid_argument, "offset is not class aligned");
  }
  const auto slot = static_cast<std::uint32_t>(offset % chunk_size / cls);

  object_cache &cache = local_cache(c);
  std::lock_guard lock(cache.m);
  auto &list = cache.per_bin[bin];
  if (std::find(list.begin(), list.end(), offset) != list.end()) {
    throw_error(errc::double_free, "offset already freed to the cache");
  }
  {
    std::lock_guard bl(c.bin_mutexes[bin]);
    if (c.chunks.record(chunk).kind != chunk_kind::small ||
        !c.chunks.record(chunk).slots->test(slot)) {
      throw_error(errc::double_free, "slot is not occupied");
    }
  }
  list.push_back(offset);
  cache.cached_bytes += cls;
  if (cache.cached_bytes > c.cache_budget) {
    drain_cache_locked(c, cache);
  }
}

// ----------------------------------------------------------- named objects

std::uint64_t manager::construct_named(const std::string &name,
                                       std::uint64_t element_size,
                                       std::uint64_t length,
                                       const std::string &type_tag) {
  core &c = require_writable();
  if (element_size == 0 || length == 0) {
    throw_error(errc::invalid_argument,
                "element size and length must be positive");
  }
  if (element_size > (~std::uint64_t{0}) / length) {
    throw_error(errc::invalid_argument, "allocation size overflows");
  }
  const std::uint64_t bytes = element_size * length;
  std::lock_guard nl(c.name_mutex);
  if (c.names.find(name)) {
    throw_error(errc::already_exists, "name already exists: " + name);
  }
  const std::uint64_t offset = allocate(bytes);
  std::memset(c.seg->base() + offset, 0, bytes);
  c.names.insert({name, offset, length, element_size, type_tag});
  return offset;
}

std::optional<name_record> manager::find_named(const std::string &name) const {
  core &c = require_open();
  std::lock_guard nl(c.name_mutex);
  return c.names.find(name);
}

bool manager::destroy_named(const std::string &name) {
  core &c = require_writable();
  std::uint64_t offset;
  {
    std::lock_guard nl(c.name_mutex);
    const auto rec = c.names.find(name);
    if (!rec) return false;
    offset = rec->offset;
    c.names.erase(name);
  }
  deallocate(offset);
  return true;
}

// ------------------------------------------------------- flush / lifecycle

bs_msync::flush_stats manager::flush() {
  core &c = require_writable();
  drain_all_caches(c);
  save_chunk_directory(c.chunks, chunks_file(c.root));
  save_name_directory(c.names, names_file(c.root));
  c.seg->sync_manifest();
  return c.seg->flush(true);
}

void manager::close() {
  core &c = require_open();
  if (c.writable) {
    flush();
  }
  {
    std::lock_guard link(g_link_mutex);
    *c.live_token = nullptr;
  }
  c.seg.reset();
  c.closed = true;
}

snapshot_method manager::snapshot(const std::filesystem::path &dst) {
  core &c = require_open();
  if (c.writable) {
    flush();
  }
  if (std::filesystem::exists(dst)) {
    throw_error(errc::already_exists,
                "snapshot destination exists: " + dst.string());
  }
  std::filesystem::create_directories(dst / "segment");
  std::filesystem::create_directories(dst / "management");
  std::filesystem::copy_file(c.root / "manifest", dst / "manifest");
  std::filesystem::copy_file(chunks_file(c.root), chunks_file(dst));
  std::filesystem::copy_file(names_file(c.root), names_file(dst));

  bool all_cloned = true;
  for (std::uint64_t i = 0; i < c.seg->num_mapped_files(); ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "seg-%05llu",
                  static_cast<unsigned long long>(i));
    if (!clone_or_sparse_copy(c.root / "segment" / name,
                              dst / "segment" / name)) {
      all_cloned = false;
    }
  }
  if (c.seg->num_mapped_files() == 0) {
    all_cloned = detect_reflink(c);
  }
  return all_cloned ? snapshot_method::cloned : snapshot_method::copied;
}

// ------------------------------------------------------------ diagnostics

manager_info manager::info() const {
  core &c = require_open();
  manager_info out;
  out.chunk_size = c.table.chunk_size();
  out.file_size = c.seg->file_size();
  out.reservation = c.seg->reservation();
  out.num_files = c.seg->num_mapped_files();
  out.can_punch_holes = c.seg->can_punch_holes();
  out.can_reflink = detect_reflink(c);
  out.pagemap_available = bs_msync::pagemap_available();

  std::lock_guard cl(c.chunk_mutex);
  for (std::uint64_t i = 0; i < c.chunks.high_water(); ++i) {
    const auto &rec = c.chunks.record(i);
    switch (rec.kind) {
      case chunk_kind::empty:
        ++out.chunks_empty;
        break;
      case chunk_kind::small:
        ++out.chunks_small;
        out.bytes_live +=
            std::uint64_t{rec.slots->occupancy()} * c.table.class_of_bin(rec.bin);
        break;
      case chunk_kind::large_head:
        ++out.chunks_large_head;
        out.bytes_live += std::uint64_t{rec.span_chunks} * c.table.chunk_size();
        break;
      case chunk_kind::large_body:
        ++out.chunks_large_body;
        break;
    }
  }
  {
    std::lock_guard nl(c.name_mutex);
    out.named_objects = c.names.size();
  }
  for (std::size_t b = 0; b < c.bins.num_bins(); ++b) {
    if (const std::size_t d = c.bins.depth(b); d > 0) {
      out.nonfull_bins.emplace_back(b, d);
    }
  }
  return out;
}

std::vector<manager::chunk_state> manager::chunk_states() const {
  core &c = require_open();
  std::lock_guard cl(c.chunk_mutex);
  std::vector<chunk_state> out;
  out.reserve(c.chunks.high_water());
  for (std::uint64_t i = 0; i < c.chunks.high_water(); ++i) {
    const auto &rec = c.chunks.record(i);
    chunk_state s{rec.kind, rec.bin, rec.span_chunks, 0, 0};
    if (rec.kind == chunk_kind::small) {
      s.occupancy = rec.slots->occupancy();
      s.num_slots = rec.slots->num_slots();
    }
    out.push_back(s);
  }
  return out;
}

lock_event_counts manager::lock_events() const {
  core &c = require_open();
  return {c.ev_refill.load(), c.ev_release.load(), c.ev_other.load()};
}

void manager::audit() const {
  core &c = require_open();
  std::lock_guard nl(c.name_mutex);
  std::vector<std::unique_lock<std::mutex>> bls;
  for (std::size_t b = 0; b < c.table.num_bins(); ++b) {
    bls.emplace_back(c.bin_mutexes[b]);
  }
  std::lock_guard cl(c.chunk_mutex);

  auto fail = [](const std::string &what) {
    throw_error(errc::invalid_argument, "audit: " + what);
  };

  // chunk records: spans well formed, per-kind payloads sane
  for (std::uint64_t i = 0; i < c.chunks.size(); ++i) {
    const auto &rec = c.chunks.record(i);
    if (i >= c.chunks.high_water() && rec.kind != chunk_kind::empty) {
      fail("used chunk above high water");
    }
    switch (rec.kind) {
      case chunk_kind::empty:
        break;
      case chunk_kind::small: {
        if (rec.bin >= c.table.num_bins() || !rec.slots) fail("bad small record");
        const auto slots = static_cast<std::uint32_t>(
            c.table.chunk_size() / c.table.class_of_bin(rec.bin));
        if (rec.slots->num_slots() != slots) fail("bitset size mismatch");
        if (rec.slots->occupancy() == 0) fail("empty chunk still marked small");
        const std::size_t listed = c.bins.count(rec.bin, i);
        if (listed > 1) fail("chunk listed twice in its bin");
        if (rec.slots->is_full() == (listed == 1)) {
          fail(listed ? "full chunk listed in bin" : "non-full chunk missing from bin");
        }
        break;
      }
      case chunk_kind::large_head: {
        if (rec.span_chunks == 0 || i + rec.span_chunks > c.chunks.size()) {
          fail("bad large span");
        }
        for (std::uint32_t j = 1; j < rec.span_chunks; ++j) {
          if (c.chunks.record(i + j).kind != chunk_kind::large_body) {
            fail("large span interrupted");
          }
        }
        i += rec.span_chunks - 1;
        break;
      }
      case chunk_kind::large_body:
        fail("orphan large body");
    }
  }

  // bins reference only matching, non-full small chunks
  for (std::size_t b = 0; b < c.bins.num_bins(); ++b) {
    for (const std::uint64_t chunk : c.bins.entries(b)) {
      const auto &rec = c.chunks.record(chunk);
      if (rec.kind != chunk_kind::small || rec.bin != b) {
        fail("bin entry does not match its chunk");
      }
      if (rec.slots->is_full()) fail("full chunk listed in bin");
    }
  }

  // names point at live allocations of sufficient size
  for (const auto &[key, rec] : c.names.records()) {
    const std::uint64_t bytes = rec.element_size * rec.length;
    const std::uint64_t chunk = rec.offset / c.table.chunk_size();
    if (chunk >= c.chunks.high_water()) fail("name points past high water");
    const auto &cr = c.chunks.record(chunk);
    if (bytes <= c.table.half_chunk()) {
      if (cr.kind != chunk_kind::small) fail("name points at non-small chunk");
      const std::uint64_t cls = c.table.class_of_bin(cr.bin);
      if (cls < bytes) fail("name object exceeds its class");
      if (rec.offset % c.table.chunk_size() % cls != 0) fail("name misaligned");
      const auto slot = static_cast<std::uint32_t>(
          rec.offset % c.table.chunk_size() / cls);
      if (!cr.slots->test(slot)) fail("name points at a free slot");
    } else {
      if (cr.kind != chunk_kind::large_head) fail("name points at non-head chunk");
      if (rec.offset % c.table.chunk_size() != 0) fail("large name misaligned");
      if (std::uint64_t{cr.span_chunks} * c.table.chunk_size() < bytes) {
        fail("name object exceeds its span");
      }
    }
  }
}

}  // namespace persistheap
