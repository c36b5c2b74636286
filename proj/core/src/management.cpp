// SPDX-License-Identifier: Apache-2.0

#include <persistheap/management.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include <persistheap/error.hpp>

namespace persistheap {

// ---------------------------------------------------------------- chunks

chunk_directory::chunk_directory(std::uint64_t reserved_chunks)
    : records_(reserved_chunks) {
  if (reserved_chunks == 0) {
    throw_error(errc::invalid_argument, "reservation must hold >= 1 chunk");
  }
}

std::optional<std::uint64_t> chunk_directory::find_empty_chunks(
    std::uint64_t n) const {
  if (n == 0) {
    throw_error(errc::invalid_argument, "empty-run length must be >= 1");
  }
  std::uint64_t run = 0;
  for (std::uint64_t i = 0; i < records_.size(); ++i) {
    if (records_[i].kind == chunk_kind::empty) {
      if (++run == n) return i - n + 1;
    } else {
      run = 0;
    }
    // everything past high_water is empty; short-circuit the tail
    if (i + 1 == high_water_ && records_.size() - high_water_ + run >= n) {
      return high_water_ - run;
    }
  }
  return std::nullopt;
}

void chunk_directory::bump_high_water(std::uint64_t last_used_chunk) {
  high_water_ = std::max(high_water_, last_used_chunk + 1);
}

void chunk_directory::mark_small(std::uint64_t chunk, std::uint8_t bin,
                                 std::uint32_t num_slots) {
  auto &rec = records_.at(chunk);
  rec.kind = chunk_kind::small;
  rec.bin = bin;
  rec.span_chunks = 0;
  rec.slots = std::make_unique<multilayer_bitset>(num_slots);
  bump_high_water(chunk);
}

void chunk_directory::mark_large(std::uint64_t chunk, std::uint32_t span_chunks) {
  if (span_chunks == 0 || chunk + span_chunks > records_.size()) {
    throw_error(errc::invalid_argument, "large span out of range");
  }
  auto &head = records_.at(chunk);
  head.kind = chunk_kind::large_head;
  head.bin = 0;
  head.span_chunks = span_chunks;
  head.slots.reset();
  for (std::uint32_t i = 1; i < span_chunks; ++i) {
    auto &body = records_[chunk + i];
    body.kind = chunk_kind::large_body;
    body.bin = 0;
    body.span_chunks = 0;
    body.slots.reset();
  }
  bump_high_water(chunk + span_chunks - 1);
}

void chunk_directory::mark_empty(std::uint64_t chunk) {
  auto &rec = records_.at(chunk);
  std::uint64_t span = 1;
  if (rec.kind == chunk_kind::large_head) {
    span = rec.span_chunks;
  } else if (rec.kind == chunk_kind::large_body) {
    throw_error(errc::invalid_argument, "cannot free interior of a large span");
  }
  for (std::uint64_t i = 0; i < span; ++i) {
    auto &r = records_[chunk + i];
    r.kind = chunk_kind::empty;
    r.bin = 0;
    r.span_chunks = 0;
    r.slots.reset();
  }
}

// ------------------------------------------------------------------ bins

std::optional<std::uint64_t> bin_directory::pop(std::size_t bin) {
  auto &stack = bins_.at(bin);
  if (stack.empty()) return std::nullopt;
  const std::uint64_t chunk = stack.back();
  stack.pop_back();
  return chunk;
}

std::optional<std::uint64_t> bin_directory::peek(std::size_t bin) const {
  const auto &stack = bins_.at(bin);
  if (stack.empty()) return std::nullopt;
  return stack.back();
}

void bin_directory::push(std::size_t bin, std::uint64_t chunk) {
  bins_.at(bin).push_back(chunk);
}

std::size_t bin_directory::count(std::size_t bin, std::uint64_t chunk) const {
  const auto &stack = bins_.at(bin);
  return static_cast<std::size_t>(std::count(stack.begin(), stack.end(), chunk));
}

bool bin_directory::remove(std::size_t bin, std::uint64_t chunk) {
  auto &stack = bins_.at(bin);
  auto it = std::find(stack.begin(), stack.end(), chunk);
  if (it == stack.end()) return false;
  stack.erase(it);
  return true;
}

// ----------------------------------------------------------------- names

void name_directory::insert(name_record rec) {
  auto [it, inserted] = records_.try_emplace(rec.name, std::move(rec));
  if (!inserted) {
    throw_error(errc::already_exists, "name already exists: " + it->first);
  }
}

std::optional<name_record> name_directory::find(const std::string &key) const {
  auto it = records_.find(key);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

bool name_directory::erase(const std::string &key) {
  return records_.erase(key) > 0;
}

// --------------------------------------------------------- serialization

namespace {

constexpr std::uint32_t k_format_version = 1;
constexpr char k_chunk_magic[4] = {'M', 'T', 'C', 'D'};
constexpr char k_name_magic[4] = {'M', 'T', 'N', 'D'};

void put_u32(std::string &buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>(v >> (8 * i)));
}

void put_u64(std::string &buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>(v >> (8 * i)));
}

void put_bytes(std::string &buf, const std::string &s) {
  put_u64(buf, s.size());
  buf.append(s);
}

class reader {
 public:
  explicit reader(std::string data) : data_(std::move(data)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(raw(4)); }
  std::uint64_t u64() { return raw(8); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(raw(1)); }

  std::string bytes() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::uint64_t raw(unsigned n) {
    need(n);
    std::uint64_t v = 0;
    for (unsigned i = 0; i < n; ++i) {
      v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += n;
    return v;
  }

  void need(std::uint64_t n) {
    if (pos_ + n > data_.size()) {
      throw_error(errc::bad_format, "truncated management file");
    }
  }

  std::string data_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string &payload) {
  return static_cast<std::uint32_t>(
      ::crc32(0, reinterpret_cast<const Bytef *>(payload.data()),
              static_cast<uInt>(payload.size())));
}

void write_file(const std::filesystem::path &file, const char magic[4],
                const std::string &payload) {
  std::string out;
  out.append(magic, 4);
  put_u32(out, k_format_version);
  put_u64(out, payload.size());
  put_u32(out, crc_of(payload));
  out.append(payload);

  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os || !os.write(out.data(), static_cast<std::streamsize>(out.size()))) {
    throw_error(errc::io_error, "cannot write " + file.string());
  }
}

std::string read_payload(const std::filesystem::path &file,
                         const char magic[4]) {
  std::ifstream is(file, std::ios::binary);
  if (!is) {
    throw_error(errc::not_found, "cannot open " + file.string());
  }
  std::string data((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  if (data.size() < 20) {
    throw_error(errc::bad_format, "truncated header in " + file.string());
  }
  if (std::memcmp(data.data(), magic, 4) != 0) {
    throw_error(errc::bad_format, "bad magic in " + file.string());
  }
  reader head(data.substr(4, 16));
  const std::uint32_t version = head.u32();
  const std::uint64_t payload_len = head.u64();
  const std::uint32_t crc = head.u32();
  if (version != k_format_version) {
    throw_error(errc::bad_format, "unsupported format version in " + file.string());
  }
  if (data.size() != 20 + payload_len) {
    throw_error(errc::bad_format, "truncated payload in " + file.string());
  }
  std::string payload = data.substr(20);
  if (crc_of(payload) != crc) {
    throw_error(errc::bad_format, "checksum mismatch in " + file.string());
  }
  return payload;
}

}  // namespace

void save_chunk_directory(const chunk_directory &dir,
                          const std::filesystem::path &file) {
  std::string payload;
  put_u64(payload, dir.high_water());
  for (std::uint64_t c = 0; c < dir.high_water(); ++c) {
    const auto &rec = dir.record(c);
    payload.push_back(static_cast<char>(rec.kind));
    payload.push_back(static_cast<char>(rec.bin));
    put_u32(payload, rec.span_chunks);
    if (rec.kind == chunk_kind::small) {
      for (std::uint64_t w : rec.slots->leaf_words()) put_u64(payload, w);
    } else if (rec.kind == chunk_kind::large_head) {
      c += rec.span_chunks - 1;  // bodies are implied by the span
    }
  }
  write_file(file, k_chunk_magic, payload);
}

chunk_directory load_chunk_directory(const std::filesystem::path &file,
                                     std::uint64_t reserved_chunks,
                                     const size_class_table &table) {
  reader in(read_payload(file, k_chunk_magic));
  chunk_directory dir(reserved_chunks);
  const std::uint64_t high_water = in.u64();
  if (high_water > reserved_chunks) {
    throw_error(errc::bad_format, "chunk directory exceeds reservation");
  }
  for (std::uint64_t c = 0; c < high_water; ++c) {
    const auto kind = static_cast<chunk_kind>(in.u8());
    const std::uint8_t bin = in.u8();
    const std::uint32_t span = in.u32();
    switch (kind) {
      case chunk_kind::empty:
        break;
      case chunk_kind::small: {
        if (bin >= table.num_bins()) {
          throw_error(errc::bad_format, "bin index out of range");
        }
        const auto num_slots = static_cast<std::uint32_t>(
            table.chunk_size() / table.class_of_bin(bin));
        std::vector<std::uint64_t> leaf((num_slots + 63) / 64);
        for (auto &w : leaf) w = in.u64();
        dir.mark_small(c, bin, num_slots);
        dir.record(c).slots =
            std::make_unique<multilayer_bitset>(num_slots, leaf);
        break;
      }
      case chunk_kind::large_head:
        dir.mark_large(c, span);
        c += span - 1;  // bodies are implied, not stored separately
        break;
      case chunk_kind::large_body:
        throw_error(errc::bad_format, "orphan large-body record");
      default:
        throw_error(errc::bad_format, "unknown chunk kind");
    }
  }
  if (!in.at_end()) {
    throw_error(errc::bad_format, "trailing bytes in chunk directory");
  }
  return dir;
}

void save_name_directory(const name_directory &dir,
                         const std::filesystem::path &file) {
  // Keys sorted so the serialized form is deterministic for a given state.
  std::vector<const name_record *> recs;
  recs.reserve(dir.size());
  for (const auto &[key, rec] : dir.records()) recs.push_back(&rec);
  std::sort(recs.begin(), recs.end(),
            [](const auto *a, const auto *b) { return a->name < b->name; });

  std::string payload;
  put_u64(payload, recs.size());
  for (const auto *rec : recs) {
    put_bytes(payload, rec->name);
    put_u64(payload, rec->offset);
    put_u64(payload, rec->length);
    put_u64(payload, rec->element_size);
    put_bytes(payload, rec->type_tag);
  }
  write_file(file, k_name_magic, payload);
}

name_directory load_name_directory(const std::filesystem::path &file) {
  reader in(read_payload(file, k_name_magic));
  name_directory dir;
  const std::uint64_t count = in.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    name_record rec;
    rec.name = in.bytes();
    rec.offset = in.u64();
    rec.length = in.u64();
    rec.element_size = in.u64();
    rec.type_tag = in.bytes();
    dir.insert(std::move(rec));
  }
  if (!in.at_end()) {
    throw_error(errc::bad_format, "trailing bytes in name directory");
  }
  return dir;
}

bin_directory rebuild_bins(const chunk_directory &chunks,
                           const size_class_table &table) {
  bin_directory bins(table.num_bins());
  for (std::uint64_t c = 0; c < chunks.high_water(); ++c) {
    const auto &rec = chunks.record(c);
    if (rec.kind == chunk_kind::small && !rec.slots->is_full()) {
      bins.push(rec.bin, c);
    }
  }
  return bins;
}

}  // namespace persistheap
