// SPDX-License-Identifier: Apache-2.0

#ifndef PERSISTHEAP_MANAGEMENT_HPP
#define PERSISTHEAP_MANAGEMENT_HPP

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <persistheap/multilayer_bitset.hpp>
#include <persistheap/size_class_table.hpp>

namespace persistheap {

enum class chunk_kind : std::uint8_t {
  empty = 0,
  small = 1,
  large_head = 2,
  large_body = 3,
};

struct chunk_record {
  chunk_kind kind = chunk_kind::empty;
  std::uint8_t bin = 0;            // small chunks only
  std::uint32_t span_chunks = 0;   // large heads only
  std::unique_ptr<multilayer_bitset> slots;  // small chunks only
};

// Dense per-chunk metadata array. Lives in volatile memory; written to
// management/chunks.bin on flush and rebuilt on open.
class chunk_directory {
 public:
  explicit chunk_directory(std::uint64_t reserved_chunks);

  std::uint64_t size() const noexcept { return records_.size(); }
  std::uint64_t high_water() const noexcept { return high_water_; }

  const chunk_record &record(std::uint64_t chunk) const { return records_.at(chunk); }
  chunk_record &record(std::uint64_t chunk) { return records_.at(chunk); }

  // Lowest index of a run of n consecutive empty chunks; sequential probe.
  std::optional<std::uint64_t> find_empty_chunks(std::uint64_t n) const;

  void mark_small(std::uint64_t chunk, std::uint8_t bin, std::uint32_t num_slots);
  void mark_large(std::uint64_t chunk, std::uint32_t span_chunks);
  void mark_empty(std::uint64_t chunk);  // clears head + body records of a span

 private:
  void bump_high_water(std::uint64_t last_used_chunk);

  std::vector<chunk_record> records_;
  std::uint64_t high_water_ = 0;
};

// Per-size-class LIFO stacks of non-full small chunk ids. Derived data:
// never persisted, rebuilt from the chunk directory on open.
class bin_directory {
 public:
  explicit bin_directory(std::size_t num_bins) : bins_(num_bins) {}

  std::optional<std::uint64_t> pop(std::size_t bin);
  std::optional<std::uint64_t> peek(std::size_t bin) const;
  void push(std::size_t bin, std::uint64_t chunk);
  bool remove(std::size_t bin, std::uint64_t chunk);  // false if absent

  std::size_t num_bins() const noexcept { return bins_.size(); }
  std::size_t depth(std::size_t bin) const { return bins_.at(bin).size(); }
  std::size_t count(std::size_t bin, std::uint64_t chunk) const;
  const std::vector<std::uint64_t> &entries(std::size_t bin) const {
    return bins_.at(bin);
  }

 private:
  std::vector<std::vector<std::uint64_t>> bins_;
};

struct name_record {
  std::string name;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;        // element count
  std::uint64_t element_size = 0;  // bytes
  std::string type_tag;
};

class name_directory {
 public:
  // Throws already_exists on duplicate key.
  void insert(name_record rec);
  std::optional<name_record> find(const std::string &key) const;
  bool erase(const std::string &key);

  std::size_t size() const noexcept { return records_.size(); }
  const std::unordered_map<std::string, name_record> &records() const {
    return records_;
  }

 private:
  std::unordered_map<std::string, name_record> records_;
};

// On-disk form of the management data. Bit-exact, little-endian:
//   header: magic (4 B), format_version u32, payload_len u64, crc32 u32
//   chunks.bin ("MTCD"): high_water u64, then per record up to high_water
//     {kind u8, bin u8, span u32, leaf words for small chunks}
//   names.bin ("MTND"): count u64, then length-prefixed entries
void save_chunk_directory(const chunk_directory &dir,
                          const std::filesystem::path &file);
chunk_directory load_chunk_directory(const std::filesystem::path &file,
                                     std::uint64_t reserved_chunks,
                                     const size_class_table &table);

void save_name_directory(const name_directory &dir,
                         const std::filesystem::path &file);
name_directory load_name_directory(const std::filesystem::path &file);

// Non-full small chunks back onto their bins, in chunk-index order.
bin_directory rebuild_bins(const chunk_directory &chunks,
                           const size_class_table &table);

}  // namespace persistheap

#endif  // PERSISTHEAP_MANAGEMENT_HPP
