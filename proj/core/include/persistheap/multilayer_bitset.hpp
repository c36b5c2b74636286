// SPDX-License-Identifier: Apache-2.0

#ifndef PERSISTHEAP_MULTILAYER_BITSET_HPP
#define PERSISTHEAP_MULTILAYER_BITSET_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace persistheap {

// Occupied-slot table for a small-object chunk. Up to 64^3 slots in at most
// three layers of 64-bit words; a set bit in a summary layer means the child
// word below it is full. A first-free search therefore examines at most one
// word per layer.
//
// Out-of-range tail bits in every layer are kept permanently set so the
// search never needs a bounds branch.
class multilayer_bitset {
 public:
  static constexpr std::uint32_t k_max_slots = 64 * 64 * 64;

  explicit multilayer_bitset(std::uint32_t num_slots);

  // Rebuilds from serialized leaf words (summaries are derived data).
  multilayer_bitset(std::uint32_t num_slots, std::span<const std::uint64_t> leaf);

  std::uint32_t num_slots() const noexcept { return num_slots_; }
  std::uint32_t occupancy() const noexcept { return popcount_; }
  bool is_full() const noexcept { return popcount_ == num_slots_; }
  bool empty() const noexcept { return popcount_ == 0; }
  unsigned layer_count() const noexcept { return layer_count_; }

  bool test(std::uint32_t slot) const;

  // Lowest free slot, marked occupied; nullopt iff full.
  std::optional<std::uint32_t> find_and_set_first_free();

  // Frees a slot; true iff the bitset became empty. Throws double_free if the
  // slot is not currently set.
  bool clear(std::uint32_t slot);

  // Word reads performed by the descent of the most recent search.
  unsigned last_search_word_reads() const noexcept { return last_search_reads_; }

  std::span<const std::uint64_t> leaf_words() const noexcept { return leaf_; }

 private:
  void set_tail_bits();
  void mark_occupied(std::uint32_t slot);

  std::uint32_t num_slots_;
  std::uint32_t popcount_ = 0;
  unsigned layer_count_;
  unsigned last_search_reads_ = 0;
  std::vector<std::uint64_t> leaf_;
  std::vector<std::uint64_t> mid_;
  std::uint64_t top_ = 0;
};

}  // namespace persistheap

#endif  // PERSISTHEAP_MULTILAYER_BITSET_HPP
