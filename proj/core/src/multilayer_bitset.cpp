// SPDX-License-Identifier: Apache-2.0

#include <persistheap/multilayer_bitset.hpp>

#include <bit>

#include <persistheap/error.hpp>

namespace persistheap {

namespace {

constexpr std::uint64_t k_all_ones = ~std::uint64_t{0};

std::uint32_t words_for(std::uint32_t bits) { return (bits + 63) / 64; }

}  // namespace

multilayer_bitset::multilayer_bitset(std::uint32_t num_slots)
    : num_slots_(num_slots) {
  if (num_slots == 0 || num_slots > k_max_slots) {
    throw_error(errc::invalid_argument, "slot count out of range");
  }
  const std::uint32_t n_leaf = words_for(num_slots);
  leaf_.assign(n_leaf, 0);
  if (n_leaf > 1) {
    mid_.assign(words_for(n_leaf), 0);
  }
  layer_count_ = 1 + (n_leaf > 1) + (mid_.size() > 1);
  set_tail_bits();
}

multilayer_bitset::multilayer_bitset(std::uint32_t num_slots,
                                     std::span<const std::uint64_t> leaf)
    : multilayer_bitset(num_slots) {
  if (leaf.size() != leaf_.size()) {
    throw_error(errc::bad_format, "leaf word count mismatch");
  }
  for (std::uint32_t slot = 0; slot < num_slots_; ++slot) {
    if ((leaf[slot / 64] >> (slot % 64)) & 1) {
      mark_occupied(slot);
      ++popcount_;
    }
  }
}

void multilayer_bitset::set_tail_bits() {
  if (num_slots_ % 64 != 0) {
    leaf_.back() |= k_all_ones << (num_slots_ % 64);
  }
  if (!mid_.empty()) {
    const std::uint32_t n_leaf = static_cast<std::uint32_t>(leaf_.size());
    if (n_leaf % 64 != 0) {
      mid_.back() |= k_all_ones << (n_leaf % 64);
    }
    const std::uint32_t n_mid = static_cast<std::uint32_t>(mid_.size());
    if (layer_count_ == 3 && n_mid % 64 != 0) {
      top_ |= k_all_ones << (n_mid % 64);
    }
  }
}

bool multilayer_bitset::test(std::uint32_t slot) const {
  if (slot >= num_slots_) {
    throw_error(errc::invalid_argument, "slot index out of range");
  }
  return (leaf_[slot / 64] >> (slot % 64)) & 1;
}

void multilayer_bitset::mark_occupied(std::uint32_t slot) {
  const std::uint32_t w = slot / 64;
  leaf_[w] |= std::uint64_t{1} << (slot % 64);
  if (!mid_.empty() && leaf_[w] == k_all_ones) {
    mid_[w / 64] |= std::uint64_t{1} << (w % 64);
    if (layer_count_ == 3 && mid_[w / 64] == k_all_ones) {
      top_ |= std::uint64_t{1} << (w / 64 % 64);
    }
  }
}

std::optional<std::uint32_t> multilayer_bitset::find_and_set_first_free() {
  last_search_reads_ = 0;
  std::uint32_t mid_idx = 0;
  if (layer_count_ == 3) {
    ++last_search_reads_;
    if (top_ == k_all_ones) return std::nullopt;
    mid_idx = static_cast<std::uint32_t>(std::countr_one(top_));
  }
  std::uint32_t leaf_idx = 0;
  if (layer_count_ >= 2) {
    ++last_search_reads_;
    const std::uint64_t w = mid_[mid_idx];
    if (w == k_all_ones) return std::nullopt;  // only reachable with 2 layers
    leaf_idx = mid_idx * 64 + static_cast<std::uint32_t>(std::countr_one(w));
  }
  ++last_search_reads_;
  const std::uint64_t w = leaf_[leaf_idx];
  if (w == k_all_ones) return std::nullopt;  // only reachable with 1 layer
  const std::uint32_t slot =
      leaf_idx * 64 + static_cast<std::uint32_t>(std::countr_one(w));
  mark_occupied(slot);
  ++popcount_;
  return slot;
}

bool multilayer_bitset::clear(std::uint32_t slot) {
  if (slot >= num_slots_) {
    throw_error(errc::invalid_argument, "slot index out of range");
  }
  const std::uint32_t w = slot / 64;
  const std::uint64_t bit = std::uint64_t{1} << (slot % 64);
  if (!(leaf_[w] & bit)) {
    throw_error(errc::double_free, "slot is not occupied");
  }
  leaf_[w] &= ~bit;
  if (!mid_.empty()) {
    mid_[w / 64] &= ~(std::uint64_t{1} << (w % 64));
    if (layer_count_ == 3) {
      top_ &= ~(std::uint64_t{1} << (w / 64 % 64));
    }
  }
  --popcount_;
  return popcount_ == 0;
}

}  // namespace persistheap
