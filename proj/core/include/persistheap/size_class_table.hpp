// SPDX-License-Identifier: Apache-2.0

#ifndef PERSISTHEAP_SIZE_CLASS_TABLE_HPP
#define PERSISTHEAP_SIZE_CLASS_TABLE_HPP

#include <cstddef>
#include <cstdint>
#include <vector>

namespace persistheap {

inline constexpr std::uint64_t k_default_chunk_size = std::uint64_t{1} << 21;  // 2 MiB
inline constexpr std::uint64_t k_min_chunk_size = std::uint64_t{1} << 16;      // 64 KiB
inline constexpr std::uint64_t k_min_allocation = 8;

// Internal allocation sizes: multiples of 8 up to 64, then each power-of-two
// group [2^k, 2^(k+1)] split into four steps of 2^(k-2). The last class equals
// half the chunk size; anything above that is a large (whole-chunk) request.
//
// Keeps the small-object overhead at or below 25% for requests >= 25 bytes
// and lets size -> class and size -> bin be computed with bit operations.
class size_class_table {
 public:
  explicit size_class_table(std::uint64_t chunk_size = k_default_chunk_size);

  std::uint64_t chunk_size() const noexcept { return chunk_size_; }
  std::uint64_t half_chunk() const noexcept { return chunk_size_ / 2; }
  std::size_t num_bins() const noexcept { return classes_.size(); }

  const std::vector<std::uint64_t> &classes() const noexcept { return classes_; }
  std::uint64_t class_of_bin(std::size_t bin) const { return classes_.at(bin); }

  // Smallest internal allocation size >= request. Constant time.
  // Throws out_of_domain unless 1 <= request <= half_chunk().
  std::uint64_t class_for(std::uint64_t request) const;

  // Bin index of class_for(request). Constant time.
  std::size_t bin_for(std::uint64_t request) const;

  // Smallest power of two >= request, for large requests (> half_chunk()).
  // result / chunk_size() is the number of contiguous chunks consumed.
  std::uint64_t round_large(std::uint64_t request) const;

 private:
  std::uint64_t chunk_size_;
  std::vector<std::uint64_t> classes_;
};

}  // namespace persistheap

#endif  // PERSISTHEAP_SIZE_CLASS_TABLE_HPP
