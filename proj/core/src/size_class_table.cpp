// SPDX-License-Identifier: Apache-2.0

#include <persistheap/size_class_table.hpp>

#include <bit>
#include <cassert>

#include <persistheap/error.hpp>

namespace persistheap {

size_class_table::size_class_table(std::uint64_t chunk_size)
    : chunk_size_(chunk_size) {
  if (chunk_size < k_min_chunk_size || !std::has_single_bit(chunk_size)) {
    throw_error(errc::invalid_argument,
                "chunk size must be a power of two >= 64 KiB");
  }
  for (std::uint64_t c = 8; c <= 64; c += 8) {
    classes_.push_back(c);
  }
  const unsigned log2_half = std::countr_zero(half_chunk());
  for (unsigned k = 6; k + 1 <= log2_half; ++k) {
    const std::uint64_t base = std::uint64_t{1} << k;
    const std::uint64_t step = base >> 2;
    for (std::uint64_t j = 1; j <= 4; ++j) {
      classes_.push_back(base + j * step);
    }
  }
  assert(classes_.back() == half_chunk());
}

std::uint64_t size_class_table::class_for(std::uint64_t request) const {
  if (request == 0 || request > half_chunk()) {
    throw_error(errc::out_of_domain, "small request must be in [1, half chunk]");
  }
  if (request <= 64) {
    return (request + 7) & ~std::uint64_t{7};
  }
  const unsigned k = 63 - std::countl_zero(request - 1);
  const std::uint64_t base = std::uint64_t{1} << k;
  const std::uint64_t step = base >> 2;
  const std::uint64_t j = (request - base + step - 1) / step;
  return base + j * step;
}

std::size_t size_class_table::bin_for(std::uint64_t request) const {
  if (request == 0 || request > half_chunk()) {
    throw_error(errc::out_of_domain, "small request must be in [1, half chunk]");
  }
  if (request <= 64) {
    return static_cast<std::size_t>((request + 7) / 8 - 1);
  }
  const unsigned k = 63 - std::countl_zero(request - 1);
  const std::uint64_t base = std::uint64_t{1} << k;
  const std::uint64_t step = base >> 2;
  const std::uint64_t j = (request - base + step - 1) / step;
  return static_cast<std::size_t>(8 + 4 * (k - 6) + (j - 1));
}

std::uint64_t size_class_table::round_large(std::uint64_t request) const {
  if (request <= half_chunk()) {
    throw_error(errc::out_of_domain, "large request must exceed half chunk");
  }
  return std::bit_ceil(request);
}

}  // namespace persistheap
