// SPDX-License-Identifier: Apache-2.0

#ifndef PERSISTHEAP_CONTAINERS_HPP
#define PERSISTHEAP_CONTAINERS_HPP

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <persistheap/manager.hpp>

namespace persistheap {

// Segment-base-relative persistent reference. All-ones is the null sentinel.
// Stored structures hold offsets, never addresses, so a datastore remapped
// at a different base resolves to the same objects.
struct offset_ref {
  static constexpr std::uint64_t k_null = ~std::uint64_t{0};

  std::uint64_t raw = k_null;

  bool is_null() const noexcept { return raw == k_null; }
  bool operator==(const offset_ref &) const = default;
};

// Routes container storage either to a manager (persistent) or to the
// volatile heap (transient, the default-constructed fallback).
class allocator_handle {
 public:
  allocator_handle() = default;  // transient
  explicit allocator_handle(manager &m) : mgr_(&m) {}

  bool persistent() const noexcept { return mgr_ != nullptr; }
  manager *mgr() const noexcept { return mgr_; }

  std::uint64_t allocate(std::uint64_t n) const;
  void deallocate(std::uint64_t offset) const;
  std::byte *resolve(std::uint64_t offset) const;

 private:
  manager *mgr_ = nullptr;
};

// Dynamic array of fixed-size byte records. The 32-byte header lives in
// handle-owned storage; this class is a volatile view over it.
class persistent_vector {
 public:
  static constexpr std::uint64_t k_header_bytes = 32;

  persistent_vector(allocator_handle h, std::uint64_t header_offset)
      : h_(h), header_(header_offset) {}

  // Writes a fresh header (len 0, no storage) into existing zeroable space.
  static void init_in_place(allocator_handle h, std::uint64_t header_offset,
                            std::uint64_t elem_size);
  // Allocates the header too; returns its offset.
  static std::uint64_t create(allocator_handle h, std::uint64_t elem_size);

  void push(const void *elem);
  const void *get(std::uint64_t index) const;
  std::uint64_t size() const;
  std::uint64_t capacity() const;
  std::uint64_t elem_size() const;

  // Frees element storage (not the header itself).
  void destroy_storage();

  std::uint64_t header_offset() const noexcept { return header_; }

 private:
  struct header;
  header &hdr() const;

  allocator_handle h_;
  std::uint64_t header_;
};

// Open-addressing hash table, 64-bit keys to fixed-size inline values.
// Linear probing over power-of-two bucket counts; load factor <= 0.7.
// Key 2^64-1 is reserved as the empty-bucket sentinel.
class persistent_map {
 public:
  static constexpr std::uint64_t k_header_bytes = 32;

  persistent_map(allocator_handle h, std::uint64_t header_offset)
      : h_(h), header_(header_offset) {}

  static void init_in_place(allocator_handle h, std::uint64_t header_offset,
                            std::uint64_t value_size);
  static std::uint64_t create(allocator_handle h, std::uint64_t value_size);

  // Value-slot pointer for key plus whether a fresh zeroed slot was inserted.
  std::pair<void *, bool> find_or_insert(std::uint64_t key);
  void insert(std::uint64_t key, const void *value);  // already_exists on dup
  void *find(std::uint64_t key) const;                // nullptr if absent
  std::uint64_t size() const;

  template <typename Fn>  // Fn(std::uint64_t key, void *value)
  void for_each(Fn &&fn) const;

  void destroy_storage();

  std::uint64_t header_offset() const noexcept { return header_; }

 private:
  struct header;
  header &hdr() const;
  void grow();
  std::byte *bucket(std::uint64_t buckets_off, std::uint64_t i) const;

  allocator_handle h_;
  std::uint64_t header_;
};

// Adjacency list split into m independently locked banks; an edge (s, d)
// lives in bank hash(s) mod m. Per-vertex edge lists keep insertion order.
// The locks belong to this view: share one view across threads, do not open
// two writable views of the same graph.
class banked_adjacency_list {
 public:
  static constexpr std::uint64_t k_default_banks = 1024;

  static banked_adjacency_list create(manager &m, const std::string &name,
                                      std::uint64_t num_banks = k_default_banks);
  static banked_adjacency_list open(manager &m, const std::string &name);

  void insert_edge(std::uint64_t src, std::uint64_t dst);
  std::vector<std::uint64_t> neighbors(std::uint64_t v) const;
  std::uint64_t degree(std::uint64_t v) const;
  std::uint64_t num_banks() const noexcept { return num_banks_; }

  // Quiescent full walk (reports every (src, dst) pair).
  template <typename Fn>  // Fn(std::uint64_t src, std::uint64_t dst)
  void for_each_edge(Fn &&fn) const;

 private:
  banked_adjacency_list(allocator_handle h, std::uint64_t header_offset);

  struct header;
  std::uint64_t bank_of(std::uint64_t vertex) const;
  std::uint64_t bank_header_offset(std::uint64_t bank) const;

  allocator_handle h_;
  std::uint64_t header_;
  std::uint64_t num_banks_ = 0;
  std::uint64_t banks_off_ = 0;
  std::unique_ptr<std::mutex[]> locks_;
};

// Fixed 64-bit mixing permutation (splitmix64 finalizer); the bank hash and
// the vertex-id scrambler both use it so runs are reproducible everywhere.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// --- template bodies ---

template <typename Fn>
void persistent_map::for_each(Fn &&fn) const {
  const auto n = size();
  if (n == 0) return;
  struct raw_header {
    std::uint64_t buckets;
    std::uint64_t n_buckets;
    std::uint64_t n_items;
    std::uint64_t value_size;
  };
  const auto &h = *reinterpret_cast<const raw_header *>(h_.resolve(header_));
  for (std::uint64_t i = 0; i < h.n_buckets; ++i) {
    std::byte *b = h_.resolve(h.buckets) + i * (8 + h.value_size);
    std::uint64_t key;
    std::memcpy(&key, b, 8);
    if (key != offset_ref::k_null) {
      fn(key, static_cast<void *>(b + 8));
    }
  }
}

template <typename Fn>
void banked_adjacency_list::for_each_edge(Fn &&fn) const {
  for (std::uint64_t b = 0; b < num_banks_; ++b) {
    persistent_map table(h_, bank_header_offset(b));
    table.for_each([&](std::uint64_t src, void *value) {
      std::uint64_t vec_off;
      std::memcpy(&vec_off, value, 8);
      persistent_vector edges(h_, vec_off);
      const std::uint64_t n = edges.size();
      for (std::uint64_t i = 0; i < n; ++i) {
        std::uint64_t dst;
        std::memcpy(&dst, edges.get(i), 8);
        fn(src, dst);
      }
    });
  }
}

}  // namespace persistheap

#endif  // PERSISTHEAP_CONTAINERS_HPP
