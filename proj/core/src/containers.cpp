// SPDX-License-Identifier: Apache-2.0

#include <persistheap/containers.hpp>

#include <cstdlib>
#include <new>

#include <persistheap/error.hpp>

namespace persistheap {

// -------------------------------------------------------- allocator handle

std::uint64_t allocator_handle::allocate(std::uint64_t n) const {
  if (mgr_ != nullptr) {
    return mgr_->allocate(n);
  }
  void *p = ::operator new(n);
  return static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(p));
}

void allocator_handle::deallocate(std::uint64_t offset) const {
  if (mgr_ != nullptr) {
    mgr_->deallocate(offset);
    return;
  }
  ::operator delete(reinterpret_cast<void *>(static_cast<std::uintptr_t>(offset)));
}

std::byte *allocator_handle::resolve(std::uint64_t offset) const {
  if (offset == offset_ref::k_null) {
    throw_error(errc::invalid_argument, "resolving a null offset reference");
  }
  if (mgr_ != nullptr) {
    return mgr_->resolve(offset);
  }
  return reinterpret_cast<std::byte *>(static_cast<std::uintptr_t>(offset));
}

// ----------------------------------------------------------------- vector

struct persistent_vector::header {
  std::uint64_t data;  // offset_ref raw
  std::uint64_t len;
  std::uint64_t capacity;
  std::uint64_t elem_size;
};
persistent_vector::header &persistent_vector::hdr() const {
  static_assert(sizeof(header) <= k_header_bytes);
  return *reinterpret_cast<header *>(h_.resolve(header_));
}

void persistent_vector::init_in_place(allocator_handle h,
                                      std::uint64_t header_offset,
                                      std::uint64_t elem_size) {
  if (elem_size == 0) {
    throw_error(errc::invalid_argument, "element size must be positive");
  }
  header hd{offset_ref::k_null, 0, 0, elem_size};
  std::memcpy(h.resolve(header_offset), &hd, sizeof(hd));
}

std::uint64_t persistent_vector::create(allocator_handle h,
                                        std::uint64_t elem_size) {
  const std::uint64_t off = h.allocate(k_header_bytes);
  init_in_place(h, off, elem_size);
  return off;
}

void persistent_vector::push(const void *elem) {
  header &hd = hdr();
  if (hd.len == hd.capacity) {
    const std::uint64_t new_cap = hd.capacity == 0 ? 4 : hd.capacity * 2;
    const std::uint64_t new_data = h_.allocate(new_cap * hd.elem_size);
    if (hd.len > 0) {
      std::memcpy(h_.resolve(new_data), h_.resolve(hd.data),
                  hd.len * hd.elem_size);
    }
    if (hd.data != offset_ref::k_null) {
      h_.deallocate(hd.data);
    }
    hd.data = new_data;
    hd.capacity = new_cap;
  }
  std::memcpy(h_.resolve(hd.data) + hd.len * hd.elem_size, elem, hd.elem_size);
  ++hd.len;
}

const void *persistent_vector::get(std::uint64_t index) const {
  const header &hd = hdr();
  if (index >= hd.len) {
    throw_error(errc::invalid_argument, "vector index out of range");
  }
  return h_.resolve(hd.data) + index * hd.elem_size;
}

std::uint64_t persistent_vector::size() const { return hdr().len; }
std::uint64_t persistent_vector::capacity() const { return hdr().capacity; }
std::uint64_t persistent_vector::elem_size() const { return hdr().elem_size; }

void persistent_vector::destroy_storage() {
  header &hd = hdr();
  if (hd.data != offset_ref::k_null) {
    h_.deallocate(hd.data);
  }
  hd.data = offset_ref::k_null;
  hd.len = 0;
  hd.capacity = 0;
}

// -------------------------------------------------------------------- map

struct persistent_map::header {
  std::uint64_t buckets;  // offset_ref raw
  std::uint64_t n_buckets;
  std::uint64_t n_items;
  std::uint64_t value_size;
};

persistent_map::header &persistent_map::hdr() const {
  return *reinterpret_cast<header *>(h_.resolve(header_));
}

std::byte *persistent_map::bucket(std::uint64_t buckets_off,
                                  std::uint64_t i) const {
  return h_.resolve(buckets_off) + i * (8 + hdr().value_size);
}

void persistent_map::init_in_place(allocator_handle h,
                                   std::uint64_t header_offset,
                                   std::uint64_t value_size) {
  header hd{offset_ref::k_null, 0, 0, value_size};
  std::memcpy(h.resolve(header_offset), &hd, sizeof(hd));
}

std::uint64_t persistent_map::create(allocator_handle h,
                                     std::uint64_t value_size) {
  const std::uint64_t off = h.allocate(k_header_bytes);
  init_in_place(h, off, value_size);
  return off;
}

void persistent_map::grow() {
  header &hd = hdr();
  const std::uint64_t stride = 8 + hd.value_size;
  const std::uint64_t new_nb = hd.n_buckets == 0 ? 8 : hd.n_buckets * 2;
  const std::uint64_t new_off = h_.allocate(new_nb * stride);
  std::memset(h_.resolve(new_off), 0xFF, new_nb * stride);  // all-empty keys

  if (hd.buckets != offset_ref::k_null) {
    for (std::uint64_t i = 0; i < hd.n_buckets; ++i) {
      std::byte *b = bucket(hd.buckets, i);
      std::uint64_t key;
      std::memcpy(&key, b, 8);
      if (key == offset_ref::k_null) continue;
      std::uint64_t j = mix64(key) & (new_nb - 1);
      for (;;) {
        std::byte *nb = h_.resolve(new_off) + j * stride;
        std::uint64_t nkey;
        std::memcpy(&nkey, nb, 8);
        if (nkey == offset_ref::k_null) {
          std::memcpy(nb, b, stride);
          break;
        }
        j = (j + 1) & (new_nb - 1);
      }
    }
    h_.deallocate(hd.buckets);
  }
  hd.buckets = new_off;
  hd.n_buckets = new_nb;
}

std::pair<void *, bool> persistent_map::find_or_insert(std::uint64_t key) {
  if (key == offset_ref::k_null) {
    throw_error(errc::invalid_argument, "key 2^64-1 is reserved");
  }
  header *hd = &hdr();
  if (hd->n_buckets == 0 || (hd->n_items + 1) * 10 > hd->n_buckets * 7) {
    grow();
    hd = &hdr();
  }
  const std::uint64_t stride = 8 + hd->value_size;
  std::uint64_t i = mix64(key) & (hd->n_buckets - 1);
  for (;;) {
    std::byte *b = h_.resolve(hd->buckets) + i * stride;
    std::uint64_t bkey;
    std::memcpy(&bkey, b, 8);
    if (bkey == key) {
      return {b + 8, false};
    }
    if (bkey == offset_ref::k_null) {
      std::memcpy(b, &key, 8);
      std::memset(b + 8, 0, hd->value_size);
      ++hd->n_items;
      return {b + 8, true};
    }
    i = (i + 1) & (hd->n_buckets - 1);
  }
}

void persistent_map::insert(std::uint64_t key, const void *value) {
  auto [slot, inserted] = find_or_insert(key);
  if (!inserted) {
    throw_error(errc::already_exists, "key already present");
  }
  std::memcpy(slot, value, hdr().value_size);
}

void *persistent_map::find(std::uint64_t key) const {
  const header &hd = hdr();
  if (hd.n_buckets == 0 || key == offset_ref::k_null) return nullptr;
  const std::uint64_t stride = 8 + hd.value_size;
  std::uint64_t i = mix64(key) & (hd.n_buckets - 1);
  for (;;) {
    std::byte *b = h_.resolve(hd.buckets) + i * stride;
    std::uint64_t bkey;
    std::memcpy(&bkey, b, 8);
    if (bkey == key) return b + 8;
    if (bkey == offset_ref::k_null) return nullptr;
    i = (i + 1) & (hd.n_buckets - 1);
  }
}

std::uint64_t persistent_map::size() const { return hdr().n_items; }

void persistent_map::destroy_storage() {
  header &hd = hdr();
  if (hd.buckets != offset_ref::k_null) {
    h_.deallocate(hd.buckets);
  }
  hd.buckets = offset_ref::k_null;
  hd.n_buckets = 0;
  hd.n_items = 0;
}

// ------------------------------------------------------------------ graph

struct banked_adjacency_list::header {
  std::uint64_t num_banks;
  std::uint64_t banks;  // offset of num_banks contiguous map headers
};

banked_adjacency_list::banked_adjacency_list(allocator_handle h,
                                             std::uint64_t header_offset)
    : h_(h), header_(header_offset) {
  header hd;
  std::memcpy(&hd, h_.resolve(header_), sizeof(hd));
  num_banks_ = hd.num_banks;
  banks_off_ = hd.banks;
  locks_ = std::make_unique<std::mutex[]>(num_banks_);
}

banked_adjacency_list banked_adjacency_list::create(manager &m,
                                                    const std::string &name,
                                                    std::uint64_t num_banks) {
  if (num_banks == 0) {
    throw_error(errc::invalid_argument, "bank count must be positive");
  }
  allocator_handle h(m);
  const std::uint64_t head_off =
      m.construct_named(name, sizeof(header), 1, "banked_adjacency_list");
  const std::uint64_t banks_off =
      h.allocate(num_banks * persistent_map::k_header_bytes);
  for (std::uint64_t b = 0; b < num_banks; ++b) {
    persistent_map::init_in_place(
        h, banks_off + b * persistent_map::k_header_bytes, 8);
  }
  header hd{num_banks, banks_off};
  std::memcpy(h.resolve(head_off), &hd, sizeof(hd));
  return banked_adjacency_list(h, head_off);
}

banked_adjacency_list banked_adjacency_list::open(manager &m,
                                                  const std::string &name) {
  const auto rec = m.find_named(name);
  if (!rec) {
    throw_error(errc::not_found, "no graph named " + name);
  }
  return banked_adjacency_list(allocator_handle(m), rec->offset);
}

std::uint64_t banked_adjacency_list::bank_of(std::uint64_t vertex) const {
  return mix64(vertex) % num_banks_;
}

std::uint64_t banked_adjacency_list::bank_header_offset(
    std::uint64_t bank) const {
  return banks_off_ + bank * persistent_map::k_header_bytes;
}

void banked_adjacency_list::insert_edge(std::uint64_t src, std::uint64_t dst) {
  const std::uint64_t bank = bank_of(src);
  std::lock_guard lock(locks_[bank]);
  persistent_map table(h_, bank_header_offset(bank));
  auto [slot, inserted] = table.find_or_insert(src);
  std::uint64_t vec_off;
  if (inserted) {
    // allocating the vector cannot move the bucket array, so `slot` stays valid
    vec_off = persistent_vector::create(h_, 8);
    std::memcpy(slot, &vec_off, 8);
  } else {
    std::memcpy(&vec_off, slot, 8);
  }
  persistent_vector edges(h_, vec_off);
  edges.push(&dst);
}

std::vector<std::uint64_t> banked_adjacency_list::neighbors(
    std::uint64_t v) const {
  std::vector<std::uint64_t> out;
  persistent_map table(h_, bank_header_offset(bank_of(v)));
  const void *slot = table.find(v);
  if (slot == nullptr) return out;
  std::uint64_t vec_off;
  std::memcpy(&vec_off, slot, 8);
  persistent_vector edges(h_, vec_off);
  const std::uint64_t n = edges.size();
  out.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint64_t dst;
    std::memcpy(&dst, edges.get(i), 8);
    out.push_back(dst);
  }
  return out;
}

std::uint64_t banked_adjacency_list::degree(std::uint64_t v) const {
  persistent_map table(h_, bank_header_offset(bank_of(v)));
  const void *slot = table.find(v);
  if (slot == nullptr) return 0;
  std::uint64_t vec_off;
  std::memcpy(&vec_off, slot, 8);
  return persistent_vector(h_, vec_off).size();
}

}  // namespace persistheap
