// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <persistheap/bs_msync.hpp>

using namespace persistheap::bs_msync;
namespace fs = std::filesystem;

namespace {

struct temp_file {
  fs::path path;
  int fd = -1;
  explicit temp_file(std::uint64_t size) {
    path = fs::temp_directory_path() /
           ("ph_bsm_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_TRUNC, 0644);
    REQUIRE(fd >= 0);
    REQUIRE(::ftruncate(fd, static_cast<off_t>(size)) == 0);
  }
  ~temp_file() {
    if (fd >= 0) ::close(fd);
    fs::remove(path);
  }
  static int &counter() {
    static int c = 0;
    return c;
  }
};

std::vector<char> file_bytes(const fs::path &p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("pagemap is readable here") {
  // The rest of this suite depends on it; fail loudly rather than skip.
  REQUIRE(pagemap_available());
}

TEST_CASE("clean mapping reports no dirty pages, reads do not dirty") {
  const std::uint64_t size = 64 * 4096;
  temp_file tf(size);
  private_mapping m(tf.fd, 0, size, false);
  CHECK(m.scan_dirty().empty());

  volatile std::uint64_t sink = 0;
  for (std::uint64_t i = 0; i < size; i += 4096) {
    sink = sink + static_cast<std::uint64_t>(m.data()[i]);
  }
  (void)sink;
  CHECK(m.scan_dirty().empty());
}

TEST_CASE("dirty runs are exact, sorted, maximal") {
  const std::uint64_t pages = 128;
  temp_file tf(pages * 4096);
  private_mapping m(tf.fd, 0, pages * 4096, false);
  REQUIRE(m.page_size() == 4096);

  for (std::uint64_t p : {3u, 4u, 5u, 9u, 64u, 65u, 127u}) {
    m.data()[p * 4096 + 17] = std::byte{1};
  }
  const std::vector<dirty_run> expect{{3, 3}, {9, 1}, {64, 2}, {127, 1}};
  CHECK(m.scan_dirty() == expect);
  // Scanning is read-only: the result is stable.
  CHECK(m.scan_dirty() == expect);
}

TEST_CASE("write_back produces a byte-identical file and resets tracking") {
  const std::uint64_t size = 256 * 4096;
  temp_file tf(size);
  // Seed the file with known content.
  {
    std::vector<char> init(size);
    std::mt19937_64 rng(1);
    for (auto &c : init) c = static_cast<char>(rng());
    REQUIRE(::pwrite(tf.fd, init.data(), size, 0) ==
            static_cast<ssize_t>(size));
  }
  private_mapping m(tf.fd, 0, size, false);
  std::vector<char> shadow = file_bytes(tf.path);

  std::mt19937_64 rng(2);
  for (int i = 0; i < 2000; ++i) {
    const auto off = rng() % size;
    const auto val = static_cast<char>(rng());
    m.data()[off] = static_cast<std::byte>(val);
    shadow[off] = val;
  }
  auto st = write_back(m);
  CHECK(st.pages_scanned == 256);
  CHECK(st.pages_dirty >= 1);
  CHECK(st.pages_dirty <= 2000);
  CHECK(st.bytes_written == st.pages_dirty * 4096);
  CHECK(file_bytes(tf.path) == shadow);

  // Tracking restarted: nothing dirty, contents preserved.
  CHECK(m.scan_dirty().empty());
  CHECK(std::memcmp(m.data(), shadow.data(), size) == 0);

  // A second round after reset works the same way.
  m.data()[123456] = std::byte{0x5a};
  shadow[123456] = 0x5a;
  write_back(m);
  CHECK(file_bytes(tf.path) == shadow);
}

TEST_CASE("reset_tracking discards unflushed local writes") {
  const std::uint64_t size = 16 * 4096;
  temp_file tf(size);
  const char keep[] = "durable";
  REQUIRE(::pwrite(tf.fd, keep, sizeof keep, 4096) ==
          static_cast<ssize_t>(sizeof keep));
  private_mapping m(tf.fd, 0, size, false);
  m.data()[4096] = std::byte{'X'};
  m.reset_tracking();
  CHECK(m.scan_dirty().empty());
  CHECK(std::memcmp(m.data() + 4096, keep, sizeof keep) == 0);
}

TEST_CASE("multi-mapping write_back with worker pool") {
  const std::uint64_t size = 32 * 4096;
  std::vector<std::unique_ptr<temp_file>> files;
  std::vector<std::unique_ptr<private_mapping>> maps;
  std::vector<std::vector<char>> shadows;
  for (int i = 0; i < 5; ++i) {
    files.push_back(std::make_unique<temp_file>(size));
    maps.push_back(
        std::make_unique<private_mapping>(files[i]->fd, 0, size, false));
    shadows.emplace_back(size, 0);
  }
  std::mt19937_64 rng(3);
  for (int i = 0; i < 5; ++i) {
    for (int w = 0; w < 300; ++w) {
      const auto off = rng() % size;
      const auto val = static_cast<char>(rng() | 1);
      maps[i]->data()[off] = static_cast<std::byte>(val);
      shadows[i][off] = val;
    }
  }
  std::vector<private_mapping *> ptrs;
  for (auto &m : maps) ptrs.push_back(m.get());
  auto st = write_back(ptrs, 3);
  CHECK(st.workers_used == 3);
  CHECK(st.pages_scanned == 5 * 32);
  for (int i = 0; i < 5; ++i) {
    CHECK(file_bytes(files[i]->path) == shadows[i]);
    CHECK(maps[i]->scan_dirty().empty());
  }
}

TEST_CASE("nonzero file_offset maps the right window") {
  const std::uint64_t size = 8 * 4096;
  temp_file tf(2 * size);
  const char tag[] = "window";
  REQUIRE(::pwrite(tf.fd, tag, sizeof tag, size + 100) ==
          static_cast<ssize_t>(sizeof tag));
  private_mapping m(tf.fd, size, size, false);
  CHECK(std::memcmp(m.data() + 100, tag, sizeof tag) == 0);
  m.data()[200] = std::byte{'!'};
  write_back(m);
  char c = 0;
  REQUIRE(::pread(tf.fd, &c, 1, size + 200) == 1);
  CHECK(c == '!');
}
