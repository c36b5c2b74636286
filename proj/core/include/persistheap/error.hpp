// SPDX-License-Identifier: Apache-2.0

#ifndef PERSISTHEAP_ERROR_HPP
#define PERSISTHEAP_ERROR_HPP

#include <stdexcept>
#include <string>

namespace persistheap {

enum class errc {
  invalid_argument,   // bad request size, bad flag combination
  out_of_domain,      // size outside the small/large split the call handles
  out_of_space,       // no empty chunk run fits in the reservation
  double_free,        // offset not currently live
  already_exists,     // duplicate name / existing datastore path
  not_found,          // missing datastore or file
  bad_format,         // bad magic, version mismatch, truncated, checksum
  io_error,           // filesystem / mmap failure
  read_only,          // mutating call on a read-only manager
  unsupported,        // missing platform capability (pagemap, punch, clone)
};

class error : public std::runtime_error {
 public:
  error(errc code, const std::string &what)
      : std::runtime_error(what), code_(code) {}

  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void throw_error(errc code, const std::string &what) {
  throw error(code, what);
}

}  // namespace persistheap

#endif  // PERSISTHEAP_ERROR_HPP
