#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace crcnn {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments, shape mismatches, malformed input records.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures (missing file, unwritable directory).
class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

#define CRCNN_ENFORCE(cond, ...)                                   \
  do {                                                             \
    if (!(cond)) {                                                 \
      throw ::crcnn::ValidationError(::crcnn::detail::concat(__VA_ARGS__)); \
    }                                                              \
  } while (0)

}  // namespace crcnn
