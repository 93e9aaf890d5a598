#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace propih {

// Raised for malformed user input (files, configs, CLI arguments, shape or
// value preconditions on public entry points). The CLI maps this to exit 1;
// anything else that escapes maps to exit 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ValidationError("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename... Args>
[[noreturn]] inline void fail_validation(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  throw ValidationError(os.str());
}

}  // namespace propih
