#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace isodream {

// Raised when a documented precondition or invariant is violated.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when training produces a non-finite loss; carries the component name.
class TrainingFailure : public std::runtime_error {
 public:
  TrainingFailure(const std::string& component, const std::string& msg)
      : std::runtime_error("training failure in '" + component + "': " + msg),
        component_(component) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

// Raised on malformed files, hash mismatches and config errors.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
[[noreturn]] void contract_fail(const char* expr, const char* file, int line,
                                const std::string& msg);
}

#define ISO_CHECK(cond, msg)                                              \
  do {                                                                    \
    if (!(cond)) {                                                        \
      ::isodream::detail::contract_fail(#cond, __FILE__, __LINE__, msg);  \
    }                                                                     \
  } while (0)

}  // namespace isodream
