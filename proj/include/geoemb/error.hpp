#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace geoemb {

/// Domain error carrying a stable, machine-readable code (e.g. "bad_magic",
/// "k_out_of_range"). The CLI maps these to exit status 1 and a JSON record.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  [[nodiscard]] const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

namespace detail {

[[noreturn]] inline void fail(std::string code, const std::string& message) {
  throw Error(std::move(code), message);
}

inline void require(bool cond, const char* code, const std::string& message) {
  if (!cond) fail(code, message);
}

}  // namespace detail
}  // namespace geoemb
