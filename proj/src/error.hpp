#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace vidistill {

// Error categories map one-to-one onto the C API status codes and the CLI
// exit codes (usage/config = 1, data = 2, numerical = 3).
enum class ErrorKind { kUsage = 1, kData = 2, kNumerical = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {
template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}
}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(ErrorKind kind, Args&&... args) {
  throw Error(kind, detail::concat(std::forward<Args>(args)...));
}

template <typename... Args>
[[noreturn]] void usage_error(Args&&... args) {
  fail(ErrorKind::kUsage, std::forward<Args>(args)...);
}

template <typename... Args>
[[noreturn]] void data_error(Args&&... args) {
  fail(ErrorKind::kData, std::forward<Args>(args)...);
}

template <typename... Args>
[[noreturn]] void numerical_error(Args&&... args) {
  fail(ErrorKind::kNumerical, std::forward<Args>(args)...);
}

}  // namespace vidistill
