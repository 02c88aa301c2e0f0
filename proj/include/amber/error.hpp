#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace amber {

enum class ErrorKind {
  kDimension,
  kMask,
  kIndex,
  kShape,
  kUsage,
  kInput,
  kLength,
  kBatchComposition,
  kSize,
  kConfig,
  kData,
  kDivergence,
  kFormat,
  kIo,
  kEvaluation,
};

std::string_view to_string(ErrorKind kind);

// Every failure surfaced by the library carries a kind so callers (the CLI in
// particular) can map it onto an exit code without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace amber
