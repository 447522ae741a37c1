#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace co3 {

// Machine-readable failure categories; the CLI prints them verbatim.
enum class ErrorCode {
  usage,
  config,
  corpus,
  shape,
  checkpoint_missing,
  checkpoint_format,
  io,
  diverged,
  precondition,
};

constexpr std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::usage: return "E_USAGE";
    case ErrorCode::config: return "E_CONFIG";
    case ErrorCode::corpus: return "E_CORPUS";
    case ErrorCode::shape: return "E_SHAPE";
    case ErrorCode::checkpoint_missing: return "E_CHECKPOINT_MISSING";
    case ErrorCode::checkpoint_format: return "E_CHECKPOINT_FORMAT";
    case ErrorCode::io: return "E_IO";
    case ErrorCode::diverged: return "E_DIVERGED";
    case ErrorCode::precondition: return "E_PRECONDITION";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace co3
