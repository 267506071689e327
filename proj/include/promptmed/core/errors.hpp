#pragma once

#include <stdexcept>
#include <string>

namespace promptmed {

/// Raised when an operation needs foreground pixels and the mask has none.
class NoForegroundError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// File-level failure. The message always carries the offending path.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// A training loop produced a non-finite loss.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cooperative cancellation of a long-running job.
class Cancelled : public std::runtime_error {
 public:
  Cancelled() : std::runtime_error("cancelled") {}
};

}  // namespace promptmed
