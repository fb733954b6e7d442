#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace brivl {

// Process exit codes are a stable contract of the command-line tool.
enum class ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const { return code_; }

 private:
  ExitCode code_;
};

// Bad shapes or invalid arguments handed to a library call.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ExitCode::kUsage, what) {}
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(ExitCode::kUsage, what) {}
};

// On-disk format problems. Every instance names the byte offset.
class FormatError : public Error {
 public:
  enum class Kind { kBadMagic, kVersion, kTruncated, kChecksum, kConfigMismatch, kCorrupt };

  FormatError(Kind kind, std::uint64_t offset, const std::string& what)
      : Error(ExitCode::kData, what + " (at byte offset " + std::to_string(offset) + ")"),
        kind_(kind),
        offset_(offset) {}

  Kind kind() const { return kind_; }
  std::uint64_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::uint64_t offset_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ExitCode::kData, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ExitCode::kNumerical, what) {}
};

}  // namespace brivl
