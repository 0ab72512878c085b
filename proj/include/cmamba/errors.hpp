#ifndef CMAMBA_ERRORS_HPP
#define CMAMBA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace cmamba {

// I/O failures: missing files, unreadable images, write errors.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed bitstreams, checkpoints, or config files.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kBadVersion, kTruncated, kLengthOverrun, kBadField };

  FormatError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Numeric breakdown: non-finite loss, invalid coder state, failed numeric contract.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cmamba

#endif  // CMAMBA_ERRORS_HPP
