#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace repmech {

// Broad failure classes. The CLI maps these onto exit codes.
enum class ErrorClass {
  kUsage,    // bad flags, bad hook sites, invalid specs
  kData,     // malformed files, missing data, vocabulary / length errors
  kNumeric,  // convergence failures, degenerate inputs
};

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what)
      : std::runtime_error(what), class_(cls) {}
  ErrorClass error_class() const noexcept { return class_; }

 private:
  ErrorClass class_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorClass::kUsage, what) {}
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorClass::kData, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorClass::kData, what) {}
};

class VocabularyError : public Error {
 public:
  explicit VocabularyError(const std::string& what) : Error(ErrorClass::kData, what) {}
};

class LengthError : public Error {
 public:
  explicit LengthError(const std::string& what) : Error(ErrorClass::kData, what) {}
};

class TemplateError : public Error {
 public:
  explicit TemplateError(const std::string& what) : Error(ErrorClass::kData, what) {}
};

class HookError : public Error {
 public:
  explicit HookError(const std::string& what) : Error(ErrorClass::kUsage, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorClass::kData, what) {}
};

// Carries a location: a byte offset for binary formats, a line number for
// text formats. Exactly one of the two is meaningful (the other is -1).
class ParseError : public Error {
 public:
  static ParseError at_byte(std::int64_t byte, const std::string& what) {
    return ParseError(byte, -1, what + " (at byte " + std::to_string(byte) + ")");
  }
  static ParseError at_line(std::int64_t line, const std::string& what) {
    return ParseError(-1, line, what + " (at line " + std::to_string(line) + ")");
  }
  std::int64_t byte() const noexcept { return byte_; }
  std::int64_t line() const noexcept { return line_; }

 private:
  ParseError(std::int64_t byte, std::int64_t line, const std::string& what)
      : Error(ErrorClass::kData, what), byte_(byte), line_(line) {}
  std::int64_t byte_;
  std::int64_t line_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, int iterations)
      : Error(ErrorClass::kNumeric, what + " after " + std::to_string(iterations) + " iterations"),
        iterations_(iterations) {}
  int iterations() const noexcept { return iterations_; }

 private:
  int iterations_;
};

class DegenerateError : public Error {
 public:
  explicit DegenerateError(const std::string& what) : Error(ErrorClass::kNumeric, what) {}
};

}  // namespace repmech
