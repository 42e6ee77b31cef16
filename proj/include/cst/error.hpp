#pragma once

#include <stdexcept>
#include <string>

namespace cst {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class DomainError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class BoundsError : public Error { public: using Error::Error; };
class LookupError : public Error { public: using Error::Error; };
class FeatureError : public Error { public: using Error::Error; };
class TrainingDataError : public Error { public: using Error::Error; };
class PlacementError : public Error { public: using Error::Error; };
class ValidationError : public Error { public: using Error::Error; };

/// Parse failure; `line` is 1-based, 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), message_(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& message() const noexcept { return message_; }

  /// Same error with `prefix: ` prepended (typically a file name).
  ParseError in(const std::string& prefix) const { return ParseError(prefix + ": " + message_, line_); }

 private:
  std::string message_;
  std::size_t line_;
};

/// Serialized data whose format or version this build does not understand.
class VersionError : public Error { public: using Error::Error; };

class IoError : public Error {
 public:
  IoError(const std::string& what, std::string path)
      : Error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace cst
