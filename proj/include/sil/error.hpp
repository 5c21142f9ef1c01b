#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sil {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not chain.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller-supplied value is outside its documented range.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A computation produced a NaN or an infinity.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// backward() was called without the forward cache it needs.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the byte offset where parsing failed,
/// when one is known.
class FormatError : public Error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  explicit FormatError(const std::string& what) : Error(what), offset_(npos) {}
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }
  bool has_offset() const noexcept { return offset_ != npos; }

 private:
  std::size_t offset_;
};

}  // namespace sil
