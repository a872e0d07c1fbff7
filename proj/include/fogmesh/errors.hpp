#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fogmesh {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Launch-spec document rejected; `line` is 0 when only the field path is known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0, std::string field = "")
      : Error(what), line(line), field(std::move(field)) {}
  std::size_t line;
  std::string field;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// No catalog entry satisfies the resource requirements.
class UnsatisfiableError : public Error {
 public:
  UnsatisfiableError(const std::string& what, std::string dimension)
      : Error(what), dimension(std::move(dimension)) {}
  std::string dimension;
};

class AuthError : public Error {
 public:
  using Error::Error;
};

class ReplayError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// Decoder received a delta whose base does not match its state; the stream
// owner should request a keyframe.
class ResyncNeeded : public Error {
 public:
  ResyncNeeded(const std::string& what, std::uint64_t expected_base, std::uint64_t got_base)
      : Error(what), expected_base(expected_base), got_base(got_base) {}
  std::uint64_t expected_base;
  std::uint64_t got_base;
};

}  // namespace fogmesh
