#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace xstream {

// Base of every error raised by the engine. The C API maps subclasses onto
// xs_status codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class StepError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class GradCheckError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  ProtocolError(const std::string& what, std::uint64_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Raised when a conditioning stream ends in the middle of a segment.
class TruncationError : public Error {
 public:
  TruncationError(const std::string& what, std::int64_t last_complete_chunk)
      : Error(what), last_complete_chunk_(last_complete_chunk) {}
  // -1 when no chunk was completed.
  std::int64_t last_complete_chunk() const noexcept { return last_complete_chunk_; }

 private:
  std::int64_t last_complete_chunk_;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::int64_t step) : Error(what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace xstream
