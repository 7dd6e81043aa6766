#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace chips {

/// Error classes. Each maps to a distinct process exit code in the CLI.
enum class ErrorKind : int {
  Config = 3,
  Shape = 4,
  NumericalBreakdown = 5,
  IndefiniteSurrogate = 6,
  DegenerateEmbedding = 7,
  InsufficientBatch = 8,
  SketchMismatch = 9,
  MarginUndefined = 10,
  DuplicateSample = 11,
  DegenerateDistribution = 12,
  EmptyPool = 13,
  Format = 14,
  CorruptShard = 15,
  IndexOutOfRange = 16,
  Overflow = 17,
  DegenerateWorld = 18,
  Io = 19,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::Shape: return "ShapeError";
    case ErrorKind::NumericalBreakdown: return "NumericalBreakdown";
    case ErrorKind::IndefiniteSurrogate: return "IndefiniteSurrogate";
    case ErrorKind::DegenerateEmbedding: return "DegenerateEmbedding";
    case ErrorKind::InsufficientBatch: return "InsufficientBatch";
    case ErrorKind::SketchMismatch: return "SketchMismatch";
    case ErrorKind::MarginUndefined: return "MarginUndefined";
    case ErrorKind::DuplicateSample: return "DuplicateSample";
    case ErrorKind::DegenerateDistribution: return "DegenerateDistribution";
    case ErrorKind::EmptyPool: return "EmptyPool";
    case ErrorKind::Format: return "FormatError";
    case ErrorKind::CorruptShard: return "CorruptShard";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::Overflow: return "Overflow";
    case ErrorKind::DegenerateWorld: return "DegenerateWorld";
    case ErrorKind::Io: return "IoError";
  }
  return "Error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

template <ErrorKind K>
class TypedError : public Error {
 public:
  explicit TypedError(const std::string& what) : Error(K, what) {}
};

using ConfigError = TypedError<ErrorKind::Config>;
using ShapeError = TypedError<ErrorKind::Shape>;
using NumericalBreakdown = TypedError<ErrorKind::NumericalBreakdown>;
using InsufficientBatch = TypedError<ErrorKind::InsufficientBatch>;
using SketchMismatch = TypedError<ErrorKind::SketchMismatch>;
using MarginUndefined = TypedError<ErrorKind::MarginUndefined>;
using DuplicateSample = TypedError<ErrorKind::DuplicateSample>;
using DegenerateDistribution = TypedError<ErrorKind::DegenerateDistribution>;
using EmptyPool = TypedError<ErrorKind::EmptyPool>;
using FormatError = TypedError<ErrorKind::Format>;
using IndexOutOfRange = TypedError<ErrorKind::IndexOutOfRange>;
using Overflow = TypedError<ErrorKind::Overflow>;
using DegenerateWorld = TypedError<ErrorKind::DegenerateWorld>;
using IoError = TypedError<ErrorKind::Io>;

/// Zero-norm projection of a sample; carries the offending sample id.
class DegenerateEmbedding : public Error {
 public:
  DegenerateEmbedding(std::uint64_t sample_id, const std::string& what)
      : Error(ErrorKind::DegenerateEmbedding, what + " (sample " + std::to_string(sample_id) + ")"),
        sample_id_(sample_id) {}
  std::uint64_t sample_id() const noexcept { return sample_id_; }

 private:
  std::uint64_t sample_id_;
};

/// Truncated or inconsistent shard payload; carries the byte offset where reading failed.
class CorruptShard : public Error {
 public:
  CorruptShard(std::uint64_t offset, const std::string& what)
      : Error(ErrorKind::CorruptShard, what + " at byte offset " + std::to_string(offset)),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class IndefiniteSurrogate : public Error {
 public:
  IndefiniteSurrogate(double suggested_lambda, const std::string& what)
      : Error(ErrorKind::IndefiniteSurrogate,
              what + "; try lambda_ridge >= " + std::to_string(suggested_lambda)),
        suggested_lambda_(suggested_lambda) {}
  double suggested_lambda() const noexcept { return suggested_lambda_; }

 private:
  double suggested_lambda_;
};

}  // namespace chips
