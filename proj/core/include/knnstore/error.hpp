#pragma once

#include <stdexcept>
#include <string>

namespace knnstore {

// Every failure mode the library reports. CLI maps these to structured
// stderr lines; tests match on the code, not the message text.
enum class ErrorCode {
  DimensionMismatch,
  ValueOutOfVocab,
  ProbOutOfRange,
  EmptyInput,
  InvalidConfig,
  InvalidParam,
  IoError,
  BadMagic,
  VersionMismatch,
  TruncatedFile,
  ParseError,
  MissingHead,
  InsufficientFamilies,
  NonContiguousSentence,
  MissingCosts,
  MissingFamilies,
  KTooLarge,
  WrongNeighborCount,
  InvalidDistribution,
  MissingGold,
  UsageError,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace knnstore
