#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace oodprobe {

// Every failure raised by the library derives from Error so callers can catch
// the whole family; the subclasses mirror the failure categories the CLI maps
// to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define OODPROBE_ERROR(Name)          \
  class Name : public Error {         \
   public:                            \
    using Error::Error;               \
  }

OODPROBE_ERROR(DimensionError);
OODPROBE_ERROR(LabelError);
OODPROBE_ERROR(NumericError);
OODPROBE_ERROR(DegenerateError);
OODPROBE_ERROR(StateError);
OODPROBE_ERROR(FormatError);
OODPROBE_ERROR(LengthError);
OODPROBE_ERROR(ConsistencyError);
OODPROBE_ERROR(SamplingError);
OODPROBE_ERROR(SplitError);
OODPROBE_ERROR(SpecError);
OODPROBE_ERROR(CheckpointError);
OODPROBE_ERROR(ProtocolError);
OODPROBE_ERROR(CoverageError);
OODPROBE_ERROR(IntegrityError);
OODPROBE_ERROR(ConfigError);
OODPROBE_ERROR(StatisticsError);
OODPROBE_ERROR(DomainError);
OODPROBE_ERROR(IoError);

#undef OODPROBE_ERROR

class TrainingFailure : public Error {
 public:
  TrainingFailure(const std::string& what, std::int64_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace oodprobe
