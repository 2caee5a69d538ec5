#pragma once

#include <stdexcept>
#include <string>

namespace lungrisk {

// Broad failure classes. The CLI maps each one to a distinct exit status.
enum class ErrorKind {
  Usage,
  Config,
  Dimension,
  Format,
  Io,
  DataConsistency,
  Numeric,
  Contract,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define LUNGRISK_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

LUNGRISK_DEFINE_ERROR(UsageError, Usage)
LUNGRISK_DEFINE_ERROR(ConfigError, Config)
LUNGRISK_DEFINE_ERROR(DimensionError, Dimension)
LUNGRISK_DEFINE_ERROR(FormatError, Format)
LUNGRISK_DEFINE_ERROR(IoError, Io)
LUNGRISK_DEFINE_ERROR(DataConsistencyError, DataConsistency)
LUNGRISK_DEFINE_ERROR(NumericError, Numeric)
LUNGRISK_DEFINE_ERROR(ContractError, Contract)

// Finer-grained failures that callers may want to tell apart.
class InvalidBatchError : public NumericError {
 public:
  using NumericError::NumericError;
};
class MissingGradientError : public ContractError {
 public:
  using ContractError::ContractError;
};
class OutOfBoundsError : public DimensionError {
 public:
  using DimensionError::DimensionError;
};
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};
class DegenerateCohortError : public DataConsistencyError {
 public:
  using DataConsistencyError::DataConsistencyError;
};
class PairingError : public DataConsistencyError {
 public:
  using DataConsistencyError::DataConsistencyError;
};
class NoNoduleError : public DataConsistencyError {
 public:
  using DataConsistencyError::DataConsistencyError;
};

#undef LUNGRISK_DEFINE_ERROR

}  // namespace lungrisk
