#pragma once

#include <stdexcept>
#include <string>

namespace ulpt {

// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes of operands do not agree, or a dimension is zero.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or out-of-range configuration (r > d, bad mode, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// A least-squares fit had no usable data (tail estimate of 0 or 1).
class DegenerateFitError : public DomainError {
 public:
  using DomainError::DomainError;
};

// Budget too small for any rank of the requested variant.
class InfeasibleBudgetError : public DomainError {
 public:
  using DomainError::DomainError;
};

// Training produced a non-finite loss.
class DivergedError : public Error {
 public:
  using Error::Error;
};

// Checkpoint / manifest I/O and decoding failures.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CrcMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace ulpt
