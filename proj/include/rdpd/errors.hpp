#pragma once

#include <stdexcept>
#include <string>

namespace rdpd {

// Every error raised by the library derives from Error so callers can map
// categories onto exit codes without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Non-finite values produced or consumed by a numeric kernel.
class NumericError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Student and teacher disagree on segmentation.
class AlignmentError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Training produced a non-finite loss or gradient.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CorruptionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Metric is not defined for the given labels (e.g. a single class present).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace rdpd
