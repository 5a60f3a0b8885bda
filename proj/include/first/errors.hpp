#pragma once

#include <stdexcept>
#include <string>

namespace first {

// Shape or rank disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Token id outside the vocabulary.
class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// KV cache positions or skip set disagree with the request.
class CacheConsistencyError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid configuration value (ranks, ranges, counts).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input that is well formed but degenerate (empty sets, all-masked rows).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// NaN/Inf encountered during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Subset enumeration beyond the supported layer count.
class EnumerationLimitError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Binary container problems. Each failure mode has its own type.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace first
