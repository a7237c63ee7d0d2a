#pragma once

#include <stdexcept>
#include <string>

namespace ikd {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Token id, target id or axis outside its valid range.
class IndexError : public std::out_of_range {
  public:
    using std::out_of_range::out_of_range;
};

// A documented precondition was violated by the caller.
class ContractError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

// Malformed file contents (tensor files, manifests, configs).
class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Parallel corpus files that do not line up.
class AlignmentError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Inconsistent model / distillation configuration.
class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace ikd
