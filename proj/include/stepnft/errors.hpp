#pragma once

#include <stdexcept>
#include <string>

namespace stepnft {

// Invalid hyperparameters, architectures, or config files.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Caller broke an operation's precondition (dimension mismatch, bad label...).
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of a formula (e.g. t <= 0).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Step covariance sigma^2 * delta is zero, so variance normalization is undefined.
struct DegenerateCovarianceError : std::domain_error {
  using std::domain_error::domain_error;
};

struct NonFiniteLossError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ContractError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                        " vs " + std::to_string(b) + ")");
  }
}

}  // namespace detail
}  // namespace stepnft
