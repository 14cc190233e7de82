#pragma once

#include <stdexcept>
#include <string>

namespace spikegpt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};

// Token id outside the vocabulary.
struct VocabError : Error {
  using Error::Error;
};

// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

// Corpus / dataset / file-content problems.
struct DataError : Error {
  using Error::Error;
};

// Bad configuration or flag combinations.
struct ConfigError : Error {
  using Error::Error;
};

// Filesystem failures.
struct IoError : Error {
  using Error::Error;
};

// Violated internal contract (e.g. non-binary input at a declared spiking site).
struct ContractError : Error {
  using Error::Error;
};

}  // namespace spikegpt
