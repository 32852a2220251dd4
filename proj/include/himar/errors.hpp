// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace himar {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
   public:
    using Error::Error;
};

/// Invalid hyperparameter, option, or schedule request.
class ConfigError : public Error {
   public:
    using Error::Error;
};

/// NaN/Inf reached a place where it must not.
class NumericError : public Error {
   public:
    using Error::Error;
};

/// Misuse of the autodiff graph (non-scalar loss, double backward, ...).
class GraphError : public Error {
   public:
    using Error::Error;
};

/// Malformed or incompatible file (checkpoint, dataset, CSV, config).
class FormatError : public Error {
   public:
    using Error::Error;
};

}  // namespace himar
