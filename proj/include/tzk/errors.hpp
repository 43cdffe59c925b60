// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tzk {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class DomainError : public Error { public: using Error::Error; };
class ContractError : public Error { public: using Error::Error; };
class StateError : public Error { public: using Error::Error; };
class KeyError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class RangeError : public Error { public: using Error::Error; };
class LabelingError : public Error { public: using Error::Error; };
class DegenerateInputError : public Error { public: using Error::Error; };
/// backward() called on a graph that cannot produce gradients.
class GradientError : public Error { public: using Error::Error; };

/// Non-finite value produced inside a computation.
class NumericError : public Error {
public:
    using Error::Error;
};

[[noreturn]] void throw_numeric(const std::string& where);

}  // namespace tzk
