// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace freeinsert {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Violated precondition between components (shape mismatch, missing layer, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class RangeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Raised by learned components; carries the timestep/branch context once the
// engine has annotated it.
class BackendError : public Error {
public:
    using Error::Error;
};

// Malformed user input. `field` names the offending flag or JSON field.
class ValidationError : public Error {
public:
    ValidationError(std::string field, const std::string& message)
        : Error(message), m_field(std::move(field)) {}

    const std::string& field() const noexcept { return m_field; }

private:
    std::string m_field;
};

}  // namespace freeinsert
