#pragma once

#include <stdexcept>
#include <string>

namespace star {

// Every failure raised by the library derives from Error so the CLI can map
// the category to an exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class EmptySequenceError : public Error {
public:
    using Error::Error;
};

class InconsistencyError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

} // namespace star
