#ifndef ORDERLAB_ERRORS_HPP
#define ORDERLAB_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace orderlab {

/// Shapes of two operands do not agree.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// A non-finite or otherwise unusable number was produced or supplied.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid experiment or stream configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace orderlab

#endif  // ORDERLAB_ERRORS_HPP
