#pragma once

#include <stdexcept>
#include <string>

namespace smpo {

// Exceptions carry the failure category; the CLI maps them to exit codes.

class InvalidRangeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DimensionMismatchError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class TimestepOrderError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class GraphReuseError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class DegenerateStatsError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class MissingLabelError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ArchitectureMismatchError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Bad or inconsistent configuration, malformed input files. CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite loss or parameters during training. CLI exit code 3.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace smpo
