#pragma once

#include <stdexcept>
#include <string>

namespace phoenix {

// Root of every error the library throws. Subclasses exist so callers (the
// CLI in particular) can map failure classes onto exit codes.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Invalid argument or configuration value supplied by the caller.
class ArgumentError : public Error {
   public:
    using Error::Error;
};

class ShapeError : public Error {
   public:
    using Error::Error;
};

// NaN/Inf produced by a computation, or handed in where finite values are required.
class NumericError : public Error {
   public:
    using Error::Error;
};

// API called out of order (e.g. backward before forward).
class UsageError : public Error {
   public:
    using Error::Error;
};

class UnsupportedOpError : public Error {
   public:
    using Error::Error;
};

// Malformed file contents.
class FormatError : public Error {
   public:
    using Error::Error;
};

class AggregationError : public Error {
   public:
    using Error::Error;
};

class ProtocolError : public Error {
   public:
    using Error::Error;
};

class ConfigError : public Error {
   public:
    using Error::Error;
};

// Unrecoverable failure of a federated run (e.g. no client left to aggregate).
class RunError : public Error {
   public:
    using Error::Error;
};

}  // namespace phoenix
