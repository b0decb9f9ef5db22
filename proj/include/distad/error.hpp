#pragma once

#include <stdexcept>
#include <string>

namespace distad {

// Base of every error raised by the engine. The C API maps each subclass to
// a distinct status code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

// Ranks disagreed on a collective (kind, root, sequence number, length) or a
// point-to-point payload did not match the posted receive.
class ProtocolError : public Error {
public:
    using Error::Error;
};

class DeadlockError : public Error {
public:
    using Error::Error;
};

// Raised on a rank whose world was torn down because another rank failed.
class Aborted : public Error {
public:
    using Error::Error;
};

class SolverError : public Error {
public:
    SolverError(const std::string& what, double residual)
        : Error(what), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace distad
