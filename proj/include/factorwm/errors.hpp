#pragma once

#include <stdexcept>
#include <string>

namespace fwm {

// Base of every error thrown by the library. The CLI maps subclasses to
// process exit codes: ConfigError -> 2, DataError -> 3, everything else -> 4.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad user configuration: unknown keys, invalid values, negative weights.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Dataset / checkpoint problems: missing files, provenance hash mismatch,
// malformed manifests.
class DataError : public Error {
public:
    using Error::Error;
};

// Tensor extents do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Mathematical preconditions violated (non-positive sigma, singular system).
class DomainError : public Error {
public:
    using Error::Error;
};

// Non-finite losses or gradients during optimization.
class TrainingError : public Error {
public:
    using Error::Error;
};

// Ill-conditioned or otherwise failed numerical computation.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed graph queries (unknown node, overlapping conditioning set).
class GraphError : public Error {
public:
    using Error::Error;
};

// Evaluation cannot proceed (insufficient samples, missing true latents).
class EvalError : public Error {
public:
    using Error::Error;
};

} // namespace fwm
