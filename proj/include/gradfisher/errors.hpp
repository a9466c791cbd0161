#pragma once

#include <stdexcept>
#include <string>

namespace gradfisher {

// Everything the library throws derives from Error so callers can catch
// library failures separately from std ones.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension mismatch between vectors/matrices.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid argument value (negative std, out-of-range index, empty batch, ...).
struct ParamError : Error {
    using Error::Error;
};

// Non-finite value where one is not allowed, or divergence.
struct NumericError : Error {
    using Error::Error;
};

// Caller violated a documented precondition between cooperating values
// (e.g. a trace that does not belong to the given parameters).
struct ContractError : Error {
    using Error::Error;
};

// Config / CSV / checkpoint deserialization failure.
struct ParseError : Error {
    using Error::Error;
};

// A mined gradient carries no target-class signal.
struct NoSignalError : Error {
    using Error::Error;
};

// Constant sample set: no distribution statistic can be formed.
struct DegenerateError : Error {
    using Error::Error;
};

// Input recovery has no usable rows.
struct UnrecoverableError : Error {
    using Error::Error;
};

// Too few usable estimation observations to fit a feature distribution.
struct AbortEstimationError : Error {
    using Error::Error;
};

// Adaptive attack exceeded its query budget.
struct GiveUpError : Error {
    using Error::Error;
};

} // namespace gradfisher
