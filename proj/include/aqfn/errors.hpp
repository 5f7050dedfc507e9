#pragma once

#include <stdexcept>
#include <string>

namespace aqfn {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor or layer dimension mismatch; message carries the offending shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid argument value (rate out of range, bad axis, bad fraction, ...).
struct ParamError : Error {
    using Error::Error;
};

// API contract violation (non-scalar backward target, missing gradient, ...).
struct ContractError : Error {
    using Error::Error;
};

// Unreadable or malformed external data (manifests, images, checkpoints).
struct DataError : Error {
    using Error::Error;
};

// Non-finite loss encountered during training.
struct DivergenceError : Error {
    using Error::Error;
};

} // namespace aqfn
