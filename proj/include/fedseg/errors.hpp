#pragma once

#include <stdexcept>
#include <string>

namespace fedseg {

// Base for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/layer shape violations.
struct DimensionError : Error {
    using Error::Error;
};

// Non-finite values, degenerate statistics.
struct NumericError : Error {
    using Error::Error;
};

// Invalid configuration (bad kernel size, empty partition, unknown key, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Missing optimizer gradients and similar state misuse.
struct StateError : Error {
    using Error::Error;
};

// Caller-supplied values outside the documented contract (e.g. pred not in [0,1]).
struct ContractError : Error {
    using Error::Error;
};

// Malformed analytic inputs (misaligned epochs, empty sets, unparseable tables).
struct InputError : Error {
    using Error::Error;
};

// Fewer clients than the anomaly detector's cohort minimum.
struct CohortError : Error {
    using Error::Error;
};

// FedAvg name/shape mismatches.
struct AggregationError : Error {
    using Error::Error;
};

// Metric is undefined for the given masks (one side empty).
struct UndefinedMetricError : Error {
    using Error::Error;
};

// Filesystem/serialization failures; message carries the path.
struct IoError : Error {
    using Error::Error;
};

// Checkpoint validation failures, one code per distinct cause.
struct CheckpointError : Error {
    enum class Code { bad_magic, bad_version, bad_digest, bad_crc, truncated };
    Code code;
    CheckpointError(Code c, const std::string& msg) : Error(msg), code(c) {}
};

}  // namespace fedseg
