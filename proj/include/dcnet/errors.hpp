#pragma once

#include <stdexcept>
#include <string>

namespace dcnet {

// Shape/axis mismatches in tensor operations and layer wiring.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid model/training configuration values.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed data files (bad magic, truncation, unparseable cells).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values surfacing from a numeric computation.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse (e.g. backward called twice on one forward context).
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

} // namespace dcnet
