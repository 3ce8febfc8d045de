#pragma once

#include <stdexcept>
#include <string>

namespace normlab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape / broadcast / dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid knob combinations, strides, grids, specs.
struct ConfigError : Error {
    using Error::Error;
};

// Bad labels, missing files, insufficient samples.
struct DataError : Error {
    using Error::Error;
};

// Normalization over a degenerate statistic set (B*H*W < 2 etc.).
struct StatisticsError : Error {
    using Error::Error;
};

// Malformed on-disk formats (CIFAR records, IDX magic, CSV).
struct FormatError : Error {
    using Error::Error;
};

// API misuse (backward on a non-scalar, ...).
struct UsageError : Error {
    using Error::Error;
};

}  // namespace normlab
