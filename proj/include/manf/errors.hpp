#pragma once

#include <stdexcept>
#include <string>

namespace manf {

// Shape/dimension disagreements between tensors or model components.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated call preconditions (non-scalar backward, n <= 0, bad rates, ...).
struct ContractError : std::invalid_argument {
    explicit ContractError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Math domain violations (log of non-positive input and friends).
struct DomainError : std::domain_error {
    explicit DomainError(const std::string& msg) : std::domain_error(msg) {}
};

// Non-finite values produced where finite ones are required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-range index into a sequence or table.
struct IndexError : std::out_of_range {
    explicit IndexError(const std::string& msg) : std::out_of_range(msg) {}
};

// Malformed input files (CSV rows, config documents).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failures.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Series too short to produce a single window.
struct CoverageError : std::runtime_error {
    explicit CoverageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint/data shape disagreement.
struct DataMismatchError : std::runtime_error {
    explicit DataMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint blob fails its manifest checksum.
struct ChecksumError : std::runtime_error {
    explicit ChecksumError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint written by an incompatible format version.
struct VersionError : std::runtime_error {
    explicit VersionError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace manf
