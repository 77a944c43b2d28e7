#pragma once

#include <stdexcept>
#include <string>

namespace emocirc {

// Base type for every error the library throws.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Precondition / shape-contract violations (programmer error, not data error).
struct ContractViolation : Error {
    explicit ContractViolation(const std::string& msg) : Error("contract violation: " + msg) {}
};

// A vector whose norm is below the degeneracy threshold.
struct DegenerateDirection : Error {
    explicit DegenerateDirection(const std::string& msg) : Error("degenerate direction: " + msg) {}
};

// File / serialization problems.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};
struct ChecksumError : Error {
    explicit ChecksumError(const std::string& msg) : Error("checksum error: " + msg) {}
};
struct TruncationError : Error {
    explicit TruncationError(const std::string& msg) : Error("truncated data: " + msg) {}
};
struct VersionMismatch : Error {
    explicit VersionMismatch(const std::string& msg) : Error("version mismatch: " + msg) {}
};

// Extraction / aggregation failures.
struct NoGroups : Error {
    explicit NoGroups(const std::string& msg) : Error("no usable groups: " + msg) {}
};
struct NoSamples : Error {
    explicit NoSamples(const std::string& msg) : Error("no usable samples: " + msg) {}
};
struct MissingSite : Error {
    explicit MissingSite(const std::string& msg) : Error("missing tap site: " + msg) {}
};

// Pipeline-stage ordering.
struct MissingPrerequisite : Error {
    explicit MissingPrerequisite(const std::string& stage)
        : Error("missing prerequisite artifact; run '" + stage + "' first"), stage_name(stage) {}
    std::string stage_name;
};

#define EMOCIRC_CHECK(cond, msg)                              \
    do {                                                      \
        if (!(cond)) throw ::emocirc::ContractViolation(msg); \
    } while (0)

}  // namespace emocirc
