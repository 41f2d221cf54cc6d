#pragma once

#include <stdexcept>
#include <string>

namespace qdg {

// Base class for all library errors.
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or extent mismatch between operands.
struct dimension_error : error {
    explicit dimension_error(const std::string& msg) : error(msg) {}
};

// A precondition or API contract was violated by the caller.
struct contract_error : error {
    explicit contract_error(const std::string& msg) : error(msg) {}
};

// Numeric domain violation: NaN/Inf operands, log of a non-positive value, overflow.
struct numeric_error : error {
    explicit numeric_error(const std::string& msg) : error(msg) {}
};

// Malformed configuration or experiment file.
struct config_error : error {
    explicit config_error(const std::string& msg) : error(msg) {}
};

// Filesystem or serialization failure.
struct io_error : error {
    explicit io_error(const std::string& msg) : error(msg) {}
};

// Every run of a job diverged; nothing left to report.
struct divergence_error : error {
    explicit divergence_error(const std::string& msg) : error(msg) {}
};

}  // namespace qdg
