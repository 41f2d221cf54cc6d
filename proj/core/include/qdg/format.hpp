#pragma once

#include <charconv>
#include <string>
#include <system_error>

#include "qdg/errors.hpp"

namespace qdg {

// Shortest decimal form that parses back to the same double; keeps emitted
// CSV byte-identical across reruns.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    if (res.ec != std::errc{}) throw numeric_error("double formatting failed");
    return std::string(buf, res.ptr);
}

}  // namespace qdg
