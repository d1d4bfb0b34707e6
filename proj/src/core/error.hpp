#pragma once

#include <stdexcept>
#include <string>

namespace farsight {

// Error categories; they map 1:1 onto the C API status codes and the CLI
// exit codes.
enum class Errc {
    invalid_arg = 1,
    io = 2,
    format = 3,
    config_mismatch = 4,
    internal = 5,
};

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}

    Errc code() const { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& msg) {
    throw Error(code, msg);
}

} // namespace farsight
