#pragma once

#include <stdexcept>
#include <string>

namespace pocketllm {

// Process exit codes double as error categories.
enum class ErrorKind : int {
    config = 2,
    data = 3,
    divergence = 4,
    corrupt = 5,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

inline void check(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) {
        throw Error(kind, msg);
    }
}

} // namespace pocketllm
