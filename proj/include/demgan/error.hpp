#pragma once

#include <stdexcept>
#include <string>

namespace demgan {

enum class ErrorKind {
    argument,
    config,
    domain,
    degenerate_input,
    alignment,
    empty_dataset,
    precondition,
    io,
    divergence,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Process exit code for the CLI: 2 config/argument, 3 data, 4 training divergence.
int exit_code_for(ErrorKind kind);

}  // namespace demgan
