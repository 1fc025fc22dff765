#include "demgan/error.hpp"

namespace demgan {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::argument: return "argument error";
        case ErrorKind::config: return "config error";
        case ErrorKind::domain: return "domain error";
        case ErrorKind::degenerate_input: return "degenerate input";
        case ErrorKind::alignment: return "alignment error";
        case ErrorKind::empty_dataset: return "empty dataset";
        case ErrorKind::precondition: return "precondition failed";
        case ErrorKind::io: return "I/O error";
        case ErrorKind::divergence: return "training divergence";
    }
    return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::argument:
        case ErrorKind::config:
            return 2;
        case ErrorKind::divergence:
            return 4;
        default:
            return 3;
    }
}

}  // namespace demgan
