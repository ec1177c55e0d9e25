#pragma once

#include <stdexcept>
#include <string>

namespace wsgan {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File missing, unreadable, or structurally corrupt.
struct IoError : Error {
    using Error::Error;
};

/// Input violates a documented precondition or invariant.
struct ValidationError : Error {
    using Error::Error;
};

/// A required earlier-stage artifact (checkpoint, ledger) is absent.
struct PrereqError : Error {
    using Error::Error;
};

/// Numerical failure (non-finite values, non-PSD residuals, ...).
struct NumericalError : Error {
    using Error::Error;
};

namespace detail {
[[noreturn]] void fail_check(const char* expr, const std::string& msg);
}

}  // namespace wsgan

#define WSGAN_CHECK(cond, msg)                            \
    do {                                                  \
        if (!(cond)) ::wsgan::detail::fail_check(#cond, (msg)); \
    } while (0)
