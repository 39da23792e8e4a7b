// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kvchain {

enum class ErrorCode {
    kInvalidArgument,
    kShapeMismatch,
    kPrecondition,
    kNumeric,
    kIo,
    kCorrupt,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kPrecondition: return "precondition";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kCorrupt: return "corrupt";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), m_code(code) {}

    ErrorCode code() const noexcept { return m_code; }

private:
    ErrorCode m_code;
};

namespace detail {

template <typename... Args>
[[noreturn]] void fail(ErrorCode code, const Args&... args) {
    std::ostringstream os;
    (os << ... << args);
    throw Error(code, os.str());
}

}  // namespace detail

}  // namespace kvchain

#define KVCHAIN_CHECK(cond, code, ...)                        \
    do {                                                      \
        if (!(cond)) {                                        \
            ::kvchain::detail::fail((code), __VA_ARGS__);     \
        }                                                     \
    } while (false)
