// Copyright 2026 The dlmsparse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dlm {

enum class ErrorCode {
    kShape,
    kConfig,
    kUsage,
    kSchedule,
    kBounds,
    kCacheMiss,
    kDegenerateAttention,
    kIo,
    kBadMagic,
    kBadVersion,
    kTruncated,
    kShapeMismatch,
    kMissingTensor,
    kMalformed,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::kShape: return "shape";
        case ErrorCode::kConfig: return "config";
        case ErrorCode::kUsage: return "usage";
        case ErrorCode::kSchedule: return "schedule";
        case ErrorCode::kBounds: return "bounds";
        case ErrorCode::kCacheMiss: return "cache-miss";
        case ErrorCode::kDegenerateAttention: return "degenerate-attention";
        case ErrorCode::kIo: return "io";
        case ErrorCode::kBadMagic: return "bad-magic";
        case ErrorCode::kBadVersion: return "bad-version";
        case ErrorCode::kTruncated: return "truncated";
        case ErrorCode::kShapeMismatch: return "shape-mismatch";
        case ErrorCode::kMissingTensor: return "missing-tensor";
        case ErrorCode::kMalformed: return "malformed";
    }
    return "unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + " error: " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        fail(code, message);
    }
}

}  // namespace dlm
