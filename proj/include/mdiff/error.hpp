// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mdiff {

/// Bad input or configuration. The CLI maps it to exit code 2.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Failure while running an otherwise valid request (divergence, I/O,
/// non-finite values). The CLI maps it to exit code 3.
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mdiff
