// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace baf {

enum class ErrorCode {
    InvalidMatrix,
    SvdNoConvergence,
    NotUnitVector,
    DimensionMismatch,
    EmptyChannelSet,
    ZeroSpectrum,
    UnsortedSpectrum,
    InvalidArgument,
    ParseError,
    CorruptFile,
    UnsupportedDtype,
    UnmatchedLayer,
    ShapeMismatch,
    PlantCapacity,
    IoError,
    ConfigError,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::InvalidMatrix: return "InvalidMatrix";
    case ErrorCode::SvdNoConvergence: return "SvdNoConvergence";
    case ErrorCode::NotUnitVector: return "NotUnitVector";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyChannelSet: return "EmptyChannelSet";
    case ErrorCode::ZeroSpectrum: return "ZeroSpectrum";
    case ErrorCode::UnsortedSpectrum: return "UnsortedSpectrum";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::UnmatchedLayer: return "UnmatchedLayer";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::PlantCapacity: return "PlantCapacity";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

/// Exception carrying a machine-readable code alongside the message.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

    /// Same code, message prefixed with `context` (e.g. a layer name).
    Error with_context(const std::string& context) const {
        Error e = *this;
        static_cast<std::runtime_error&>(e) = std::runtime_error(context + ": " + what());
        return e;
    }

private:
    ErrorCode code_;
};

} // namespace baf
