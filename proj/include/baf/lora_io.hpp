// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "baf/linalg.hpp"

namespace baf {

// ---------------------------------------------------------------------------
// Tensor storage
// ---------------------------------------------------------------------------

enum class DType { F64, F32, F16, BF16 };

/// Header spelling ("F64", "F32", "F16", "BF16").
std::string_view dtype_name(DType dt) noexcept;
std::size_t dtype_width(DType dt) noexcept;
/// Accepts header spellings and lowercase aliases; throws UnsupportedDtype.
DType parse_dtype(std::string_view name);

std::uint16_t float_to_half(float f) noexcept;
float half_to_float(std::uint16_t h) noexcept;
std::uint16_t float_to_bf16(float f) noexcept;
float bf16_to_float(std::uint16_t b) noexcept;

struct TensorRecord {
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::vector<std::uint8_t> data; // little-endian payload

    std::int64_t numel() const;
    bool operator==(const TensorRecord&) const = default;
};

/// Decodes the payload to doubles in storage order.
std::vector<double> decode_values(const TensorRecord& rec);
/// Encodes doubles into a record of the given dtype and shape.
TensorRecord encode_values(std::span<const double> values, DType dtype, std::vector<std::int64_t> shape);

/// 2-D tensors as-is; 4-D tensors [out, in, kh, kw] flattened row-major to
/// out x (in*kh*kw). Values promoted to double.
Matrix to_matrix(const TensorRecord& rec);
/// Single-element tensor as a double.
double to_scalar(const TensorRecord& rec);
/// Writes a matrix (row-major) into a record with the given shape, whose
/// element count must match.
TensorRecord from_matrix(const Matrix& m, DType dtype, std::vector<std::int64_t> shape);
/// Rounds every entry through `dtype` storage precision.
Matrix quantize(const Matrix& m, DType dtype);

// ---------------------------------------------------------------------------
// Checkpoint wire format: u64 LE header length, JSON header, data region.
// ---------------------------------------------------------------------------

struct Checkpoint {
    std::map<std::string, TensorRecord> tensors;
    std::map<std::string, std::string> metadata; // "__metadata__" entry

    bool operator==(const Checkpoint&) const = default;
};

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Canonical encoding: header keys in lexicographic order, payloads packed in
/// the same order, header padded with spaces to a multiple of 8 bytes.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pairing adapter factors with base weights
// ---------------------------------------------------------------------------

enum class KeyPreset { Auto, DiffusersAttn, KohyaUNet, Custom };
enum class ConvPolicy { Flatten2D, Skip };

struct BaseRef {
    std::string key;
    std::optional<std::int64_t> row_offset;
    std::optional<std::int64_t> row_len;
};

struct KeyMap {
    KeyPreset preset = KeyPreset::Auto;
    std::map<std::string, BaseRef> entries; // stem -> base key (+ optional row slice)
    ConvPolicy conv_policy = ConvPolicy::Flatten2D;
};

std::string_view preset_name(KeyPreset p) noexcept;
KeyPreset parse_preset(std::string_view name);
std::string_view conv_policy_name(ConvPolicy p) noexcept;
ConvPolicy parse_conv_policy(std::string_view name);

/// Either a preset name ("auto", "diffusers", "kohya") or a JSON key-map file.
KeyMap load_keymap(const std::string& preset_or_path);
KeyMap parse_keymap_json(std::string_view json_text);

struct LoraLayer {
    std::string layer_name; // stem shared by the factor keys
    Matrix B;               // m x r (up)
    Matrix A;               // r x n (down)
    Eigen::Index rank = 0;
    double scale = 1.0; // stored alpha / r, or 1 without an alpha tensor
    Matrix base;        // m x n

    std::string down_key;
    std::string up_key;
    std::optional<std::string> alpha_key;
    std::vector<std::int64_t> alpha_shape;
    DType alpha_dtype = DType::F32;
    std::string base_key;
    std::vector<std::int64_t> down_shape;
    std::vector<std::int64_t> up_shape;
    DType factor_dtype = DType::F32;
    bool conv = false;
};

struct UnpairedStem {
    std::string stem;
    std::string reason;
    std::vector<std::string> keys; // adapter tensors belonging to the stem
};

struct PairingResult {
    std::vector<LoraLayer> layers; // sorted by layer_name
    std::vector<UnpairedStem> unmatched;
    std::vector<UnpairedStem> skipped; // conv layers under ConvPolicy::Skip
};

/// Splits an adapter key into (stem, role) where role is "down", "up" or
/// "alpha"; nullopt for keys that are not adapter factors.
std::optional<std::pair<std::string, std::string>> split_adapter_key(std::string_view key);

PairingResult pair_layers(const Checkpoint& lora, const Checkpoint& base, const KeyMap& keymap, bool strict);

/// scale * B * A in double precision.
Matrix assemble_delta(const LoraLayer& layer);

struct LowRankFactors {
    Matrix B; // m x r'
    Matrix A; // r' x n
    double alpha = 1.0; // equals r', so the stored scale is exactly 1
    Eigen::Index rank() const { return B.cols(); }
};

/// Splits each channel's effective weight sigma*g symmetrically into the two
/// factors. Values are rounded through `out_dtype`. An empty or fully gated
/// set yields a rank-1 zero pair of the given shape.
LowRankFactors refactor_channels(std::span<const Channel> filtered, Eigen::Index rows, Eigen::Index cols,
                                 DType out_dtype);

/// Records replacing a layer's adapter tensors after filtering: factors are
/// reshaped back to the layer's original (conv) layout.
std::map<std::string, TensorRecord> factor_records(const LoraLayer& layer, const LowRankFactors& f, DType dtype);

} // namespace baf
