// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cstring>

#include "baf/lora_io.hpp"

namespace baf {

static_assert(std::endian::native == std::endian::little, "payload decoding assumes a little-endian host");

std::string_view dtype_name(DType dt) noexcept {
    switch (dt) {
    case DType::F64: return "F64";
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    }
    return "?";
}

std::size_t dtype_width(DType dt) noexcept {
    switch (dt) {
    case DType::F64: return 8;
    case DType::F32: return 4;
    case DType::F16:
    case DType::BF16: return 2;
    }
    return 0;
}

DType parse_dtype(std::string_view name) {
    if (name == "F64" || name == "f64" || name == "float64") return DType::F64;
    if (name == "F32" || name == "f32" || name == "float32") return DType::F32;
    if (name == "F16" || name == "f16" || name == "float16") return DType::F16;
    if (name == "BF16" || name == "bf16" || name == "bfloat16") return DType::BF16;
    throw Error(ErrorCode::UnsupportedDtype, "dtype '" + std::string(name) + "'");
}

std::uint16_t float_to_half(float f) noexcept {
    const auto x = std::bit_cast<std::uint32_t>(f);
    const std::uint32_t sign = (x >> 16) & 0x8000u;
    const std::uint32_t abs = x & 0x7fffffffu;

    if (abs >= 0x7f800000u) { // inf or nan
        const std::uint32_t mant = abs > 0x7f800000u ? 0x200u | ((abs >> 13) & 0x3ffu) : 0u;
        return static_cast<std::uint16_t>(sign | 0x7c00u | mant);
    }
    if (abs >= 0x477ff000u) { // rounds to >= 65520 -> inf
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    if (abs < 0x38800000u) { // below the smallest normal half: subnormal or zero
        if (abs < 0x33000000u) {
            return static_cast<std::uint16_t>(sign);
        }
        const std::uint32_t exp = abs >> 23;
        const std::uint32_t mant = (abs & 0x7fffffu) | 0x800000u;
        const std::uint32_t shift = 126u - exp; // in [14, 24]
        std::uint32_t h = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1u);
        const std::uint32_t half = 1u << (shift - 1u);
        if (rem > half || (rem == half && (h & 1u))) {
            ++h;
        }
        return static_cast<std::uint16_t>(sign | h);
    }
    std::uint32_t h = ((abs - 0x38000000u) >> 13);
    const std::uint32_t rem = abs & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) {
        ++h;
    }
    return static_cast<std::uint16_t>(sign | h);
}

float half_to_float(std::uint16_t h) noexcept {
    const std::uint32_t sign = (static_cast<std::uint32_t>(h) & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits = 0;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            int e = -1;
            do {
                ++e;
                mant <<= 1;
            } while ((mant & 0x400u) == 0);
            bits = sign | ((112u - static_cast<std::uint32_t>(e)) << 23) | ((mant & 0x3ffu) << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 112u) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t float_to_bf16(float f) noexcept {
    const auto x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7fffffffu) > 0x7f800000u) {
        return static_cast<std::uint16_t>((x >> 16) | 0x40u); // quiet nan
    }
    const std::uint32_t rounding = 0x7fffu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>((x + rounding) >> 16);
}

float bf16_to_float(std::uint16_t b) noexcept {
    return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16);
}

std::int64_t TensorRecord::numel() const {
    std::int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::vector<double> decode_values(const TensorRecord& rec) {
    const auto n = static_cast<std::size_t>(rec.numel());
    if (rec.data.size() != n * dtype_width(rec.dtype)) {
        throw Error(ErrorCode::CorruptFile, "payload size does not match shape and dtype");
    }
    std::vector<double> out(n);
    const std::uint8_t* p = rec.data.data();
    for (std::size_t i = 0; i < n; ++i) {
        switch (rec.dtype) {
        case DType::F64: {
            double v;
            std::memcpy(&v, p + 8 * i, 8);
            out[i] = v;
            break;
        }
        case DType::F32: {
            float v;
            std::memcpy(&v, p + 4 * i, 4);
            out[i] = v;
            break;
        }
        case DType::F16: {
            std::uint16_t v;
            std::memcpy(&v, p + 2 * i, 2);
            out[i] = half_to_float(v);
            break;
        }
        case DType::BF16: {
            std::uint16_t v;
            std::memcpy(&v, p + 2 * i, 2);
            out[i] = bf16_to_float(v);
            break;
        }
        }
    }
    return out;
}

TensorRecord encode_values(std::span<const double> values, DType dtype, std::vector<std::int64_t> shape) {
    TensorRecord rec;
    rec.dtype = dtype;
    rec.shape = std::move(shape);
    if (static_cast<std::size_t>(rec.numel()) != values.size()) {
        throw Error(ErrorCode::ShapeMismatch, "encode_values: element count does not match shape");
    }
    const std::size_t w = dtype_width(dtype);
    rec.data.resize(values.size() * w);
    std::uint8_t* p = rec.data.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        switch (dtype) {
        case DType::F64: std::memcpy(p + 8 * i, &values[i], 8); break;
        case DType::F32: {
            const auto v = static_cast<float>(values[i]);
            std::memcpy(p + 4 * i, &v, 4);
            break;
        }
        case DType::F16: {
            const auto v = float_to_half(static_cast<float>(values[i]));
            std::memcpy(p + 2 * i, &v, 2);
            break;
        }
        case DType::BF16: {
            const auto v = float_to_bf16(static_cast<float>(values[i]));
            std::memcpy(p + 2 * i, &v, 2);
            break;
        }
        }
    }
    return rec;
}

Matrix to_matrix(const TensorRecord& rec) {
    if (rec.shape.size() != 2 && rec.shape.size() != 4) {
        throw Error(ErrorCode::ShapeMismatch,
                    "expected a 2-D or 4-D tensor, got rank " + std::to_string(rec.shape.size()));
    }
    const Eigen::Index rows = rec.shape[0];
    const Eigen::Index cols = rec.numel() / std::max<std::int64_t>(rec.shape[0], 1);
    const auto values = decode_values(rec);
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    return Eigen::Map<const RowMajor>(values.data(), rows, cols);
}

double to_scalar(const TensorRecord& rec) {
    if (rec.numel() != 1) {
        throw Error(ErrorCode::ShapeMismatch, "expected a single-element tensor");
    }
    return decode_values(rec).front();
}

TensorRecord from_matrix(const Matrix& m, DType dtype, std::vector<std::int64_t> shape) {
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const RowMajor rm = m;
    return encode_values(std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())), dtype,
                         std::move(shape));
}

Matrix quantize(const Matrix& m, DType dtype) {
    switch (dtype) {
    case DType::F64: return m;
    case DType::F32: return m.cast<float>().cast<double>();
    case DType::F16:
        return m.unaryExpr([](double v) { return static_cast<double>(half_to_float(float_to_half(static_cast<float>(v)))); });
    case DType::BF16:
        return m.unaryExpr([](double v) { return static_cast<double>(bf16_to_float(float_to_bf16(static_cast<float>(v)))); });
    }
    return m;
}

} // namespace baf
