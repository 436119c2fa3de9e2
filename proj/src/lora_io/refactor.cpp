// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "baf/lora_io.hpp"

namespace baf {

LowRankFactors refactor_channels(std::span<const Channel> filtered, Eigen::Index rows, Eigen::Index cols,
                                 DType out_dtype) {
    std::vector<const Channel*> live;
    for (const auto& ch : filtered) {
        if (ch.left.size() != rows || ch.right.size() != cols) {
            throw Error(ErrorCode::DimensionMismatch, "refactor_channels: channel dimensions disagree");
        }
        if (ch.sigma * ch.gate_or_one() > 0.0) {
            live.push_back(&ch);
        }
    }
    LowRankFactors f;
    if (live.empty()) {
        f.B = Matrix::Zero(rows, 1);
        f.A = Matrix::Zero(1, cols);
        f.alpha = 1.0;
        return f;
    }
    // Soft-gated channels with weight exactly zero keep their slot so the
    // stored rank matches the channel count.
    const auto r = static_cast<Eigen::Index>(filtered.size());
    f.B.resize(rows, r);
    f.A.resize(r, cols);
    for (Eigen::Index i = 0; i < r; ++i) {
        const Channel& ch = filtered[static_cast<std::size_t>(i)];
        const double w = std::sqrt(std::max(0.0, ch.sigma * ch.gate_or_one()));
        f.B.col(i) = w * ch.left;
        f.A.row(i) = w * ch.right.transpose();
    }
    f.B = quantize(f.B, out_dtype);
    f.A = quantize(f.A, out_dtype);
    f.alpha = static_cast<double>(r);
    return f;
}

std::map<std::string, TensorRecord> factor_records(const LoraLayer& layer, const LowRankFactors& f, DType dtype) {
    const auto r = static_cast<std::int64_t>(f.rank());
    std::vector<std::int64_t> down_shape = layer.down_shape;
    std::vector<std::int64_t> up_shape = layer.up_shape;
    down_shape[0] = r;
    up_shape[1] = r;

    std::map<std::string, TensorRecord> out;
    out.emplace(layer.down_key, from_matrix(f.A, dtype, down_shape));
    out.emplace(layer.up_key, from_matrix(f.B, dtype, up_shape));
    if (layer.alpha_key) {
        const double alpha = f.alpha;
        out.emplace(*layer.alpha_key, encode_values(std::span<const double>(&alpha, 1), layer.alpha_dtype, layer.alpha_shape));
    }
    return out;
}

} // namespace baf
