// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "baf/linalg.hpp"

namespace baf {

/// Top-K left/right singular bases of a base weight, with the random-direction
/// baseline for that layer shape.
template <typename Scalar>
struct PrincipalSubspace {
    Mat<Scalar> left_basis;  // m x K
    Mat<Scalar> right_basis; // n x K
    Eigen::Index k = 0;
    double energy_ratio = 0.0;
    double a_null = 0.0;

    Eigen::Index rows() const { return left_basis.rows(); }
    Eigen::Index cols() const { return right_basis.rows(); }
};

enum class GateMode {
    Hard,       // keep a >= a_null
    Soft,       // scale by a^alpha
    Complement, // keep a < a_null (low-alignment half of the split)
};

struct GateConfig {
    GateMode mode = GateMode::Soft;
    double alpha = 1.0;
    double tau_energy = 0.85;
    double zero_sigma_tol = kZeroSigmaTolerance;

    void validate() const {
        if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
            throw Error(ErrorCode::ConfigError, "alpha must be a finite non-negative number");
        }
        if (!(tau_energy > 0.0 && tau_energy <= 1.0)) {
            throw Error(ErrorCode::ConfigError, "tau_energy must lie in (0, 1]");
        }
        if (!(zero_sigma_tol >= 0.0 && zero_sigma_tol < 1.0)) {
            throw Error(ErrorCode::ConfigError, "zero_sigma_tol must lie in [0, 1)");
        }
    }
};

struct ChannelRecord {
    double sigma = 0.0;
    double anchoring = 0.0;
    double gate = 0.0;
};

struct LayerReport {
    std::string layer_name;
    Eigen::Index m = 0;
    Eigen::Index n = 0;
    Eigen::Index r = 0;
    Eigen::Index k = 0;
    double a_null = 0.0;
    double energy_ratio = 0.0;
    std::vector<ChannelRecord> channel_records;
    Eigen::Index kept_count = 0;
    double fro_norm_before = 0.0;
    double fro_norm_after = 0.0;
};

template <typename Scalar>
struct FilteredLayer {
    std::vector<SpectralChannel<Scalar>> channels;
    LayerReport report;
};

/// Minimal k with sum_{j<=k} s_j^2 / sum_j s_j^2 >= tau_energy.
template <typename Derived>
Eigen::Index select_k(const Eigen::MatrixBase<Derived>& s, double tau_energy) {
    using Scalar = typename Derived::Scalar;
    if (s.size() == 0) {
        throw Error(ErrorCode::ZeroSpectrum, "select_k: empty spectrum");
    }
    if (!(tau_energy > 0.0 && tau_energy <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "select_k: tau_energy must lie in (0, 1]");
    }
    Eigen::Index nonzero = 0;
    for (Eigen::Index j = 0; j < s.size(); ++j) {
        if (!(s(j) >= Scalar(0)) || !std::isfinite(static_cast<double>(s(j)))) {
            throw Error(ErrorCode::InvalidArgument, "select_k: singular values must be finite and >= 0");
        }
        if (j > 0 && s(j) > s(j - 1)) {
            throw Error(ErrorCode::UnsortedSpectrum, "select_k: spectrum is not non-increasing");
        }
        if (s(j) > Scalar(0)) {
            nonzero = j + 1;
        }
    }
    if (nonzero == 0) {
        throw Error(ErrorCode::ZeroSpectrum, "select_k: all singular values are zero");
    }
    // Full energy is reached exactly at the last nonzero value; rounding in the
    // running sum must not push K past it or stop it short.
    if (tau_energy >= 1.0) {
        return nonzero;
    }
    const double total = static_cast<double>(s.squaredNorm());
    double acc = 0.0;
    for (Eigen::Index j = 0; j < nonzero; ++j) {
        acc += static_cast<double>(s(j)) * static_cast<double>(s(j));
        if (acc / total >= tau_energy) {
            return j + 1;
        }
    }
    return nonzero;
}

inline Eigen::Index select_k(const std::vector<double>& s, double tau_energy) {
    return select_k(Eigen::Map<const Vector>(s.data(), static_cast<Eigen::Index>(s.size())), tau_energy);
}

/// K^2 / (m n): the expected anchoring score of a random channel.
inline double null_baseline(Eigen::Index k, Eigen::Index m, Eigen::Index n) {
    if (m < 1 || n < 1 || k < 1 || k > std::min(m, n)) {
        throw Error(ErrorCode::DimensionMismatch,
                    "null_baseline: need 1 <= K <= min(m, n), got K=" + std::to_string(k) +
                        " m=" + std::to_string(m) + " n=" + std::to_string(n));
    }
    return (static_cast<double>(k) * static_cast<double>(k)) /
           (static_cast<double>(m) * static_cast<double>(n));
}

/// Principal subspace of `base` sized by the energy rule. Singular values below
/// `zero_tol * s_1` are treated as zero before K is chosen.
template <typename Derived>
PrincipalSubspace<typename Derived::Scalar> build_subspace(const Eigen::MatrixBase<Derived>& base,
                                                           double tau_energy,
                                                           double zero_tol = kZeroSigmaTolerance) {
    using Scalar = typename Derived::Scalar;
    auto svd = thin_svd(base);
    if (svd.s.size() == 0 || !(svd.s(0) > Scalar(0))) {
        throw Error(ErrorCode::ZeroSpectrum, "build_subspace: base matrix is zero");
    }
    Vec<Scalar> s = svd.s;
    const Scalar cutoff = Scalar(zero_tol) * s(0);
    for (Eigen::Index j = 0; j < s.size(); ++j) {
        if (s(j) < cutoff) {
            s(j) = Scalar(0);
        }
    }
    const Eigen::Index k = select_k(s, tau_energy);

    PrincipalSubspace<Scalar> sub;
    sub.left_basis = svd.U.leftCols(k);
    sub.right_basis = svd.V.leftCols(k);
    sub.k = k;
    sub.energy_ratio = static_cast<double>(s.head(k).squaredNorm() / s.squaredNorm());
    sub.a_null = null_baseline(k, base.rows(), base.cols());
    return sub;
}

/// Product of the left and right squared projection norms. Stores the score in
/// the channel and returns it.
template <typename Scalar>
Scalar anchoring_score(SpectralChannel<Scalar>& ch, const PrincipalSubspace<Scalar>& sub) {
    if (ch.left.size() != sub.rows() || ch.right.size() != sub.cols()) {
        throw Error(ErrorCode::DimensionMismatch,
                    "anchoring_score: channel is " + std::to_string(ch.left.size()) + "x" +
                        std::to_string(ch.right.size()) + ", subspace is " + std::to_string(sub.rows()) +
                        "x" + std::to_string(sub.cols()));
    }
    const Scalar a = subspace_alignment(ch.left, sub.left_basis) * subspace_alignment(ch.right, sub.right_basis);
    ch.anchoring = a;
    return a;
}

inline double gate_hard(double a, double a_null) { return a >= a_null ? 1.0 : 0.0; }

/// a^alpha with 0^0 = 1, so alpha = 0 passes every channel unchanged.
inline double gate_soft(double a, double alpha) {
    if (alpha == 0.0) {
        return 1.0;
    }
    return std::pow(a, alpha);
}

inline double gate_value(double a, double a_null, const GateConfig& cfg) {
    switch (cfg.mode) {
    case GateMode::Hard: return gate_hard(a, a_null);
    case GateMode::Soft: return gate_soft(a, cfg.alpha);
    case GateMode::Complement: return 1.0 - gate_hard(a, a_null);
    }
    return 1.0;
}

/// Scores and gates one layer's channels.
///
/// Zero-sigma channels (below zero_sigma_tol relative to the largest sigma) are
/// dropped before scoring. Hard and Complement modes drop channels whose gate is
/// zero; Soft mode keeps every remaining channel so rank is preserved.
template <typename Scalar>
FilteredLayer<Scalar> filter_layer(std::vector<SpectralChannel<Scalar>> channels,
                                   const PrincipalSubspace<Scalar>& sub, const GateConfig& cfg) {
    cfg.validate();
    FilteredLayer<Scalar> out;
    LayerReport& rep = out.report;
    rep.m = sub.rows();
    rep.n = sub.cols();
    rep.r = static_cast<Eigen::Index>(channels.size());
    rep.k = sub.k;
    rep.a_null = sub.a_null;
    rep.energy_ratio = sub.energy_ratio;

    Scalar sigma_max(0);
    for (const auto& ch : channels) {
        if (ch.left.size() != rep.m || ch.right.size() != rep.n) {
            throw Error(ErrorCode::DimensionMismatch, "filter_layer: channel dimensions disagree with subspace");
        }
        sigma_max = std::max(sigma_max, ch.sigma);
    }
    rep.fro_norm_before = static_cast<double>(reconstruct(channels, rep.m, rep.n).norm());

    const Scalar cutoff = Scalar(cfg.zero_sigma_tol) * sigma_max;
    for (auto& ch : channels) {
        if (!(ch.sigma > Scalar(0)) || ch.sigma < cutoff) {
            continue;
        }
        const double a = static_cast<double>(anchoring_score(ch, sub));
        const double g = gate_value(a, sub.a_null, cfg);
        ch.gate = Scalar(g);
        rep.channel_records.push_back({static_cast<double>(ch.sigma), a, g});
        if (cfg.mode == GateMode::Soft || g > 0.0) {
            out.channels.push_back(std::move(ch));
        }
    }
    rep.kept_count = static_cast<Eigen::Index>(out.channels.size());
    rep.fro_norm_after = static_cast<double>(reconstruct(out.channels, rep.m, rep.n).norm());
    return out;
}

} // namespace baf
