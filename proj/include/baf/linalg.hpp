// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "baf/error.hpp"

namespace baf {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = Mat<double>;
using Vector = Vec<double>;

/// Tolerance on ||x||_2 - 1 accepted for "unit" vectors.
inline constexpr double kUnitTolerance = 1e-8;

/// Relative cutoff below which a singular value counts as an exact zero.
inline constexpr double kZeroSigmaTolerance = 1e-12;

template <typename Scalar>
struct ThinSvd {
    Mat<Scalar> U; // m x k, orthonormal columns
    Vec<Scalar> s; // k values, non-increasing
    Mat<Scalar> V; // n x k, orthonormal columns

    Eigen::Index rank() const { return s.size(); }
};

/// One rank-1 term sigma * left * right^T of an update, with its score and gate
/// once filtering has run.
template <typename Scalar>
struct SpectralChannel {
    Scalar sigma{0};
    Vec<Scalar> left;
    Vec<Scalar> right;
    std::optional<Scalar> anchoring;
    std::optional<Scalar> gate;

    Scalar gate_or_one() const { return gate.value_or(Scalar(1)); }
};

using Channel = SpectralChannel<double>;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.allFinite();
}

/// Thin SVD with k = min(m, n), singular values sorted non-increasing.
///
/// Backed by Eigen's divide-and-conquer bidiagonal SVD. Throws InvalidMatrix on
/// empty or non-finite input and SvdNoConvergence if the solver reports failure.
template <typename Derived>
ThinSvd<typename Derived::Scalar> thin_svd(const Eigen::MatrixBase<Derived>& m) {
    using Scalar = typename Derived::Scalar;
    if (m.rows() < 1 || m.cols() < 1) {
        throw Error(ErrorCode::InvalidMatrix, "thin_svd: matrix has an empty dimension");
    }
    if (!all_finite(m)) {
        throw Error(ErrorCode::InvalidMatrix, "thin_svd: matrix contains NaN or Inf");
    }
    Eigen::BDCSVD<Mat<Scalar>> svd(m.derived().eval(), Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) {
        throw Error(ErrorCode::SvdNoConvergence, "thin_svd: solver did not converge");
    }
    return ThinSvd<Scalar>{svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

/// Squared norm of the projection of a unit vector onto span(basis).
///
/// `basis` must have orthonormal columns. The d x d projector is never formed;
/// when the basis spans the whole space the projector is the identity and the
/// result is exactly 1.
template <typename DerivedX, typename DerivedB>
typename DerivedX::Scalar subspace_alignment(const Eigen::MatrixBase<DerivedX>& x,
                                             const Eigen::MatrixBase<DerivedB>& basis) {
    using Scalar = typename DerivedX::Scalar;
    if (basis.rows() != x.size()) {
        throw Error(ErrorCode::DimensionMismatch,
                    "subspace_alignment: vector has dimension " + std::to_string(x.size()) +
                        " but basis has " + std::to_string(basis.rows()) + " rows");
    }
    if (basis.cols() > basis.rows()) {
        throw Error(ErrorCode::DimensionMismatch, "subspace_alignment: more basis columns than rows");
    }
    const Scalar norm = x.norm();
    if (!(std::abs(norm - Scalar(1)) <= Scalar(kUnitTolerance))) {
        throw Error(ErrorCode::NotUnitVector,
                    "subspace_alignment: ||x|| = " + std::to_string(static_cast<double>(norm)));
    }
    if (basis.cols() == basis.rows()) {
        return Scalar(1);
    }
    const Scalar a = (basis.transpose() * x).squaredNorm();
    return std::clamp(a, Scalar(0), Scalar(1));
}

/// Splits an SVD into channels, dropping singular values below
/// `zero_tol * s_1` (all of them when s_1 is zero).
template <typename Scalar>
std::vector<SpectralChannel<Scalar>> channels_of(const ThinSvd<Scalar>& svd,
                                                 double zero_tol = kZeroSigmaTolerance) {
    std::vector<SpectralChannel<Scalar>> out;
    if (svd.s.size() == 0 || !(svd.s(0) > Scalar(0))) {
        return out;
    }
    const Scalar cutoff = Scalar(zero_tol) * svd.s(0);
    for (Eigen::Index i = 0; i < svd.s.size(); ++i) {
        if (svd.s(i) < cutoff || svd.s(i) <= Scalar(0)) {
            continue;
        }
        SpectralChannel<Scalar> ch;
        ch.sigma = svd.s(i);
        ch.left = svd.U.col(i);
        ch.right = svd.V.col(i);
        out.push_back(std::move(ch));
    }
    return out;
}

/// Sum of sigma_i * g_i * u_i v_i^T into a preallocated rows x cols matrix.
template <typename Scalar>
Mat<Scalar> reconstruct(std::span<const SpectralChannel<Scalar>> channels, Eigen::Index rows,
                        Eigen::Index cols) {
    Mat<Scalar> out = Mat<Scalar>::Zero(rows, cols);
    for (const auto& ch : channels) {
        if (ch.left.size() != rows || ch.right.size() != cols) {
            throw Error(ErrorCode::DimensionMismatch, "reconstruct: channel dimensions disagree");
        }
        const Scalar w = ch.sigma * ch.gate_or_one();
        if (w != Scalar(0)) {
            out.noalias() += w * ch.left * ch.right.transpose();
        }
    }
    return out;
}

/// As above with dimensions taken from the first channel; an empty list throws
/// EmptyChannelSet because the shape is unknown.
template <typename Scalar>
Mat<Scalar> reconstruct(std::span<const SpectralChannel<Scalar>> channels) {
    if (channels.empty()) {
        throw Error(ErrorCode::EmptyChannelSet, "reconstruct: no channels and no shape supplied");
    }
    return reconstruct(channels, channels.front().left.size(), channels.front().right.size());
}

template <typename Scalar>
Mat<Scalar> reconstruct(const std::vector<SpectralChannel<Scalar>>& channels) {
    return reconstruct(std::span<const SpectralChannel<Scalar>>(channels));
}

template <typename Scalar>
Mat<Scalar> reconstruct(const std::vector<SpectralChannel<Scalar>>& channels, Eigen::Index rows,
                        Eigen::Index cols) {
    return reconstruct(std::span<const SpectralChannel<Scalar>>(channels), rows, cols);
}

/// ||A - B||_F / ||B||_F, or the absolute error when B is zero.
template <typename DA, typename DB>
double relative_error(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
    const double diff = static_cast<double>((a - b).norm());
    const double ref = static_cast<double>(b.norm());
    return ref > 0.0 ? diff / ref : diff;
}

/// Largest entry of |Q^T Q - I|.
template <typename Derived>
double orthonormality_defect(const Eigen::MatrixBase<Derived>& q) {
    using Scalar = typename Derived::Scalar;
    if (q.cols() == 0) {
        return 0.0;
    }
    const Mat<Scalar> gram = q.transpose() * q;
    return static_cast<double>((gram - Mat<Scalar>::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff());
}

} // namespace baf
