// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "baf/filter.hpp"
#include "baf/lora_io.hpp"

namespace baf::lab {

using Rng = std::mt19937_64;

enum class DecayKind { Geometric, Flat, TwoBlock };

struct Decay {
    DecayKind kind = DecayKind::TwoBlock;
    double param = 100.0; // ratio for Geometric, gap for TwoBlock, unused for Flat

    static Decay geometric(double ratio) { return {DecayKind::Geometric, ratio}; }
    static Decay flat() { return {DecayKind::Flat, 0.0}; }
    static Decay two_block(double gap) { return {DecayKind::TwoBlock, gap}; }
};

/// Synthetic base spectrum plus the planted channel layout of an adapter.
struct PlantSpec {
    Eigen::Index m = 64;
    Eigen::Index n = 64;
    Eigen::Index k_true = 8;
    Decay decay;
    Eigen::Index n_aligned = 4;
    Eigen::Index n_orthogonal = 4;
    std::vector<double> sigma_profile; // empty: n_aligned + n_orthogonal, ..., 2, 1
    std::uint64_t seed = 0;

    void validate() const;
};

struct PlantedLora {
    std::vector<Channel> channels; // sigma non-increasing
    std::vector<bool> aligned;     // ground-truth label per channel
};

struct SeparationResult {
    std::vector<double> scores_aligned;
    std::vector<double> scores_orthogonal;
    double a_null = 0.0;
    Eigen::Index k = 0;
    Eigen::Index true_positive = 0;
    Eigen::Index false_positive = 0;
    Eigen::Index false_negative = 0;
    Eigen::Index true_negative = 0;
    double precision = 1.0;
    double recall = 1.0;
    double removed_energy = 0.0;            // sum sigma^2 of channels the hard gate drops
    double planted_orthogonal_energy = 0.0; // sum sigma^2 of orthogonal plants
    double filtered_norm = 0.0;             // ||filtered update||_F under the given gate config
};

/// rows x cols matrix with orthonormal columns drawn from the Haar measure.
Matrix random_orthonormal(Eigen::Index rows, Eigen::Index cols, Rng& rng);
/// Normalized standard Gaussian vector.
Vector random_unit_vector(Eigen::Index dim, Rng& rng);

/// min(m, n) singular values described by the spec's decay.
Vector planted_spectrum(const PlantSpec& spec);
Matrix gen_base(const PlantSpec& spec);
PlantedLora gen_planted_lora(const PrincipalSubspace<double>& base_sub, const PlantSpec& spec);

/// Mean anchoring score of `trials` uniform random (u, v) pairs against a
/// seeded random K-dimensional subspace pair. Trials are split into a fixed
/// number of shards with derived seeds, so the result does not depend on the
/// thread count.
double monte_carlo_null(Eigen::Index m, Eigen::Index n, Eigen::Index k, std::int64_t trials, std::uint64_t seed);

SeparationResult run_ablation(const PlantSpec& spec, const GateConfig& cfg);

PlantSpec parse_plant_spec(std::string_view json_text);
std::string separation_json(const SeparationResult& r);

/// A small adapter/base pair with planted channels, used by the CLI demo and
/// the end-to-end tests.
struct ToyFixture {
    Checkpoint lora;
    Checkpoint base;
    std::vector<std::string> stems;
    std::vector<Matrix> delta;         // effective update per stem, from the stored factors
    std::vector<Matrix> aligned_delta; // planted aligned part per stem
};

struct ToyFixtureSpec {
    std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes{{32, 32}, {48, 32}, {32, 24}};
    Eigen::Index k_true = 6;
    double gap = 100.0;
    Eigen::Index n_aligned = 2;
    Eigen::Index n_orthogonal = 2;
    double alpha_over_rank = 2.0; // stored alpha = this * rank
    DType dtype = DType::F32;
    bool full_rank_square = false; // base spectrum flat-ish and full rank, for tau = 1 checks
    std::uint64_t seed = 1;
};

ToyFixture build_toy_fixture(const ToyFixtureSpec& spec);

} // namespace baf::lab
