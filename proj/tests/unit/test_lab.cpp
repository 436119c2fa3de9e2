// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <doctest.h>
#include <json.hpp>

#include "baf/lab.hpp"
#include "test_support.hpp"

using namespace baf;
using namespace baf::lab;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected baf::Error");
    return ErrorCode::InvalidArgument;
}

PlantSpec spec_of(Eigen::Index m, Eigen::Index n, Eigen::Index k_true, Decay decay, std::uint64_t seed = 0) {
    PlantSpec s;
    s.m = m;
    s.n = n;
    s.k_true = k_true;
    s.decay = decay;
    s.n_aligned = std::min<Eigen::Index>(2, k_true);
    s.n_orthogonal = 0;
    s.seed = seed;
    return s;
}

} // namespace

TEST_CASE("random_orthonormal has orthonormal columns") {
    Rng rng(1);
    for (auto [r, c] : {std::pair{5, 5}, {40, 3}, {64, 64}}) {
        const Matrix q = random_orthonormal(r, c, rng);
        CHECK(orthonormality_defect(q) <= 1e-12);
    }
    CHECK(code_of([&] { random_orthonormal(3, 4, rng); }) == ErrorCode::DimensionMismatch);
    CHECK(random_unit_vector(9, rng).norm() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gen_base spectra select the expected subspace size") {
    CHECK(build_subspace(gen_base(spec_of(8, 8, 8, Decay::flat())), 0.85).k == 7);
    CHECK(build_subspace(gen_base(spec_of(32, 32, 4, Decay::two_block(100.0))), 0.85).k == 4);
    // tests/oracles/gen_oracles.py
    const Matrix geo = gen_base(spec_of(64, 64, 8, Decay::geometric(0.8)));
    CHECK(build_subspace(geo, 0.85).k == 5);
    CHECK(build_subspace(geo, 0.99).k == 11);
}

TEST_CASE("gen_base reproduces the planted spectrum") {
    const auto spec = spec_of(48, 30, 5, Decay::geometric(0.9), 4);
    const auto svd = thin_svd(gen_base(spec));
    const Vector want = planted_spectrum(spec);
    CHECK((svd.s - want).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(gen_base(spec) == gen_base(spec));
}

TEST_CASE("planted channels score as labelled") {
    PlantSpec spec = spec_of(32, 32, 4, Decay::two_block(100.0));
    spec.n_aligned = 2;
    spec.n_orthogonal = 2;
    const auto sub = build_subspace(gen_base(spec), 0.85);
    REQUIRE(sub.k == 4);
    auto planted = gen_planted_lora(sub, spec);
    REQUIRE(planted.channels.size() == 4);
    CHECK(std::count(planted.aligned.begin(), planted.aligned.end(), true) == 2);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(planted.channels[i].sigma == static_cast<double>(4 - i));
        const double a = anchoring_score(planted.channels[i], sub);
        if (planted.aligned[i]) {
            CHECK(a == doctest::Approx(1.0).epsilon(1e-12));
        } else {
            CHECK(a <= 1e-24);
        }
    }
}

TEST_CASE("planted channels stay separated over many seeds") {
    PlantSpec spec = spec_of(64, 64, 8, Decay::two_block(10.0));
    spec.n_aligned = 4;
    spec.n_orthogonal = 4;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        spec.seed = seed;
        CAPTURE(seed);
        const auto sub = build_subspace(gen_base(spec), 0.85);
        REQUIRE(sub.k == 8);
        const auto planted = gen_planted_lora(sub, spec);
        const Matrix l = [&] {
            Matrix out(64, 8);
            for (int i = 0; i < 8; ++i) out.col(i) = planted.channels[static_cast<std::size_t>(i)].left;
            return out;
        }();
        CHECK(orthonormality_defect(l) <= 1e-10);
        for (std::size_t i = 0; i < 8; ++i) {
            auto ch = planted.channels[i];
            const double a = anchoring_score(ch, sub);
            CHECK((a >= 1.0 - 1e-10) == planted.aligned[i]);
            if (!planted.aligned[i]) CHECK(a <= 1e-20);
        }
    }
}

TEST_CASE("plant capacity and spec validation") {
    PlantSpec spec = spec_of(16, 16, 3, Decay::two_block(100.0));
    const auto sub = build_subspace(gen_base(spec), 0.85);
    spec.n_aligned = 4;
    CHECK(code_of([&] { gen_planted_lora(sub, spec); }) == ErrorCode::PlantCapacity);
    spec.n_aligned = 1;
    spec.n_orthogonal = 14;
    CHECK(code_of([&] { gen_planted_lora(sub, spec); }) == ErrorCode::PlantCapacity);
    spec.n_orthogonal = 13;
    CHECK(gen_planted_lora(sub, spec).channels.size() == 14);

    PlantSpec bad = spec_of(8, 8, 9, Decay::flat());
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::InvalidArgument);
    bad = spec_of(8, 8, 2, Decay::geometric(1.5));
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::InvalidArgument);
    bad = spec_of(8, 8, 2, Decay::two_block(0.5));
    CHECK(code_of([&] { bad.validate(); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("Monte-Carlo estimate of the random baseline") {
    for (auto [m, n, k] : {std::tuple{64, 64, 16}, {128, 64, 8}, {32, 32, 32}}) {
        CAPTURE(m);
        CAPTURE(n);
        CAPTURE(k);
        const double expected = null_baseline(k, m, n);
        const double mean = monte_carlo_null(m, n, k, 10000, 7);
        CHECK(std::abs(mean - expected) <= 0.05 * expected);
    }
    CHECK(monte_carlo_null(12, 12, 12, 100, 1) == 1.0);
    CHECK(monte_carlo_null(40, 30, 5, 2000, 3) == monte_carlo_null(40, 30, 5, 2000, 3));
    CHECK(monte_carlo_null(40, 30, 5, 2000, 3) != monte_carlo_null(40, 30, 5, 2000, 4));
    CHECK(code_of([] { monte_carlo_null(4, 4, 2, 0, 0); }) == ErrorCode::InvalidArgument);
    CHECK(code_of([] { monte_carlo_null(4, 4, 5, 10, 0); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("ablation on a well separated layer") {
    // Gap 10 puts 8 / (8 + 56 / 100) of the energy in the first block, so tau = 0.85 selects K = 8.
    PlantSpec spec = spec_of(64, 64, 8, Decay::two_block(10.0), 5);
    spec.n_aligned = 4;
    spec.n_orthogonal = 4;
    GateConfig cfg;
    cfg.mode = GateMode::Hard;
    const auto r = run_ablation(spec, cfg);
    CHECK(r.k == 8);
    CHECK(r.a_null == 64.0 / 4096.0);
    CHECK(r.true_positive == 4);
    CHECK(r.true_negative == 4);
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.scores_aligned.size() == 4);
    CHECK(r.removed_energy == doctest::Approx(r.planted_orthogonal_energy).epsilon(1e-10));
    const double kept_energy = 204.0 - r.planted_orthogonal_energy; // sum of s^2 for s = 1..8
    CHECK(r.filtered_norm * r.filtered_norm == doctest::Approx(kept_energy).epsilon(1e-10));

    const auto doc = nlohmann::json::parse(separation_json(r));
    CHECK(doc.at("confusion").at("true_positive") == 4);
    CHECK(doc.at("k") == 8);
}

TEST_CASE("ablation with no plants") {
    PlantSpec spec = spec_of(16, 16, 4, Decay::two_block(100.0));
    spec.n_aligned = 0;
    const auto r = run_ablation(spec, GateConfig{});
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.filtered_norm == 0.0);
}

TEST_CASE("score varies continuously with the mixing angle") {
    PrincipalSubspace<double> sub;
    sub.left_basis = Matrix::Identity(6, 2);
    sub.right_basis = Matrix::Identity(5, 2);
    sub.k = 2;
    sub.a_null = null_baseline(2, 6, 5);
    for (int i = 0; i <= 180; ++i) {
        const double theta = M_PI / 2.0 * i / 180.0;
        Channel ch;
        ch.sigma = 1.0;
        ch.left = std::cos(theta) * Vector::Unit(6, 0) + std::sin(theta) * Vector::Unit(6, 4);
        ch.right = std::cos(theta) * Vector::Unit(5, 1) + std::sin(theta) * Vector::Unit(5, 3);
        CHECK(std::abs(anchoring_score(ch, sub) - std::pow(std::cos(theta), 4)) <= 1e-8);
    }
}

TEST_CASE("plant spec JSON") {
    const auto spec = parse_plant_spec(R"({"m": 40, "n": 20, "k_true": 5, "decay": {"kind": "geometric", "ratio": 0.7},
                                          "n_aligned": 3, "n_orthogonal": 1, "seed": 9, "sigma_profile": [4, 3, 2, 1]})");
    CHECK(spec.m == 40);
    CHECK(spec.n == 20);
    CHECK(spec.decay.kind == DecayKind::Geometric);
    CHECK(spec.decay.param == 0.7);
    CHECK(spec.sigma_profile.size() == 4);
    CHECK(spec.seed == 9);
    CHECK(parse_plant_spec(R"({"decay": "flat"})").decay.kind == DecayKind::Flat);
    CHECK(code_of([] { parse_plant_spec("{"); }) == ErrorCode::ConfigError);
    CHECK(code_of([] { parse_plant_spec(R"({"decay": "cubic"})"); }) == ErrorCode::ConfigError);
}

TEST_CASE("toy fixture layers carry their planted parts") {
    ToyFixtureSpec spec;
    spec.seed = 3;
    const auto fx = build_toy_fixture(spec);
    REQUIRE(fx.stems.size() == 3);
    const auto p = pair_layers(fx.lora, fx.base, KeyMap{}, true);
    REQUIRE(p.layers.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& layer = p.layers[i];
        CHECK(layer.layer_name == fx.stems[i]);
        CHECK(layer.scale == 2.0);
        CHECK(relative_error(assemble_delta(layer), fx.delta[i]) <= 1e-12);
        CHECK(layer.B.rows() == spec.shapes[i].first);
        CHECK(build_subspace(layer.base, 0.85).k == 6);
    }
    CHECK(fx.lora.metadata.at("ss_network_module") == "networks.lora");
    CHECK(fx.lora.tensors.count("training_step") == 1);
}
