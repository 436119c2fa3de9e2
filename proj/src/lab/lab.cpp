// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#include "baf/lab.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <json.hpp>

namespace baf::lab {
namespace {

using json = nlohmann::json;

constexpr int kMonteCarloShards = 8;

Rng derived_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return Rng(seq);
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix g(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) {
            g(i, j) = dist(rng);
        }
    }
    return g;
}

Matrix orthonormalize(const Matrix& g) {
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(g.rows(), g.cols());
    // Fix column signs so Q is a deterministic function of g.
    const Matrix& r = qr.matrixQR();
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
        if (r(j, j) < 0.0) {
            q.col(j) = -q.col(j);
        }
    }
    return q;
}

// Orthonormal columns spanning a random subspace of the complement of span(basis).
Matrix random_complement(const Matrix& basis, Eigen::Index count, Rng& rng) {
    Matrix g = gaussian(basis.rows(), count, rng);
    for (int pass = 0; pass < 2; ++pass) {
        g -= basis * (basis.transpose() * g);
    }
    Matrix q = orthonormalize(g);
    q -= basis * (basis.transpose() * q);
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
        q.col(j).normalize();
    }
    return q;
}

} // namespace

void PlantSpec::validate() const {
    const Eigen::Index p = std::min(m, n);
    if (m < 1 || n < 1) {
        throw Error(ErrorCode::InvalidArgument, "plant spec: m and n must be positive");
    }
    if (k_true < 1 || k_true > p) {
        throw Error(ErrorCode::InvalidArgument, "plant spec: need 1 <= k_true <= min(m, n)");
    }
    if (n_aligned < 0 || n_orthogonal < 0 || n_aligned + n_orthogonal > p) {
        throw Error(ErrorCode::PlantCapacity, "plant spec: n_aligned + n_orthogonal exceeds min(m, n)");
    }
    if (!sigma_profile.empty()) {
        if (static_cast<Eigen::Index>(sigma_profile.size()) < n_aligned + n_orthogonal) {
            throw Error(ErrorCode::InvalidArgument, "plant spec: sigma_profile shorter than the channel count");
        }
        for (double s : sigma_profile) {
            if (!(s > 0.0) || !std::isfinite(s)) {
                throw Error(ErrorCode::InvalidArgument, "plant spec: sigma_profile entries must be positive");
            }
        }
    }
    if (decay.kind == DecayKind::Geometric && !(decay.param > 0.0 && decay.param <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "plant spec: geometric ratio must lie in (0, 1]");
    }
    if (decay.kind == DecayKind::TwoBlock && !(decay.param >= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "plant spec: two-block gap must be >= 1");
    }
}

Matrix random_orthonormal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    if (cols > rows) {
        throw Error(ErrorCode::DimensionMismatch, "random_orthonormal: more columns than rows");
    }
    return orthonormalize(gaussian(rows, cols, rng));
}

Vector random_unit_vector(Eigen::Index dim, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Vector v(dim);
    do {
        for (Eigen::Index i = 0; i < dim; ++i) {
            v(i) = dist(rng);
        }
    } while (v.squaredNorm() == 0.0);
    return v.normalized();
}

Vector planted_spectrum(const PlantSpec& spec) {
    const Eigen::Index p = std::min(spec.m, spec.n);
    Vector s(p);
    for (Eigen::Index j = 0; j < p; ++j) {
        switch (spec.decay.kind) {
        case DecayKind::Geometric: s(j) = std::pow(spec.decay.param, static_cast<double>(j)); break;
        case DecayKind::Flat: s(j) = 1.0; break;
        case DecayKind::TwoBlock: s(j) = j < spec.k_true ? 1.0 : 1.0 / spec.decay.param; break;
        }
    }
    return s;
}

Matrix gen_base(const PlantSpec& spec) {
    spec.validate();
    Rng rng = derived_rng(spec.seed, 0xBA5E);
    const Eigen::Index p = std::min(spec.m, spec.n);
    const Matrix u = random_orthonormal(spec.m, p, rng);
    const Matrix v = random_orthonormal(spec.n, p, rng);
    return u * planted_spectrum(spec).asDiagonal() * v.transpose();
}

PlantedLora gen_planted_lora(const PrincipalSubspace<double>& base_sub, const PlantSpec& spec) {
    spec.validate();
    const Eigen::Index k = base_sub.k;
    const Eigen::Index m = base_sub.rows();
    const Eigen::Index n = base_sub.cols();
    if (spec.n_aligned > k) {
        throw Error(ErrorCode::PlantCapacity, "n_aligned = " + std::to_string(spec.n_aligned) +
                                                  " exceeds subspace dimension K = " + std::to_string(k));
    }
    if (spec.n_orthogonal > std::min(m, n) - k) {
        throw Error(ErrorCode::PlantCapacity, "n_orthogonal = " + std::to_string(spec.n_orthogonal) +
                                                  " exceeds min(m, n) - K = " + std::to_string(std::min(m, n) - k));
    }
    Rng rng = derived_rng(spec.seed, 0x91A47);

    const Eigen::Index na = spec.n_aligned;
    const Eigen::Index no = spec.n_orthogonal;
    const Matrix left_in = base_sub.left_basis * random_orthonormal(k, na, rng);
    const Matrix right_in = base_sub.right_basis * random_orthonormal(k, na, rng);
    const Matrix left_out = random_complement(base_sub.left_basis, no, rng);
    const Matrix right_out = random_complement(base_sub.right_basis, no, rng);

    std::vector<bool> labels(static_cast<std::size_t>(na + no), false);
    std::fill(labels.begin(), labels.begin() + na, true);
    std::shuffle(labels.begin(), labels.end(), rng);

    PlantedLora out;
    Eigen::Index next_in = 0;
    Eigen::Index next_out = 0;
    const auto total = static_cast<std::size_t>(na + no);
    for (std::size_t i = 0; i < total; ++i) {
        Channel ch;
        ch.sigma = spec.sigma_profile.empty() ? static_cast<double>(total - i) : spec.sigma_profile[i];
        if (labels[i]) {
            ch.left = left_in.col(next_in);
            ch.right = right_in.col(next_in);
            ++next_in;
        } else {
            ch.left = left_out.col(next_out);
            ch.right = right_out.col(next_out);
            ++next_out;
        }
        out.channels.push_back(std::move(ch));
        out.aligned.push_back(labels[i]);
    }
    return out;
}

double monte_carlo_null(Eigen::Index m, Eigen::Index n, Eigen::Index k, std::int64_t trials, std::uint64_t seed) {
    if (trials < 1) {
        throw Error(ErrorCode::InvalidArgument, "monte_carlo_null: trials must be >= 1");
    }
    null_baseline(k, m, n); // range check
    Rng sub_rng = derived_rng(seed, 0x5B5);
    const Matrix left = random_orthonormal(m, k, sub_rng);
    const Matrix right = random_orthonormal(n, k, sub_rng);

    std::vector<double> shard_sums(kMonteCarloShards, 0.0);
    auto run_shard = [&](int shard) {
        const std::int64_t begin = trials * shard / kMonteCarloShards;
        const std::int64_t end = trials * (shard + 1) / kMonteCarloShards;
        Rng rng = derived_rng(seed, static_cast<std::uint64_t>(shard) + 1);
        double sum = 0.0;
        for (std::int64_t t = begin; t < end; ++t) {
            const Vector u = random_unit_vector(m, rng);
            const Vector v = random_unit_vector(n, rng);
            sum += subspace_alignment(u, left) * subspace_alignment(v, right);
        }
        shard_sums[static_cast<std::size_t>(shard)] = sum;
    };

    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (hw == 1 || trials < 1000) {
        for (int s = 0; s < kMonteCarloShards; ++s) run_shard(s);
    } else {
        std::vector<std::thread> pool;
        for (int s = 0; s < kMonteCarloShards; ++s) pool.emplace_back(run_shard, s);
        for (auto& t : pool) t.join();
    }
    double total = 0.0;
    for (double s : shard_sums) total += s;
    return total / static_cast<double>(trials);
}

SeparationResult run_ablation(const PlantSpec& spec, const GateConfig& cfg) {
    cfg.validate();
    const Matrix base = gen_base(spec);
    const auto sub = build_subspace(base, cfg.tau_energy, cfg.zero_sigma_tol);
    const PlantedLora planted = gen_planted_lora(sub, spec);

    const Eigen::Index m = spec.m;
    const Eigen::Index n = spec.n;
    SeparationResult res;
    res.a_null = sub.a_null;
    res.k = sub.k;
    for (std::size_t i = 0; i < planted.channels.size(); ++i) {
        if (!planted.aligned[i]) {
            res.planted_orthogonal_energy += planted.channels[i].sigma * planted.channels[i].sigma;
        }
    }
    if (planted.channels.empty()) {
        return res;
    }

    const Matrix delta = reconstruct(planted.channels, m, n);
    auto recovered = channels_of(thin_svd(delta), cfg.zero_sigma_tol);

    for (auto& ch : recovered) {
        // Label by the planted channel with the nearest singular value.
        std::size_t best = 0;
        for (std::size_t j = 1; j < planted.channels.size(); ++j) {
            if (std::abs(planted.channels[j].sigma - ch.sigma) < std::abs(planted.channels[best].sigma - ch.sigma)) {
                best = j;
            }
        }
        const bool aligned = planted.aligned[best];
        const double a = anchoring_score(ch, sub);
        const bool kept = gate_hard(a, sub.a_null) > 0.0;
        (aligned ? res.scores_aligned : res.scores_orthogonal).push_back(a);
        if (kept && aligned) ++res.true_positive;
        if (kept && !aligned) ++res.false_positive;
        if (!kept && aligned) ++res.false_negative;
        if (!kept && !aligned) ++res.true_negative;
        if (!kept) res.removed_energy += ch.sigma * ch.sigma;
    }
    const auto predicted = res.true_positive + res.false_positive;
    const auto actual = res.true_positive + res.false_negative;
    res.precision = predicted ? static_cast<double>(res.true_positive) / static_cast<double>(predicted) : 1.0;
    res.recall = actual ? static_cast<double>(res.true_positive) / static_cast<double>(actual) : 1.0;

    const auto filtered = filter_layer(recovered, sub, cfg);
    res.filtered_norm = filtered.report.fro_norm_after;
    return res;
}

PlantSpec parse_plant_spec(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("plant spec JSON: ") + e.what());
    }
    PlantSpec spec;
    try {
        spec.m = doc.value("m", spec.m);
        spec.n = doc.value("n", spec.n);
        spec.k_true = doc.value("k_true", spec.k_true);
        spec.n_aligned = doc.value("n_aligned", spec.n_aligned);
        spec.n_orthogonal = doc.value("n_orthogonal", spec.n_orthogonal);
        spec.seed = doc.value("seed", spec.seed);
        spec.sigma_profile = doc.value("sigma_profile", std::vector<double>{});
        if (doc.contains("decay")) {
            const json& d = doc.at("decay");
            const std::string kind = d.is_string() ? d.get<std::string>() : d.at("kind").get<std::string>();
            if (kind == "flat") {
                spec.decay = Decay::flat();
            } else if (kind == "geometric") {
                spec.decay = Decay::geometric(d.is_object() ? d.value("ratio", 0.9) : 0.9);
            } else if (kind == "two_block") {
                spec.decay = Decay::two_block(d.is_object() ? d.value("gap", 100.0) : 100.0);
            } else {
                throw Error(ErrorCode::ConfigError, "plant spec: unknown decay '" + kind + "'");
            }
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("plant spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

std::string separation_json(const SeparationResult& r) {
    json doc = {
        {"k", r.k},
        {"a_null", r.a_null},
        {"scores_aligned", r.scores_aligned},
        {"scores_orthogonal", r.scores_orthogonal},
        {"confusion",
         {{"true_positive", r.true_positive},
          {"false_positive", r.false_positive},
          {"false_negative", r.false_negative},
          {"true_negative", r.true_negative}}},
        {"precision", r.precision},
        {"recall", r.recall},
        {"removed_energy", r.removed_energy},
        {"planted_orthogonal_energy", r.planted_orthogonal_energy},
        {"filtered_norm", r.filtered_norm},
    };
    return doc.dump(2);
}

ToyFixture build_toy_fixture(const ToyFixtureSpec& spec) {
    ToyFixture fx;
    Rng rng = derived_rng(spec.seed, 0x70F);
    std::uint64_t layer_seed = spec.seed * 1000;
    for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
        const auto [m, n] = spec.shapes[i];
        const std::string module = "blocks." + std::to_string(i) + ".attn.to_out";
        const std::string stem = "lora_unet_blocks_" + std::to_string(i) + "_attn_to_out";

        PlantSpec ps;
        ps.m = m;
        ps.n = n;
        ps.k_true = spec.k_true;
        ps.n_aligned = spec.n_aligned;
        ps.n_orthogonal = spec.n_orthogonal;
        ps.seed = ++layer_seed;
        ps.decay = spec.full_rank_square ? Decay::geometric(0.97) : Decay::two_block(spec.gap);
        const Matrix base = quantize(gen_base(ps), DType::F32);
        const auto sub = build_subspace(base, 0.85);
        const PlantedLora planted = gen_planted_lora(sub, ps);

        const auto r = static_cast<Eigen::Index>(planted.channels.size());
        Matrix up(m, r);
        Matrix down(r, n);
        for (Eigen::Index c = 0; c < r; ++c) {
            const Channel& ch = planted.channels[static_cast<std::size_t>(c)];
            const double w = std::sqrt(ch.sigma / spec.alpha_over_rank);
            up.col(c) = w * ch.left;
            down.row(c) = w * ch.right.transpose();
        }
        // Mix the factors so they are not already in SVD form.
        const Matrix rot = random_orthonormal(r, r, rng);
        up = quantize(up * rot, spec.dtype);
        down = quantize(rot.transpose() * down, spec.dtype);

        const double alpha = spec.alpha_over_rank * static_cast<double>(r);
        fx.lora.tensors[stem + ".lora_up.weight"] = from_matrix(up, spec.dtype, {m, r});
        fx.lora.tensors[stem + ".lora_down.weight"] = from_matrix(down, spec.dtype, {r, n});
        fx.lora.tensors[stem + ".alpha"] = encode_values(std::span<const double>(&alpha, 1), DType::F32, {});
        fx.base.tensors[module + ".weight"] = from_matrix(base, DType::F32, {m, n});
        const double bias_val = 0.25;
        std::vector<double> bias(static_cast<std::size_t>(m), bias_val);
        fx.base.tensors[module + ".bias"] = encode_values(bias, DType::F32, {m});

        fx.stems.push_back(stem);
        fx.delta.push_back(spec.alpha_over_rank * up * down);
        Matrix aligned = Matrix::Zero(m, n);
        for (std::size_t c = 0; c < planted.channels.size(); ++c) {
            if (planted.aligned[c]) {
                const Channel& ch = planted.channels[c];
                aligned += ch.sigma * ch.left * ch.right.transpose();
            }
        }
        fx.aligned_delta.push_back(std::move(aligned));
    }
    const double step = 1234.0;
    fx.lora.tensors["training_step"] = encode_values(std::span<const double>(&step, 1), DType::F32, {1});
    fx.lora.metadata["ss_network_module"] = "networks.lora";
    return fx;
}

} // namespace baf::lab
