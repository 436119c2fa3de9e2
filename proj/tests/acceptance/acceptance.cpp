// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>

#include <json.hpp>

#include "baf/lab.hpp"
#include "baf/pipeline.hpp"
#include "test_support.hpp"

using namespace baf;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

std::string fmt(const char* f, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string("\"") + BAF_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const std::filesystem::path& p) { return "\"" + p.string() + "\""; }

std::map<std::string, Matrix> deltas(const std::filesystem::path& lora, const std::filesystem::path& base) {
    std::map<std::string, Matrix> out;
    for (const auto& l : pair_layers(read_checkpoint(lora), read_checkpoint(base), KeyMap{}, true).layers) {
        out[l.layer_name] = assemble_delta(l);
    }
    return out;
}

struct ToyFiles {
    test::TempDir dir;
    std::filesystem::path lora, base;

    explicit ToyFiles(const std::string& tag, const lab::ToyFixtureSpec& spec = {}) : dir(tag) {
        const auto fx = lab::build_toy_fixture(spec);
        lora = dir / "lora.safetensors";
        base = dir / "base.safetensors";
        write_checkpoint(fx.lora, lora);
        write_checkpoint(fx.base, base);
    }

    RunConfig config(const std::string& out) const {
        RunConfig cfg;
        cfg.lora_path = lora;
        cfg.base_path = base;
        if (!out.empty()) cfg.output_path = dir / out;
        return cfg;
    }
};

Outcome null_baseline_reproduction() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (auto [m, n, k] : {std::tuple{64, 64, 16}, {128, 64, 8}, {96, 48, 24}}) {
        const double expected = null_baseline(k, m, n);
        const double mean = lab::monte_carlo_null(m, n, k, 10000, 2026);
        worst = std::max(worst, std::abs(mean - expected) / expected);
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    return {worst <= 0.05 && secs < 5.0, fmt("worst relative error %.4f over 3 shapes, %.2f s", worst, secs)};
}

Outcome planted_recovery() {
    const auto t0 = Clock::now();
    lab::PlantSpec spec;
    spec.m = spec.n = 64;
    spec.k_true = 8;
    spec.decay = lab::Decay::two_block(10.0);
    spec.n_aligned = spec.n_orthogonal = 4;
    GateConfig cfg;
    cfg.mode = GateMode::Hard;
    int perfect = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        spec.seed = seed;
        const auto r = lab::run_ablation(spec, cfg);
        const bool full = r.true_positive + r.false_negative == 4 && r.true_negative + r.false_positive == 4;
        perfect += full && r.precision == 1.0 && r.recall == 1.0;
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    return {perfect == 100 && secs < 10.0, fmt("%d/100 seeds with precision = recall = 1, %.2f s", perfect, secs)};
}

Outcome identity_at_zero_exponent() {
    ToyFiles toy("acc3");
    const auto out = toy.dir / "out.safetensors";
    const auto t0 = Clock::now();
    const int rc = run_cli("filter --lora " + q(toy.lora) + " --base " + q(toy.base) + " --out " + q(out) +
                           " --mode soft --alpha 0");
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    if (rc != 0) return {false, fmt("CLI exited with %d", rc)};
    const auto ckpt = read_checkpoint(out);
    bool f32 = true;
    for (const auto& [k, rec] : ckpt.tensors) f32 = f32 && rec.dtype == DType::F32;
    const auto in = deltas(toy.lora, toy.base);
    const auto got = deltas(out, toy.base);
    double worst = 0.0;
    for (const auto& [name, d] : in) worst = std::max(worst, relative_error(got.at(name), d));
    return {f32 && worst <= 1e-6 && secs < 5.0 && got.size() == in.size(),
            fmt("%zu layers, worst relative error %.2e (f32 output), %.2f s", in.size(), worst, secs)};
}

Outcome full_energy_collapse() {
    lab::ToyFixtureSpec spec;
    spec.shapes = {{24, 24}, {32, 32}, {40, 40}};
    spec.full_rank_square = true;
    ToyFiles toy("acc4", spec);
    auto cfg = toy.config("");
    cfg.gate.tau_energy = 1.0;
    cfg.gate.mode = GateMode::Hard;
    const auto hard = inspect(cfg);
    cfg.gate.mode = GateMode::Soft;
    const auto soft = inspect(cfg);
    std::int64_t channels = 0, kept = 0;
    bool full_rank = true;
    for (const auto& l : hard.layers) {
        channels += static_cast<std::int64_t>(l.report.channel_records.size());
        kept += l.report.kept_count;
        full_rank = full_rank && l.report.k == l.report.m && l.report.m == l.report.n;
    }
    double worst = 0.0;
    for (const auto& l : soft.layers)
        for (const auto& c : l.report.channel_records) worst = std::max(worst, std::abs(c.gate - 1.0));
    return {full_rank && channels > 0 && kept == channels && worst <= 1e-8,
            fmt("hard kept %lld/%lld channels, max |soft gate - 1| = %.1e", static_cast<long long>(kept),
                static_cast<long long>(channels), worst)};
}

Outcome partition_identity() {
    ToyFiles toy("acc5");
    ablation_split(toy.config("high.safetensors"), SplitDirection::HighOnly);
    ablation_split(toy.config("low.safetensors"), SplitDirection::LowOnly);
    const auto in = deltas(toy.lora, toy.base);
    const auto high = deltas(toy.dir / "high.safetensors", toy.base);
    const auto low = deltas(toy.dir / "low.safetensors", toy.base);
    double worst = 0.0;
    for (const auto& [name, d] : in) {
        worst = std::max(worst, relative_error(Matrix(high.at(name) + low.at(name)), d));
    }
    return {worst <= 1e-6, fmt("%zu layers, worst relative error %.2e", in.size(), worst)};
}

Outcome norm_contraction() {
    std::mt19937_64 rng(66);
    std::uniform_int_distribution<int> dim(4, 96);
    int violations = 0, checks = 0;
    double worst = -1e300;
    for (int f = 0; f < 50; ++f) {
        const Eigen::Index m = dim(rng), n = dim(rng);
        const Eigen::Index r = 1 + f % std::min<Eigen::Index>(16, std::min(m, n));
        const Matrix delta = test::random_matrix(m, r, 5000 + f) * test::random_matrix(r, n, 6000 + f);
        const Matrix base = test::random_matrix(m, n, 7000 + f);
        const auto sub = build_subspace(base, 0.85);
        const auto channels = channels_of(thin_svd(delta));
        for (double alpha : {0.5, 1.0, 2.0, 5.0}) {
            GateConfig cfg;
            cfg.mode = GateMode::Soft;
            cfg.alpha = alpha;
            const auto out = filter_layer(channels, sub, cfg);
            const double after = reconstruct(out.channels, m, n).norm();
            const double excess = after - delta.norm();
            worst = std::max(worst, excess);
            ++checks;
            violations += excess > 1e-9;
        }
    }
    return {violations == 0, fmt("%d/%d layer checks contract, max ||after|| - ||before|| = %.2e", checks - violations,
                                 checks, worst)};
}

Outcome svd_kernel() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<int> dim(1, 512);
    double worst_rec = 0.0, worst_orth = 0.0;
    for (int i = 0; i < 200; ++i) {
        const Eigen::Index m = i < 5 ? 512 : dim(rng);
        const Eigen::Index n = i < 5 ? 512 - 100 * (i % 2) : dim(rng);
        Matrix a = test::random_matrix(m, n, 9000 + i);
        if (i % 4 == 1) {
            // Rank-deficient inputs, like low-rank adapter updates.
            const Eigen::Index r = 1 + i % 8;
            a = test::random_matrix(m, r, 9500 + i) * test::random_matrix(r, n, 9700 + i);
        }
        const auto svd = thin_svd(a);
        const Matrix back = svd.U * svd.s.asDiagonal() * svd.V.transpose();
        worst_rec = std::max(worst_rec, (a - back).norm() / a.norm());
        worst_orth = std::max({worst_orth, orthonormality_defect(svd.U), orthonormality_defect(svd.V)});
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    return {worst_rec <= 1e-9 && worst_orth <= 1e-10 && secs < 60.0,
            fmt("200 matrices, reconstruction %.1e, orthonormality %.1e, %.2f s", worst_rec, worst_orth, secs)};
}

// Tensor payloads sliced straight from a file using its own header.
std::map<std::string, std::vector<std::uint8_t>> raw_payloads(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    const auto header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    std::map<std::string, std::vector<std::uint8_t>> out;
    for (const auto& [k, v] : header.items()) {
        if (k == "__metadata__") continue;
        const auto b = v.at("data_offsets")[0].get<std::size_t>() + 8 + n;
        const auto e = v.at("data_offsets")[1].get<std::size_t>() + 8 + n;
        out[k] = {bytes.begin() + static_cast<std::ptrdiff_t>(b), bytes.begin() + static_cast<std::ptrdiff_t>(e)};
    }
    return out;
}

Outcome wire_round_trip() {
    test::TempDir dir("acc8");
    int ok = 0, total = 0;
    auto check = [&](bool c) {
        ++total;
        ok += c;
    };

    // read then write: payloads of third-party files survive bit for bit.
    for (const auto* name : {"mixed_dtypes.safetensors", "lora_kohya.safetensors", "base_sd.safetensors",
                             "lora_peft.safetensors", "empty.safetensors"}) {
        const auto original = test::read_bytes(test::fixture_dir / name);
        const auto ckpt = parse_checkpoint(original);
        write_checkpoint(ckpt, dir / name);
        const auto rewritten = test::read_bytes(dir / name);
        check(raw_payloads(rewritten) == raw_payloads(original));
        check(parse_checkpoint(rewritten) == ckpt);
    }
    check(test::read_bytes(test::fixture_dir / "empty.safetensors") == serialize_checkpoint(Checkpoint{}));

    // write then read: a 100-tensor map over every dtype.
    Checkpoint big;
    const DType types[] = {DType::F64, DType::F32, DType::F16, DType::BF16};
    for (int i = 0; i < 100; ++i) {
        const Eigen::Index r = 1 + i % 9, c = 1 + (i * 7) % 13;
        big.tensors["layer." + std::to_string(i) + ".weight"] =
            from_matrix(test::random_matrix(r, c, 300 + i), types[i % 4], {r, c});
    }
    big.metadata["format"] = "pt";
    const auto bytes = serialize_checkpoint(big);
    const auto back = parse_checkpoint(bytes);
    check(back == big);
    check(serialize_checkpoint(back) == bytes);
    return {ok == total, fmt("%d/%d round-trip checks bit-exact", ok, total)};
}

Outcome determinism() {
    ToyFiles toy("acc9");
    const unsigned max_workers = std::max(1u, std::thread::hardware_concurrency());
    std::vector<std::vector<std::uint8_t>> outputs;
    for (unsigned w : {1u, 4u, max_workers}) {
        auto cfg = toy.config("out_" + std::to_string(w) + ".safetensors");
        cfg.workers = w;
        run_filter(cfg);
        outputs.push_back(test::read_bytes(cfg.output_path));
    }
    const bool same = !outputs[0].empty() && outputs[0] == outputs[1] && outputs[0] == outputs[2];
    return {same, fmt("workers {1, 4, %u}: outputs %s", max_workers, same ? "byte-identical" : "differ")};
}

// Minimal k with (s_1^2 + ... + s_k^2) >= (percent / 100) * total, evaluated as
// (100 - percent) * head_k >= percent * tail_k. The tail is summed from the
// small end, so full energy means an exactly zero tail rather than a running
// sum that has stopped growing.
Eigen::Index scan_k(const std::vector<double>& s, int percent) {
    const std::size_t len = s.size();
    std::vector<long double> head(len), tail(len, 0.0L);
    long double acc = 0.0L;
    for (std::size_t k = 0; k < len; ++k) head[k] = acc += static_cast<long double>(s[k]) * s[k];
    acc = 0.0L;
    for (std::size_t k = len; k-- > 1;) tail[k - 1] = acc += static_cast<long double>(s[k]) * s[k];
    for (std::size_t k = 0; k < len; ++k) {
        if ((100 - percent) * head[k] >= percent * tail[k]) return static_cast<Eigen::Index>(k + 1);
    }
    return static_cast<Eigen::Index>(len);
}

Outcome select_k_oracle() {
    std::mt19937_64 rng(1010);
    std::uniform_int_distribution<int> len(1, 300);
    std::uniform_int_distribution<int> shape(0, 3);
    int agree = 0, total = 0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> s(static_cast<std::size_t>(len(rng)));
        switch (shape(rng)) {
        case 0: {
            std::exponential_distribution<double> d(1.0);
            for (auto& x : s) x = d(rng);
            break;
        }
        case 1: {
            const double ratio = std::uniform_real_distribution<double>(0.5, 0.999)(rng);
            for (std::size_t j = 0; j < s.size(); ++j) s[j] = std::pow(ratio, static_cast<double>(j));
            break;
        }
        case 2: {
            // Plateaus and trailing zeros.
            std::uniform_int_distribution<int> level(0, 4);
            for (auto& x : s) x = level(rng);
            s[0] = std::max(s[0], 1.0);
            break;
        }
        default: {
            std::lognormal_distribution<double> d(0.0, 3.0);
            for (auto& x : s) x = d(rng);
        }
        }
        std::sort(s.begin(), s.end(), std::greater<>());
        for (int percent : {50, 85, 99, 100}) {
            ++total;
            agree += select_k(s, percent / 100.0) == scan_k(s, percent);
        }
    }
    return {agree == total, fmt("%d/%d (spectrum, tau) pairs agree with the scan", agree, total)};
}

} // namespace

int main() {
    const std::pair<const char*, std::function<Outcome()>> criteria[] = {
        {"null-baseline reproduction", null_baseline_reproduction},
        {"planted-partition recovery", planted_recovery},
        {"alpha = 0 identity (CLI, f32)", identity_at_zero_exponent},
        {"tau_energy = 1 collapse", full_energy_collapse},
        {"high/low partition identity", partition_identity},
        {"soft-gate norm contraction", norm_contraction},
        {"SVD kernel accuracy", svd_kernel},
        {"wire-format round trip", wire_round_trip},
        {"worker-count determinism", determinism},
        {"select_k oracle", select_k_oracle},
    };
    int failed = 0;
    int index = 0;
    for (const auto& [name, fn] : criteria) {
        ++index;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("[%s] %2d %-32s %s\n", o.pass ? "PASS" : "FAIL", index, name, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", index - failed, index);
    return failed == 0 ? 0 : 1;
}
