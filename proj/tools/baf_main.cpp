// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "baf/lab.hpp"
#include "baf/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string lora;
    std::string base;
    std::string out;
    std::string mode = "soft";
    double alpha = 1.0;
    double tau_energy = 0.85;
    double zero_sigma_tol = baf::kZeroSigmaTolerance;
    std::string keymap = "auto";
    bool strict = false;
    std::vector<std::string> include;
    std::vector<std::string> exclude;
    std::string workers = "auto";
    std::string out_dtype = "preserve";
    std::string report;
    std::string csv;
    std::string overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_out, bool with_mode) {
    cmd->add_option("--lora", a.lora, "Adapter checkpoint")->required();
    cmd->add_option("--base", a.base, "Base model checkpoint")->required();
    if (with_out) {
        cmd->add_option("--out", a.out, "Output adapter path")->required();
        cmd->add_option("--out-dtype", a.out_dtype, "f64|f32|f16|bf16|preserve");
    }
    if (with_mode) {
        cmd->add_option("--mode", a.mode, "hard|soft")->check(CLI::IsMember({"hard", "soft"}));
        cmd->add_option("--alpha", a.alpha, "Soft gate exponent");
    }
    cmd->add_option("--tau-energy", a.tau_energy, "Energy fraction that sizes the base subspace");
    cmd->add_option("--zero-sigma-tol", a.zero_sigma_tol, "Relative cutoff for zero singular values");
    cmd->add_option("--keymap", a.keymap, "auto|diffusers|kohya or a JSON key-map file");
    cmd->add_flag("--strict", a.strict, "Fail on adapter layers without a base weight");
    cmd->add_option("--include", a.include, "Only filter layers matching GLOB");
    cmd->add_option("--exclude", a.exclude, "Never filter layers matching GLOB");
    cmd->add_option("--workers", a.workers, "Worker threads (N or auto)");
    cmd->add_option("--report", a.report, "Report JSON path");
    cmd->add_option("--csv", a.csv, "Per-channel CSV path");
    cmd->add_option("--overrides", a.overrides, "JSON list of per-layer gate overrides");
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw baf::Error(baf::ErrorCode::ConfigError, "cannot read '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

baf::RunConfig to_config(const CommonArgs& a) {
    baf::RunConfig cfg;
    cfg.lora_path = a.lora;
    cfg.base_path = a.base;
    cfg.output_path = a.out;
    if (!a.report.empty()) cfg.report_path = a.report;
    if (!a.csv.empty()) cfg.csv_path = a.csv;
    cfg.gate.mode = baf::parse_gate_mode(a.mode);
    cfg.gate.alpha = a.alpha;
    cfg.gate.tau_energy = a.tau_energy;
    cfg.gate.zero_sigma_tol = a.zero_sigma_tol;
    cfg.keymap = a.keymap;
    cfg.strict = a.strict;
    cfg.include = a.include;
    cfg.exclude = a.exclude;
    if (a.workers == "auto" || a.workers == "max") {
        cfg.workers = std::max(1u, std::thread::hardware_concurrency());
    } else {
        try {
            const int w = std::stoi(a.workers);
            if (w < 1) throw std::invalid_argument("workers");
            cfg.workers = static_cast<unsigned>(w);
        } catch (const std::exception&) {
            throw baf::Error(baf::ErrorCode::ConfigError, "--workers must be a positive integer or 'auto'");
        }
    }
    if (a.out_dtype != "preserve") {
        try {
            cfg.out_dtype = baf::parse_dtype(a.out_dtype);
        } catch (const baf::Error& e) {
            throw baf::Error(baf::ErrorCode::ConfigError, std::string("--out-dtype: ") + e.what());
        }
    }
    if (!a.overrides.empty()) cfg.overrides = baf::parse_overrides_json(read_file(a.overrides));
    return cfg;
}

void print_summary(const baf::FilterReport& r) {
    const auto& a = r.aggregates;
    std::size_t filtered = 0;
    for (const auto& l : r.layers) filtered += l.status == "filtered";
    std::cerr << baf::run_kind_name(r.kind) << ": " << filtered << " layer(s) scored, " << a.total_channels
              << " channel(s), " << a.total_kept << " kept, " << a.channels_below_null << " below baseline\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Base-anchored filtering of LoRA adapters"};
    app.require_subcommand(1);
    app.set_version_flag("--version", baf::kToolVersion);

    CommonArgs filter_args;
    auto* filter = app.add_subcommand("filter", "Filter an adapter against its base model");
    add_common(filter, filter_args, true, true);

    CommonArgs inspect_args;
    auto* inspect = app.add_subcommand("inspect", "Score channels and write a report only");
    add_common(inspect, inspect_args, false, true);

    CommonArgs split_args;
    std::string direction = "high";
    auto* split = app.add_subcommand("split", "Keep only channels above or below the baseline");
    add_common(split, split_args, true, false);
    split->add_option("--direction", direction, "high|low")->required()->check(CLI::IsMember({"high", "low"}));

    auto* lab = app.add_subcommand("lab", "Synthetic experiments");
    lab->require_subcommand(1);

    long long null_m = 64, null_n = 64, null_k = 16, null_trials = 10000;
    std::uint64_t null_seed = 0;
    auto* lab_null = lab->add_subcommand("null", "Monte-Carlo estimate of the random-channel baseline");
    lab_null->add_option("--m", null_m)->required();
    lab_null->add_option("--n", null_n)->required();
    lab_null->add_option("--k", null_k)->required();
    lab_null->add_option("--trials", null_trials);
    lab_null->add_option("--seed", null_seed);

    std::string ablation_spec;
    std::string ablation_mode = "hard";
    double ablation_alpha = 1.0;
    double ablation_tau = 0.85;
    auto* lab_ablation = lab->add_subcommand("ablation", "Planted-channel recovery on a synthetic layer");
    lab_ablation->add_option("--spec", ablation_spec, "Plant spec JSON file")->required();
    lab_ablation->add_option("--mode", ablation_mode)->check(CLI::IsMember({"hard", "soft"}));
    lab_ablation->add_option("--alpha", ablation_alpha);
    lab_ablation->add_option("--tau-energy", ablation_tau);

    std::string fixture_dir;
    std::uint64_t fixture_seed = 1;
    auto* lab_fixture = lab->add_subcommand("fixture", "Write a toy adapter/base pair with planted channels");
    lab_fixture->add_option("--out-dir", fixture_dir)->required();
    lab_fixture->add_option("--seed", fixture_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*filter) {
            print_summary(baf::run_filter(to_config(filter_args)));
        } else if (*inspect) {
            auto cfg = to_config(inspect_args);
            const auto report = baf::inspect(cfg);
            if (!cfg.report_path) std::cout << baf::report_to_json(report).dump(2) << "\n";
            print_summary(report);
        } else if (*split) {
            const auto dir = direction == "high" ? baf::SplitDirection::HighOnly : baf::SplitDirection::LowOnly;
            print_summary(baf::ablation_split(to_config(split_args), dir));
        } else if (*lab_null) {
            const double mean = baf::lab::monte_carlo_null(null_m, null_n, null_k, null_trials, null_seed);
            const double expected = baf::null_baseline(null_k, null_m, null_n);
            nlohmann::json out = {{"m", null_m},         {"n", null_n},       {"k", null_k},
                                  {"trials", null_trials}, {"seed", null_seed}, {"empirical_mean", mean},
                                  {"expected", expected},
                                  {"relative_error", std::abs(mean - expected) / expected}};
            std::cout << out.dump(2) << "\n";
        } else if (*lab_ablation) {
            const auto spec = baf::lab::parse_plant_spec(read_file(ablation_spec));
            baf::GateConfig gate;
            gate.mode = baf::parse_gate_mode(ablation_mode);
            gate.alpha = ablation_alpha;
            gate.tau_energy = ablation_tau;
            std::cout << baf::lab::separation_json(baf::lab::run_ablation(spec, gate)) << "\n";
        } else if (*lab_fixture) {
            baf::lab::ToyFixtureSpec spec;
            spec.seed = fixture_seed;
            const auto fx = baf::lab::build_toy_fixture(spec);
            std::filesystem::create_directories(fixture_dir);
            baf::write_checkpoint(fx.lora, std::filesystem::path(fixture_dir) / "toy_lora.safetensors");
            baf::write_checkpoint(fx.base, std::filesystem::path(fixture_dir) / "toy_base.safetensors");
            std::cerr << "wrote toy_lora.safetensors and toy_base.safetensors to " << fixture_dir << "\n";
        }
    } catch (const baf::Error& e) {
        std::cerr << "baf: " << e.what() << "\n";
        return baf::exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "baf: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
