// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#include "baf/pipeline.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <functional>
#include <thread>

namespace baf {
namespace {

struct LayerJob {
    const LoraLayer* layer = nullptr;
    GateConfig gate;
};

struct LayerResult {
    LayerEntry entry;
    std::map<std::string, TensorRecord> records;
    std::exception_ptr error;
};

GateConfig gate_for(const RunConfig& cfg, const std::string& stem, RunKind kind) {
    GateConfig g = cfg.gate;
    for (const auto& o : cfg.overrides) {
        if (!glob_match(o.pattern, stem)) continue;
        if (o.mode) g.mode = *o.mode;
        if (o.alpha) g.alpha = *o.alpha;
        if (o.tau_energy) g.tau_energy = *o.tau_energy;
    }
    if (kind == RunKind::SplitHigh) g.mode = GateMode::Hard;
    if (kind == RunKind::SplitLow) g.mode = GateMode::Complement;
    return g;
}

bool included(const RunConfig& cfg, const std::string& stem) {
    if (!cfg.include.empty()) {
        bool any = false;
        for (const auto& p : cfg.include) any = any || glob_match(p, stem);
        if (!any) return false;
    }
    for (const auto& p : cfg.exclude) {
        if (glob_match(p, stem)) return false;
    }
    return true;
}

LayerResult process_layer(const LoraLayer& layer, const GateConfig& gate, std::optional<DType> out_dtype,
                          bool emit) {
    LayerResult res;
    const Matrix delta = assemble_delta(layer);
    if (!delta.allFinite()) {
        throw Error(ErrorCode::InvalidMatrix, "effective update contains NaN or Inf");
    }
    const auto sub = build_subspace(layer.base, gate.tau_energy, gate.zero_sigma_tol);
    std::vector<Channel> channels;
    if (delta.squaredNorm() > 0.0) {
        channels = channels_of(thin_svd(delta), gate.zero_sigma_tol);
    }
    auto filtered = filter_layer(std::move(channels), sub, gate);

    LayerEntry& e = res.entry;
    e.report = std::move(filtered.report);
    e.report.layer_name = layer.layer_name;
    e.report.r = layer.rank;
    e.status = "filtered";
    e.base_key = layer.base_key;
    e.gate = gate;
    if (emit) {
        const DType dt = out_dtype.value_or(layer.factor_dtype);
        const auto factors = refactor_channels(filtered.channels, delta.rows(), delta.cols(), dt);
        res.records = factor_records(layer, factors, dt);
        e.out_rank = factors.rank();
        e.alpha_out = factors.alpha;
    }
    return res;
}

void run_pool(std::size_t count, unsigned workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const unsigned n = static_cast<unsigned>(std::min<std::size_t>(workers, count));
    for (unsigned t = 0; t < n; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

std::filesystem::path staging_path(const std::filesystem::path& p) {
    auto s = p;
    s += ".partial";
    return s;
}

// Files written under a staging name and renamed into place together.
class StagedOutputs {
public:
    ~StagedOutputs() {
        if (committed_) return;
        std::error_code ec;
        for (const auto& p : staged_) std::filesystem::remove(staging_path(p), ec);
    }

    std::filesystem::path stage(const std::filesystem::path& target) {
        staged_.push_back(target);
        return staging_path(target);
    }

    void commit() {
        for (const auto& p : staged_) {
            std::error_code ec;
            std::filesystem::rename(staging_path(p), p, ec);
            if (ec) throw Error(ErrorCode::IoError, "cannot move output into '" + p.string() + "': " + ec.message());
        }
        committed_ = true;
    }

private:
    std::vector<std::filesystem::path> staged_;
    bool committed_ = false;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw Error(ErrorCode::IoError, "write to '" + path.string() + "' failed");
}

void validate(const RunConfig& cfg, RunKind kind) {
    cfg.gate.validate();
    for (const auto& o : cfg.overrides) {
        GateConfig g = cfg.gate;
        if (o.alpha) g.alpha = *o.alpha;
        if (o.tau_energy) g.tau_energy = *o.tau_energy;
        g.validate();
    }
    if (cfg.lora_path.empty() || cfg.base_path.empty()) {
        throw Error(ErrorCode::ConfigError, "both --lora and --base are required");
    }
    if (kind != RunKind::Inspect) {
        if (cfg.output_path.empty()) throw Error(ErrorCode::ConfigError, "--out is required");
        std::error_code ec;
        const bool same = cfg.output_path == cfg.lora_path ||
                          (std::filesystem::exists(cfg.output_path) &&
                           std::filesystem::equivalent(cfg.output_path, cfg.lora_path, ec));
        if (same) throw Error(ErrorCode::ConfigError, "output path must differ from the input adapter");
    }
}

FilterReport execute(const RunConfig& cfg, RunKind kind) {
    validate(cfg, kind);
    const bool emit = kind != RunKind::Inspect;

    const Checkpoint lora = read_checkpoint(cfg.lora_path);
    const Checkpoint base = read_checkpoint(cfg.base_path);
    const KeyMap keymap = load_keymap(cfg.keymap);
    PairingResult paired = pair_layers(lora, base, keymap, cfg.strict);

    FilterReport report;
    report.kind = kind;
    report.config = cfg;

    std::vector<LayerJob> jobs;
    for (const auto& layer : paired.layers) {
        if (!included(cfg, layer.layer_name)) {
            LayerEntry e;
            e.report.layer_name = layer.layer_name;
            e.report.m = layer.B.rows();
            e.report.n = layer.A.cols();
            e.report.r = layer.rank;
            e.status = "excluded";
            e.base_key = layer.base_key;
            e.note = "excluded by include/exclude patterns; passed through";
            report.layers.push_back(std::move(e));
            continue;
        }
        jobs.push_back({&layer, gate_for(cfg, layer.layer_name, kind)});
    }
    for (const auto& u : paired.unmatched) {
        LayerEntry e;
        e.report.layer_name = u.stem;
        e.status = "unmatched";
        e.note = u.reason + "; passed through unfiltered";
        report.layers.push_back(std::move(e));
    }
    for (const auto& s : paired.skipped) {
        LayerEntry e;
        e.report.layer_name = s.stem;
        e.status = "skipped";
        e.note = s.reason;
        report.layers.push_back(std::move(e));
    }

    std::vector<LayerResult> results(jobs.size());
    const unsigned workers = cfg.workers ? cfg.workers : std::max(1u, std::thread::hardware_concurrency());
    run_pool(jobs.size(), workers, [&](std::size_t i) {
        try {
            results[i] = process_layer(*jobs[i].layer, jobs[i].gate, cfg.out_dtype, emit);
        } catch (...) {
            results[i].error = std::current_exception();
        }
    });

    Checkpoint out;
    if (emit) {
        out = lora;
    }
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (results[i].error) {
            try {
                std::rethrow_exception(results[i].error);
            } catch (const Error& e) {
                throw e.with_context("layer '" + jobs[i].layer->layer_name + "'");
            }
        }
        for (auto& [key, rec] : results[i].records) {
            out.tensors[key] = std::move(rec);
        }
        report.layers.push_back(std::move(results[i].entry));
    }
    std::sort(report.layers.begin(), report.layers.end(),
              [](const LayerEntry& a, const LayerEntry& b) { return a.report.layer_name < b.report.layer_name; });
    report.aggregates = compute_aggregates(report.layers);

    StagedOutputs staged;
    if (emit) {
        write_checkpoint(out, staged.stage(cfg.output_path));
    }
    if (cfg.report_path) {
        write_text(staged.stage(*cfg.report_path), report_to_json(report).dump(2) + "\n");
    }
    if (cfg.csv_path) {
        write_text(staged.stage(*cfg.csv_path), channels_csv(report));
    }
    staged.commit();
    return report;
}

} // namespace

std::string_view run_kind_name(RunKind k) noexcept {
    switch (k) {
    case RunKind::Filter: return "filter";
    case RunKind::Inspect: return "inspect";
    case RunKind::SplitHigh: return "split-high";
    case RunKind::SplitLow: return "split-low";
    }
    return "?";
}

std::string_view gate_mode_name(GateMode m) noexcept {
    switch (m) {
    case GateMode::Hard: return "hard";
    case GateMode::Soft: return "soft";
    case GateMode::Complement: return "complement";
    }
    return "?";
}

GateMode parse_gate_mode(std::string_view name) {
    if (name == "hard") return GateMode::Hard;
    if (name == "soft") return GateMode::Soft;
    if (name == "complement") return GateMode::Complement;
    throw Error(ErrorCode::ConfigError, "unknown gate mode '" + std::string(name) + "'");
}

bool glob_match(const std::string& pattern, const std::string& text) {
    return ::fnmatch(pattern.c_str(), text.c_str(), 0) == 0;
}

std::vector<LayerOverride> parse_overrides_json(std::string_view json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("overrides JSON: ") + e.what());
    }
    if (!doc.is_array()) throw Error(ErrorCode::ConfigError, "overrides must be a JSON array");
    std::vector<LayerOverride> out;
    try {
        for (const auto& item : doc) {
            LayerOverride o;
            o.pattern = item.at("match").get<std::string>();
            if (item.contains("mode")) o.mode = parse_gate_mode(item.at("mode").get<std::string>());
            if (item.contains("alpha")) o.alpha = item.at("alpha").get<double>();
            if (item.contains("tau_energy")) o.tau_energy = item.at("tau_energy").get<double>();
            out.push_back(std::move(o));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("overrides: ") + e.what());
    }
    return out;
}

FilterReport run_filter(const RunConfig& cfg) { return execute(cfg, RunKind::Filter); }

FilterReport inspect(const RunConfig& cfg) { return execute(cfg, RunKind::Inspect); }

FilterReport ablation_split(const RunConfig& cfg, SplitDirection direction) {
    return execute(cfg, direction == SplitDirection::HighOnly ? RunKind::SplitHigh : RunKind::SplitLow);
}

int exit_code_for(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidArgument: return 2;
    case ErrorCode::ParseError:
    case ErrorCode::CorruptFile:
    case ErrorCode::UnsupportedDtype:
    case ErrorCode::IoError: return 3;
    case ErrorCode::UnmatchedLayer:
    case ErrorCode::ShapeMismatch: return 4;
    case ErrorCode::InvalidMatrix:
    case ErrorCode::SvdNoConvergence:
    case ErrorCode::NotUnitVector:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::EmptyChannelSet:
    case ErrorCode::ZeroSpectrum:
    case ErrorCode::UnsortedSpectrum:
    case ErrorCode::PlantCapacity: return 5;
    }
    return 1;
}

} // namespace baf
