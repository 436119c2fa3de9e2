// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "baf/filter.hpp"
#include "baf/lora_io.hpp"

namespace baf {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kReportSchema = 1;
inline constexpr int kHistogramBins = 50;

/// Per-layer gate settings, matched against layer stems by glob. Later
/// overrides win field by field.
struct LayerOverride {
    std::string pattern;
    std::optional<GateMode> mode;
    std::optional<double> alpha;
    std::optional<double> tau_energy;
};

struct RunConfig {
    std::filesystem::path lora_path;
    std::filesystem::path base_path;
    std::filesystem::path output_path;           // empty for inspect
    std::optional<std::filesystem::path> report_path;
    std::optional<std::filesystem::path> csv_path;
    GateConfig gate;
    std::string keymap = "auto"; // preset name or JSON file
    bool strict = false;
    std::vector<std::string> include;
    std::vector<std::string> exclude;
    unsigned workers = 0;           // 0 resolves to the hardware thread count
    std::optional<DType> out_dtype; // nullopt preserves the adapter's dtype
    std::vector<LayerOverride> overrides;
};

enum class RunKind { Filter, Inspect, SplitHigh, SplitLow };

std::string_view run_kind_name(RunKind k) noexcept;
std::string_view gate_mode_name(GateMode m) noexcept;
GateMode parse_gate_mode(std::string_view name);

struct LayerEntry {
    LayerReport report;
    std::string status; // "filtered", "excluded", "unmatched", "skipped"
    std::string base_key;
    std::string note;
    GateConfig gate;
    Eigen::Index out_rank = 0;
    double alpha_out = 0.0;
};

struct Aggregates {
    std::int64_t total_channels = 0;
    std::int64_t total_kept = 0;
    std::array<std::int64_t, kHistogramBins> histogram{};
    std::int64_t channels_below_null = 0;
    double fraction_below_null = 0.0;
    double energy_total = 0.0;
    double energy_below_null = 0.0;
    double fraction_energy_below_null = 0.0;

    bool operator==(const Aggregates&) const = default;
};

struct FilterReport {
    RunKind kind = RunKind::Filter;
    RunConfig config;
    std::vector<LayerEntry> layers; // sorted by layer name
    Aggregates aggregates;
};

std::size_t histogram_bin(double anchoring) noexcept;
Aggregates compute_aggregates(const std::vector<LayerEntry>& layers);

nlohmann::json report_to_json(const FilterReport& report);
/// Recomputes aggregates from the per-layer records of a report document and
/// compares them with the embedded ones exactly.
bool report_is_consistent(const nlohmann::json& doc);
std::string channels_csv(const FilterReport& report);

/// Glob match with `*`, `?` and `[...]` over layer stems.
bool glob_match(const std::string& pattern, const std::string& text);

std::vector<LayerOverride> parse_overrides_json(std::string_view json_text);

/// Filters every included layer and writes the output adapter (plus report and
/// CSV when configured). Outputs are staged and removed on failure.
FilterReport run_filter(const RunConfig& cfg);
/// Scores every included layer and writes only the report.
FilterReport inspect(const RunConfig& cfg);
/// Writes an adapter keeping only the channels at or above (HighOnly) or below
/// (LowOnly) each layer's baseline.
enum class SplitDirection { HighOnly, LowOnly };
FilterReport ablation_split(const RunConfig& cfg, SplitDirection direction);

/// Process exit status for an error code.
int exit_code_for(ErrorCode code) noexcept;

} // namespace baf
