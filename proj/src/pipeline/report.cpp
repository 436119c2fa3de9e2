// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <sstream>

#include "baf/pipeline.hpp"

namespace baf {
namespace {

using json = nlohmann::json;

json gate_json(const GateConfig& g) {
    return {{"mode", gate_mode_name(g.mode)},
            {"alpha", g.alpha},
            {"tau_energy", g.tau_energy},
            {"zero_sigma_tol", g.zero_sigma_tol}};
}

json config_json(const RunConfig& c) {
    json overrides = json::array();
    for (const auto& o : c.overrides) {
        json item = {{"match", o.pattern}};
        if (o.mode) item["mode"] = gate_mode_name(*o.mode);
        if (o.alpha) item["alpha"] = *o.alpha;
        if (o.tau_energy) item["tau_energy"] = *o.tau_energy;
        overrides.push_back(std::move(item));
    }
    return {
        {"lora_path", c.lora_path.string()},
        {"base_path", c.base_path.string()},
        {"output_path", c.output_path.string()},
        {"gate", gate_json(c.gate)},
        {"keymap", c.keymap},
        {"strict", c.strict},
        {"include", c.include},
        {"exclude", c.exclude},
        {"workers", c.workers},
        {"out_dtype", c.out_dtype ? std::string(dtype_name(*c.out_dtype)) : std::string("preserve")},
        {"overrides", overrides},
    };
}

// Shared by compute_aggregates and the consistency check so both sum in the
// same order.
struct Accumulator {
    Aggregates agg;

    void add(double sigma, double anchoring, double a_null) {
        ++agg.total_channels;
        ++agg.histogram[histogram_bin(anchoring)];
        const double energy = sigma * sigma;
        agg.energy_total += energy;
        if (anchoring < a_null) {
            ++agg.channels_below_null;
            agg.energy_below_null += energy;
        }
    }

    Aggregates finish() {
        if (agg.total_channels > 0) {
            agg.fraction_below_null =
                static_cast<double>(agg.channels_below_null) / static_cast<double>(agg.total_channels);
        }
        if (agg.energy_total > 0.0) {
            agg.fraction_energy_below_null = agg.energy_below_null / agg.energy_total;
        }
        return agg;
    }
};

json aggregates_json(const Aggregates& a) {
    return {
        {"total_channels", a.total_channels},
        {"total_kept", a.total_kept},
        {"histogram", {{"bins", kHistogramBins}, {"lo", 0.0}, {"hi", 1.0}, {"counts", a.histogram}}},
        {"channels_below_null", a.channels_below_null},
        {"fraction_below_null", a.fraction_below_null},
        {"energy_total", a.energy_total},
        {"energy_below_null", a.energy_below_null},
        {"fraction_energy_below_null", a.fraction_energy_below_null},
    };
}

} // namespace

std::size_t histogram_bin(double anchoring) noexcept {
    const double clamped = std::clamp(anchoring, 0.0, 1.0);
    const auto bin = static_cast<std::size_t>(std::floor(clamped * kHistogramBins));
    return std::min<std::size_t>(bin, kHistogramBins - 1);
}

Aggregates compute_aggregates(const std::vector<LayerEntry>& layers) {
    Accumulator acc;
    for (const auto& l : layers) {
        for (const auto& c : l.report.channel_records) {
            acc.add(c.sigma, c.anchoring, l.report.a_null);
        }
        acc.agg.total_kept += l.report.kept_count;
    }
    return acc.finish();
}

json report_to_json(const FilterReport& report) {
    json layers = json::array();
    for (const auto& l : report.layers) {
        const LayerReport& r = l.report;
        json channels = json::array();
        for (const auto& c : r.channel_records) {
            channels.push_back({{"sigma", c.sigma}, {"anchoring", c.anchoring}, {"gate", c.gate}});
        }
        json item = {
            {"layer_name", r.layer_name},
            {"status", l.status},
            {"m", r.m},
            {"n", r.n},
            {"r", r.r},
        };
        if (!l.note.empty()) item["note"] = l.note;
        if (l.status == "filtered") {
            item["base_key"] = l.base_key;
            item["gate"] = gate_json(l.gate);
            item["k"] = r.k;
            item["a_null"] = r.a_null;
            item["energy_ratio"] = r.energy_ratio;
            item["kept_count"] = r.kept_count;
            item["fro_norm_before"] = r.fro_norm_before;
            item["fro_norm_after"] = r.fro_norm_after;
            if (report.kind != RunKind::Inspect) {
                item["out_rank"] = l.out_rank;
                item["alpha_out"] = l.alpha_out;
            }
            item["channels"] = std::move(channels);
        }
        layers.push_back(std::move(item));
    }
    return {
        {"schema", kReportSchema},
        {"tool_version", kToolVersion},
        {"command", run_kind_name(report.kind)},
        {"config", config_json(report.config)},
        {"layers", std::move(layers)},
        {"aggregates", aggregates_json(report.aggregates)},
    };
}

bool report_is_consistent(const json& doc) {
    try {
        Accumulator acc;
        for (const auto& l : doc.at("layers")) {
            if (!l.contains("channels")) continue;
            const double a_null = l.at("a_null").get<double>();
            for (const auto& c : l.at("channels")) {
                acc.add(c.at("sigma").get<double>(), c.at("anchoring").get<double>(), a_null);
            }
            acc.agg.total_kept += l.at("kept_count").get<std::int64_t>();
        }
        return aggregates_json(acc.finish()) == doc.at("aggregates");
    } catch (const json::exception&) {
        return false;
    }
}

std::string channels_csv(const FilterReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "layer,index,sigma,anchoring,gate,below_null\n";
    for (const auto& l : report.layers) {
        for (std::size_t i = 0; i < l.report.channel_records.size(); ++i) {
            const auto& c = l.report.channel_records[i];
            os << l.report.layer_name << ',' << i << ',' << c.sigma << ',' << c.anchoring << ',' << c.gate << ','
               << (c.anchoring < l.report.a_null ? 1 : 0) << '\n';
        }
    }
    return os.str();
}

} // namespace baf
