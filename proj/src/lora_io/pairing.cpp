// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "baf/lora_io.hpp"

namespace baf {
namespace {

using json = nlohmann::json;

struct SuffixPair {
    std::string_view down;
    std::string_view up;
};

// Factor spellings seen across kohya, diffusers and PEFT exports.
constexpr std::array<SuffixPair, 4> kFactorSuffixes{{
    {".lora_down.weight", ".lora_up.weight"},
    {".lora_A.weight", ".lora_B.weight"},
    {".lora.down.weight", ".lora.up.weight"},
    {".lora_A.default.weight", ".lora_B.default.weight"},
}};
constexpr std::string_view kAlphaSuffix = ".alpha";

constexpr std::array<std::string_view, 3> kDottedPrefixes{"base_model.model.", "unet.", "transformer."};

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

std::string underscored(std::string_view s) {
    std::string out(s);
    std::replace(out.begin(), out.end(), '.', '_');
    return out;
}

bool is_kohya_stem(std::string_view stem) { return starts_with(stem, "lora_unet_") || starts_with(stem, "lora_te"); }

// kohya stem -> base key, built from every 2-D/4-D "*.weight" tensor of the base.
std::map<std::string, std::string> kohya_index(const Checkpoint& base) {
    std::map<std::string, std::string> index;
    for (const auto& [key, rec] : base.tensors) {
        if (!ends_with(key, ".weight") || (rec.shape.size() != 2 && rec.shape.size() != 4)) {
            continue;
        }
        std::string_view p(key);
        p.remove_suffix(std::string_view(".weight").size());
        std::string stem;
        if (starts_with(p, "text_encoder_2.")) {
            stem = "lora_te2_" + underscored(p.substr(15));
        } else if (starts_with(p, "text_encoder.")) {
            stem = "lora_te_" + underscored(p.substr(13));
        } else if (starts_with(p, "unet.")) {
            stem = "lora_unet_" + underscored(p.substr(5));
        } else {
            stem = "lora_unet_" + underscored(p);
        }
        index.emplace(std::move(stem), key); // first key in lexicographic order wins
    }
    return index;
}

std::optional<std::string> resolve_dotted(const std::string& stem, const Checkpoint& base) {
    std::vector<std::string> candidates{stem + ".weight"};
    std::string_view rest(stem);
    for (auto prefix : kDottedPrefixes) {
        if (starts_with(rest, prefix)) {
            rest.remove_prefix(prefix.size());
            candidates.push_back(std::string(rest) + ".weight");
        }
    }
    candidates.push_back("unet." + std::string(rest) + ".weight");
    for (const auto& c : candidates) {
        if (base.tensors.count(c)) {
            return c;
        }
    }
    return std::nullopt;
}

struct StemKeys {
    std::optional<std::string> down;
    std::optional<std::string> up;
    std::optional<std::string> alpha;

    std::vector<std::string> all() const {
        std::vector<std::string> out;
        for (const auto* k : {&down, &up, &alpha}) {
            if (*k) out.push_back(**k);
        }
        return out;
    }
};

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

} // namespace

std::string_view preset_name(KeyPreset p) noexcept {
    switch (p) {
    case KeyPreset::Auto: return "auto";
    case KeyPreset::DiffusersAttn: return "diffusers";
    case KeyPreset::KohyaUNet: return "kohya";
    case KeyPreset::Custom: return "custom";
    }
    return "?";
}

KeyPreset parse_preset(std::string_view name) {
    if (name == "auto") return KeyPreset::Auto;
    if (name == "diffusers" || name == "DiffusersAttn") return KeyPreset::DiffusersAttn;
    if (name == "kohya" || name == "KohyaUNet") return KeyPreset::KohyaUNet;
    if (name == "custom" || name == "Custom") return KeyPreset::Custom;
    throw Error(ErrorCode::ConfigError, "unknown key-map preset '" + std::string(name) + "'");
}

std::string_view conv_policy_name(ConvPolicy p) noexcept {
    return p == ConvPolicy::Skip ? "skip" : "flatten2d";
}

ConvPolicy parse_conv_policy(std::string_view name) {
    if (name == "flatten2d" || name == "Flatten2D") return ConvPolicy::Flatten2D;
    if (name == "skip" || name == "Skip") return ConvPolicy::Skip;
    throw Error(ErrorCode::ConfigError, "unknown conv policy '" + std::string(name) + "'");
}

KeyMap parse_keymap_json(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("key map JSON: ") + e.what());
    }
    if (!doc.is_object()) {
        throw Error(ErrorCode::ConfigError, "key map must be a JSON object");
    }
    KeyMap km;
    km.preset = KeyPreset::Custom;
    try {
        if (doc.contains("preset")) km.preset = parse_preset(doc.at("preset").get<std::string>());
        if (doc.contains("conv_policy")) km.conv_policy = parse_conv_policy(doc.at("conv_policy").get<std::string>());
        if (doc.contains("entries")) {
            std::map<std::string, std::string> seen; // base key + slice -> stem
            for (const auto& [stem, v] : doc.at("entries").items()) {
                BaseRef ref;
                if (v.is_string()) {
                    ref.key = v.get<std::string>();
                } else if (v.is_object()) {
                    ref.key = v.at("key").get<std::string>();
                    if (v.contains("row_offset")) ref.row_offset = v.at("row_offset").get<std::int64_t>();
                    if (v.contains("row_len")) ref.row_len = v.at("row_len").get<std::int64_t>();
                    if (ref.row_offset.has_value() != ref.row_len.has_value()) {
                        throw Error(ErrorCode::ConfigError, "entry '" + stem + "' needs both row_offset and row_len");
                    }
                } else {
                    throw Error(ErrorCode::ConfigError, "entry '" + stem + "' must be a string or object");
                }
                const std::string slot = ref.key + "#" + std::to_string(ref.row_offset.value_or(-1)) + ":" +
                                         std::to_string(ref.row_len.value_or(-1));
                if (auto [it, fresh] = seen.emplace(slot, stem); !fresh) {
                    throw Error(ErrorCode::ConfigError,
                                "entries '" + it->second + "' and '" + stem + "' map to the same base weight");
                }
                km.entries.emplace(stem, std::move(ref));
            }
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("key map: ") + e.what());
    }
    return km;
}

KeyMap load_keymap(const std::string& preset_or_path) {
    if (preset_or_path.empty() || preset_or_path == "auto" || preset_or_path == "diffusers" ||
        preset_or_path == "kohya" || preset_or_path == "DiffusersAttn" || preset_or_path == "KohyaUNet") {
        KeyMap km;
        km.preset = preset_or_path.empty() ? KeyPreset::Auto : parse_preset(preset_or_path);
        return km;
    }
    std::ifstream in(preset_or_path);
    if (!in) {
        throw Error(ErrorCode::ConfigError, "key map '" + preset_or_path + "' is neither a preset nor a readable file");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_keymap_json(ss.str());
}

std::optional<std::pair<std::string, std::string>> split_adapter_key(std::string_view key) {
    for (const auto& s : kFactorSuffixes) {
        if (ends_with(key, s.down)) {
            return std::pair{std::string(key.substr(0, key.size() - s.down.size())), std::string("down")};
        }
        if (ends_with(key, s.up)) {
            return std::pair{std::string(key.substr(0, key.size() - s.up.size())), std::string("up")};
        }
    }
    if (ends_with(key, kAlphaSuffix)) {
        return std::pair{std::string(key.substr(0, key.size() - kAlphaSuffix.size())), std::string("alpha")};
    }
    return std::nullopt;
}

PairingResult pair_layers(const Checkpoint& lora, const Checkpoint& base, const KeyMap& keymap, bool strict) {
    std::map<std::string, StemKeys> stems;
    for (const auto& [key, rec] : lora.tensors) {
        auto split = split_adapter_key(key);
        if (!split) {
            continue;
        }
        auto& [stem, role] = *split;
        StemKeys& sk = stems[stem];
        auto& slot = role == "down" ? sk.down : role == "up" ? sk.up : sk.alpha;
        if (slot) {
            throw Error(ErrorCode::ShapeMismatch, "stem '" + stem + "' has two " + role + " tensors");
        }
        slot = key;
    }

    std::optional<std::map<std::string, std::string>> kohya;
    auto resolve = [&](const std::string& stem) -> std::optional<BaseRef> {
        if (auto it = keymap.entries.find(stem); it != keymap.entries.end()) {
            return it->second;
        }
        if (keymap.preset == KeyPreset::Custom) {
            return std::nullopt;
        }
        const bool use_kohya = keymap.preset == KeyPreset::KohyaUNet ||
                               (keymap.preset == KeyPreset::Auto && is_kohya_stem(stem));
        if (use_kohya) {
            if (!kohya) kohya = kohya_index(base);
            if (auto it = kohya->find(stem); it != kohya->end()) return BaseRef{it->second, {}, {}};
            return std::nullopt;
        }
        if (auto key = resolve_dotted(stem, base)) return BaseRef{*key, {}, {}};
        return std::nullopt;
    };

    PairingResult result;
    auto unpaired = [&](const std::string& stem, const StemKeys& sk, const std::string& reason) {
        if (strict) {
            throw Error(ErrorCode::UnmatchedLayer, "layer '" + stem + "': " + reason);
        }
        result.unmatched.push_back({stem, reason, sk.all()});
    };

    for (const auto& [stem, sk] : stems) {
        if (!sk.down || !sk.up) {
            // A lone ".alpha" key without factors is an ordinary tensor.
            if (!sk.down && !sk.up) continue;
            unpaired(stem, sk, sk.down ? "up factor missing" : "down factor missing");
            continue;
        }
        const TensorRecord& down = lora.tensors.at(*sk.down);
        const TensorRecord& up = lora.tensors.at(*sk.up);
        const bool conv_factors = down.shape.size() == 4 || up.shape.size() == 4;

        auto ref = resolve(stem);
        if (!ref) {
            unpaired(stem, sk, "no base weight found");
            continue;
        }
        auto base_it = base.tensors.find(ref->key);
        if (base_it == base.tensors.end()) {
            unpaired(stem, sk, "base key '" + ref->key + "' not present in base checkpoint");
            continue;
        }
        const TensorRecord& base_rec = base_it->second;
        const bool conv = conv_factors || base_rec.shape.size() == 4;
        if (conv && keymap.conv_policy == ConvPolicy::Skip) {
            result.skipped.push_back({stem, "conv layer skipped by policy", sk.all()});
            continue;
        }

        auto mismatch = [&](const std::string& what) {
            return Error(ErrorCode::ShapeMismatch, "layer '" + stem + "': " + what + " (down " +
                                                       shape_str(down.shape) + ", up " + shape_str(up.shape) +
                                                       ", base " + shape_str(base_rec.shape) + ")");
        };
        if ((down.shape.size() != 2 && down.shape.size() != 4) || (up.shape.size() != 2 && up.shape.size() != 4)) {
            throw mismatch("factors must be 2-D or 4-D");
        }
        if (up.shape.size() == 4 && (up.shape[2] != 1 || up.shape[3] != 1)) {
            throw mismatch("up factor must have a 1x1 kernel");
        }

        LoraLayer layer;
        layer.layer_name = stem;
        layer.A = to_matrix(down);
        layer.B = to_matrix(up);
        layer.rank = layer.A.rows();
        if (layer.B.cols() != layer.rank) {
            throw mismatch("inner dimensions differ");
        }
        if (layer.rank < 1) {
            throw mismatch("rank is zero");
        }
        Matrix base_m = to_matrix(base_rec);
        if (ref->row_offset) {
            const auto off = *ref->row_offset;
            const auto len = *ref->row_len;
            if (off < 0 || len < 1 || off + len > base_m.rows()) {
                throw mismatch("row slice [" + std::to_string(off) + ", +" + std::to_string(len) + ") out of range");
            }
            base_m = base_m.middleRows(off, len).eval();
        }
        if (base_m.rows() != layer.B.rows() || base_m.cols() != layer.A.cols()) {
            throw mismatch("update is " + std::to_string(layer.B.rows()) + "x" + std::to_string(layer.A.cols()) +
                           " but base is " + std::to_string(base_m.rows()) + "x" + std::to_string(base_m.cols()));
        }
        layer.base = std::move(base_m);
        layer.scale = 1.0;
        if (sk.alpha) {
            const TensorRecord& alpha_rec = lora.tensors.at(*sk.alpha);
            const double alpha = to_scalar(alpha_rec);
            layer.alpha_shape = alpha_rec.shape;
            layer.alpha_dtype = alpha_rec.dtype;
            layer.scale = alpha / static_cast<double>(layer.rank);
            layer.alpha_key = sk.alpha;
        }
        layer.down_key = *sk.down;
        layer.up_key = *sk.up;
        layer.base_key = ref->key;
        layer.down_shape = down.shape;
        layer.up_shape = up.shape;
        layer.factor_dtype = up.dtype;
        layer.conv = conv;
        result.layers.push_back(std::move(layer));
    }
    return result;
}

Matrix assemble_delta(const LoraLayer& layer) {
    Matrix delta = layer.B * layer.A;
    delta *= layer.scale;
    return delta;
}

} // namespace baf
