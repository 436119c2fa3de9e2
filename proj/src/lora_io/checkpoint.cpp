// Copyright 2026 The BAF Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "baf/lora_io.hpp"

namespace baf {
namespace {

using json = nlohmann::json;

constexpr std::uint64_t kMaxHeaderBytes = 100u * 1024u * 1024u;
constexpr const char* kMetadataKey = "__metadata__";

std::uint64_t read_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

struct Span {
    std::uint64_t begin;
    std::uint64_t end;
    const std::string* name;
};

} // namespace

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) {
        throw Error(ErrorCode::CorruptFile, "file shorter than the 8-byte header length");
    }
    const std::uint64_t header_len = read_u64_le(bytes.data());
    if (header_len > kMaxHeaderBytes || header_len > bytes.size() - 8) {
        throw Error(ErrorCode::CorruptFile, "header length " + std::to_string(header_len) + " exceeds file size");
    }
    const auto* header_begin = reinterpret_cast<const char*>(bytes.data() + 8);
    json header;
    try {
        header = json::parse(header_begin, header_begin + header_len);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("header JSON: ") + e.what());
    }
    if (!header.is_object()) {
        throw Error(ErrorCode::ParseError, "header is not a JSON object");
    }

    const std::span<const std::uint8_t> payload = bytes.subspan(8 + header_len);
    Checkpoint ckpt;
    std::vector<Span> spans;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& name = it.key();
        const json& entry = it.value();
        if (name == kMetadataKey) {
            if (!entry.is_object()) {
                throw Error(ErrorCode::ParseError, "__metadata__ is not an object");
            }
            for (auto m = entry.begin(); m != entry.end(); ++m) {
                if (!m.value().is_string()) {
                    throw Error(ErrorCode::ParseError, "__metadata__ value for '" + m.key() + "' is not a string");
                }
                ckpt.metadata[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets")) {
            throw Error(ErrorCode::ParseError, "tensor '" + name + "' lacks dtype, shape or data_offsets");
        }
        TensorRecord rec;
        try {
            rec.dtype = parse_dtype(entry.at("dtype").get<std::string>());
            for (const auto& d : entry.at("shape")) {
                const auto dim = d.get<std::int64_t>();
                if (dim < 0) {
                    throw Error(ErrorCode::ParseError, "tensor '" + name + "' has a negative dimension");
                }
                rec.shape.push_back(dim);
            }
        } catch (const json::exception& e) {
            throw Error(ErrorCode::ParseError, "tensor '" + name + "': " + e.what());
        }
        const json& offs = entry.at("data_offsets");
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() || !offs[1].is_number_unsigned()) {
            throw Error(ErrorCode::ParseError, "tensor '" + name + "' has malformed data_offsets");
        }
        const auto begin = offs[0].get<std::uint64_t>();
        const auto end = offs[1].get<std::uint64_t>();
        if (begin > end || end > payload.size()) {
            throw Error(ErrorCode::CorruptFile, "tensor '" + name + "' offsets out of bounds");
        }
        const auto expected = static_cast<std::uint64_t>(rec.numel()) * dtype_width(rec.dtype);
        if (end - begin != expected) {
            throw Error(ErrorCode::CorruptFile, "tensor '" + name + "' byte length does not match shape");
        }
        rec.data.assign(payload.begin() + static_cast<std::ptrdiff_t>(begin),
                        payload.begin() + static_cast<std::ptrdiff_t>(end));
        auto [pos, inserted] = ckpt.tensors.emplace(name, std::move(rec));
        spans.push_back({begin, end, &pos->first});
    }

    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) {
        return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
    });
    for (std::size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].begin < spans[i - 1].end) {
            throw Error(ErrorCode::CorruptFile,
                        "tensors '" + *spans[i - 1].name + "' and '" + *spans[i].name + "' overlap");
        }
    }
    return ckpt;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "'");
    }
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return parse_checkpoint(bytes);
    } catch (const Error& e) {
        throw e.with_context(path.string());
    }
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    json header = json::object();
    if (!ckpt.metadata.empty()) {
        header[kMetadataKey] = ckpt.metadata;
    }
    std::uint64_t offset = 0;
    for (const auto& [name, rec] : ckpt.tensors) {
        if (rec.data.size() != static_cast<std::size_t>(rec.numel()) * dtype_width(rec.dtype)) {
            throw Error(ErrorCode::ShapeMismatch, "tensor '" + name + "' payload does not match shape");
        }
        header[name] = {{"dtype", dtype_name(rec.dtype)},
                        {"shape", rec.shape},
                        {"data_offsets", {offset, offset + rec.data.size()}}};
        offset += rec.data.size();
    }
    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    append_u64_le(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, rec] : ckpt.tensors) {
        out.insert(out.end(), rec.data.begin(), rec.data.end());
    }
    return out;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error(ErrorCode::IoError, "write to '" + path.string() + "' failed");
    }
}

} // namespace baf
