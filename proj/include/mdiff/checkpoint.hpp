// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Single-file parameter archive:
//   "MDIFFCK1" | u64 header length | JSON header | raw float64 payload
// The header lists every tensor (name, shape, offset in doubles) in store
// order and carries an arbitrary JSON "config" object. Payload bytes are the
// in-memory doubles, so save/load round-trips bitwise.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "mdiff/error.hpp"
#include "mdiff/io.hpp"
#include "mdiff/nn.hpp"

namespace mdiff::checkpoint {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::string_view kMagic = "MDIFFCK1";

inline std::string serialize(const nn::ParamStore& store, const json& config) {
    json tensors = json::array();
    std::size_t offset = 0;
    for (const auto& [name, v] : store.items()) {
        tensors.push_back({{"name", name}, {"shape", v.shape()}, {"offset", offset}});
        offset += v.size();
    }
    const std::string header = json{{"config", config}, {"tensors", tensors}}.dump();
    std::string out(kMagic);
    const std::uint64_t hlen = header.size();
    out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out += header;
    for (const auto& [_, v] : store.items())
        out.append(reinterpret_cast<const char*>(v.value().data()), v.size() * sizeof(double));
    return out;
}

struct Archive {
    json config;
    json tensors;
    std::string payload;
};

inline Archive parse(std::string_view bytes) {
    if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic)
        throw ValidationError("not an mdiff checkpoint (bad magic)");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + kMagic.size(), sizeof hlen);
    const std::size_t hstart = kMagic.size() + sizeof hlen;
    if (bytes.size() < hstart + hlen) throw ValidationError("truncated checkpoint header");
    const json header = json::parse(bytes.substr(hstart, hlen));
    return {header.at("config"), header.at("tensors"), std::string(bytes.substr(hstart + hlen))};
}

/// Copies archived tensors into an already-constructed store. Every store
/// parameter must be present with the same shape.
inline void load_into(const Archive& a, nn::ParamStore& store) {
    std::map<std::string, const json*> by_name;
    for (const auto& t : a.tensors) by_name[t.at("name").get<std::string>()] = &t;
    for (auto& [name, v] : store.items()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ValidationError("checkpoint lacks parameter " + name);
        const auto shape = it->second->at("shape").get<ag::Shape>();
        if (shape != v.shape())
            throw ValidationError("checkpoint shape mismatch for " + name + ": " + ag::shape_str(shape) + " vs " +
                                  ag::shape_str(v.shape()));
        const std::size_t off = it->second->at("offset").get<std::size_t>() * sizeof(double);
        if (off + v.size() * sizeof(double) > a.payload.size()) throw ValidationError("checkpoint payload truncated at " + name);
        std::memcpy(v.mutable_value().data(), a.payload.data() + off, v.size() * sizeof(double));
    }
    if (by_name.size() != store.size()) throw ValidationError("checkpoint has parameters the model does not define");
}

inline std::string save(const fs::path& path, const nn::ParamStore& store, const json& config) {
    const std::string bytes = serialize(store, config);
    io::write_file(path, bytes);
    return io::git_blob_hash(bytes);
}

inline std::string content_hash(const nn::ParamStore& store, const json& config) {
    return io::git_blob_hash(serialize(store, config));
}

inline std::string file_hash(const fs::path& path) { return io::git_blob_hash(io::read_file(path)); }

}  // namespace mdiff::checkpoint
