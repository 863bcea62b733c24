#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dmdetr/model.hpp"
#include "json.hpp"

namespace dmdetr {

inline nlohmann::json model_config_json(const ModelConfig& c) {
    return {{"side", c.side},       {"patch", c.patch},
            {"c", c.c},             {"c_v", c.c_v},
            {"c_l", c.c_l},         {"heads", c.heads},
            {"c_ffn", c.c_ffn},     {"m", c.m},
            {"n", c.n},             {"p_pts", c.p_pts},
            {"vocab", c.vocab},     {"n_l", c.n_l},
            {"dropout", c.dropout}, {"init_sampling", c.init_sampling},
            {"static_sampling", c.static_sampling},
            {"encoder_context", c.encoder_context}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.side = j.at("side");
    c.patch = j.at("patch");
    c.c = j.at("c");
    c.c_v = j.at("c_v");
    c.c_l = j.at("c_l");
    c.heads = j.at("heads");
    c.c_ffn = j.at("c_ffn");
    c.m = j.at("m");
    c.n = j.at("n");
    c.p_pts = j.at("p_pts");
    c.vocab = j.at("vocab");
    c.n_l = j.at("n_l");
    c.dropout = j.at("dropout");
    c.init_sampling = j.at("init_sampling");
    c.static_sampling = j.at("static_sampling");
    c.encoder_context = j.at("encoder_context");
    return c;
}

namespace detail {
inline std::uint64_t fnv1a(const std::vector<char>& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}
}  // namespace detail

// Layout: "DMDT" | u32 version | u64 header length | header JSON
//         | f32 little-endian payload | u64 FNV-1a checksum of the payload.
inline void save_checkpoint(const Model& m, const std::string& path) {
    NamedParams params = all_parameters(m);
    nlohmann::json manifest = nlohmann::json::array();
    std::vector<char> payload;
    for (const auto& [name, t] : params) {
        manifest.push_back({{"name", name},
                            {"shape", t.shape()},
                            {"offset", payload.size()}});
        for (double v : t.values()) {
            float f = static_cast<float>(v);
            char buf[4];
            std::memcpy(buf, &f, 4);
            payload.insert(payload.end(), buf, buf + 4);
        }
    }
    nlohmann::json header = {{"config", model_config_json(m.cfg)},
                             {"static_coords", m.dec.static_coords},
                             {"manifest", manifest}};
    std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open " + path + " for writing");
    out.write("DMDT", 4);
    std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 4);
    std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    std::uint64_t checksum = detail::fnv1a(payload);
    out.write(reinterpret_cast<const char*>(&checksum), 8);
    if (!out) throw CheckpointError("write failed for " + path);
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "DMDT", 4) != 0)
        throw CheckpointError(path + ": bad magic, not a checkpoint");
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != 1)
        throw CheckpointError(path + ": unsupported format version " + std::to_string(version));
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw CheckpointError(path + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(path + ": corrupt header: " + e.what());
    }
    Model m = init_model(model_config_from_json(header.at("config")), 0);
    if (m.dec.static_sampling)
        m.dec.static_coords = header.at("static_coords").get<std::vector<double>>();
    NamedParams params = all_parameters(m);
    std::size_t total = 0;
    for (const auto& [name, t] : params) total += t.size() * 4;
    std::vector<char> payload(total);
    in.read(payload.data(), static_cast<std::streamsize>(total));
    std::uint64_t stored = 0;
    in.read(reinterpret_cast<char*>(&stored), 8);
    if (!in) throw CheckpointError(path + ": truncated payload");
    if (detail::fnv1a(payload) != stored)
        throw CheckpointError(path + ": payload checksum mismatch, file is corrupt");
    const auto& manifest = header.at("manifest");
    if (manifest.size() != params.size())
        throw CheckpointError(path + ": manifest lists " + std::to_string(manifest.size()) +
                              " tensors, model has " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = manifest[i];
        auto& [name, t] = params[i];
        if (entry.at("name") != name)
            throw CheckpointError(path + ": tensor " + std::to_string(i) + " is '" +
                                  entry.at("name").get<std::string>() + "', expected '" + name +
                                  "'");
        if (entry.at("shape").get<Shape>() != t.shape())
            throw CheckpointError(path + ": shape mismatch for " + name);
        std::size_t off = entry.at("offset");
        for (std::size_t k = 0; k < t.size(); ++k) {
            float f;
            std::memcpy(&f, payload.data() + off + k * 4, 4);
            t.values()[k] = static_cast<double>(f);
        }
    }
    return m;
}

}  // namespace dmdetr
