#pragma once

#include <filesystem>
#include <fstream>
#include <functional>

#include "punet/config.hpp"
#include "punet/nn.hpp"

namespace punet::ckpt {

// Checkpoints are a pair of files: <prefix>.json (manifest: schema, the full
// config, name -> shape/offset tables, payload checksum) and <prefix>.bin
// (all values as float32 little-endian in manifest order). A filter predicate
// selects what is saved (e.g. only prompt.* for a prompt-only checkpoint).

inline void save(const std::string& prefix, const Config& cfg, const nn::ParamRegistry& reg,
                 const std::function<bool(const std::string&)>& filter = {}) {
    namespace fs = std::filesystem;
    nlohmann::json manifest;
    manifest["schema_version"] = 1;
    manifest["config"] = to_json(cfg);
    std::vector<unsigned char> payload;
    std::int64_t offset = 0;

    auto pack = [&](const std::string& name, const Tensor& t) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = t.shape;
        entry["offset"] = offset;
        entry["count"] = t.numel();
        for (double v : t.data) append_f32le(payload, static_cast<float>(v));
        offset += t.numel();
        return entry;
    };

    manifest["params"] = nlohmann::json::array();
    for (const auto& [name, v] : reg.params)
        if (!filter || filter(name)) manifest["params"].push_back(pack(name, v->value));
    manifest["buffers"] = nlohmann::json::array();
    for (const auto& [name, b] : reg.buffers)
        if (!filter || filter(name)) manifest["buffers"].push_back(pack(name, *b));

    fs::path bin = prefix + ".bin";
    manifest["payload_file"] = bin.filename().string();
    manifest["payload_checksum"] = fnv1a64_hex(payload.data(), payload.size());

    if (bin.has_parent_path()) fs::create_directories(bin.parent_path());
    std::ofstream bf(bin, std::ios::binary);
    if (!bf) throw io_error("checkpoint: cannot write " + bin.string());
    bf.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    std::ofstream mf(prefix + ".json");
    if (!mf) throw io_error("checkpoint: cannot write " + prefix + ".json");
    mf << manifest.dump(2) << "\n";
}

struct LoadReport {
    std::size_t loaded = 0;            // manifest entries written into the registry
    std::size_t registry_uncovered = 0;  // registry entries the manifest did not mention
};

inline Config manifest_config(const std::string& prefix) {
    std::ifstream mf(prefix + ".json");
    if (!mf) throw io_error("checkpoint: missing manifest " + prefix + ".json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("checkpoint: bad manifest: ") + e.what());
    }
    return config_from_json(manifest.at("config"));
}

// Load a checkpoint into a registry. Every manifest entry must exist in the
// registry with a matching shape. With allow_partial the registry may hold
// extra entries (freshly added adapters, other tasks); without it, uncovered
// registry entries are an error. If expect is given, the embedded config must
// match it exactly.
inline LoadReport load(const std::string& prefix, nn::ParamRegistry& reg,
                       const Config* expect = nullptr, bool allow_partial = false) {
    namespace fs = std::filesystem;
    std::ifstream mf(prefix + ".json");
    if (!mf) throw io_error("checkpoint: missing manifest " + prefix + ".json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("checkpoint: bad manifest: ") + e.what());
    }
    if (manifest.value("schema_version", 0) != 1)
        throw io_error("checkpoint: unsupported schema_version");
    if (expect) {
        Config embedded = config_from_json(manifest.at("config"));
        if (config_hash(embedded) != config_hash(*expect))
            throw io_error("checkpoint: embedded config conflicts with the requested one");
    }

    fs::path bin = fs::path(prefix).parent_path() /
                   manifest.at("payload_file").get<std::string>();
    std::ifstream bf(bin, std::ios::binary);
    if (!bf) throw io_error("checkpoint: missing payload " + bin.string());
    std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bf)),
                                       std::istreambuf_iterator<char>());
    if (fnv1a64_hex(payload.data(), payload.size()) !=
        manifest.at("payload_checksum").get<std::string>())
        throw io_error("checkpoint: payload checksum mismatch");

    LoadReport report;
    std::vector<bool> covered_params(reg.params.size(), false);
    std::vector<bool> covered_buffers(reg.buffers.size(), false);

    auto read_into = [&](const nlohmann::json& entry, Tensor& dst, const std::string& kind) {
        std::string name = entry.at("name").get<std::string>();
        Shape shape = entry.at("shape").get<Shape>();
        std::int64_t offset = entry.at("offset").get<std::int64_t>();
        std::int64_t count = entry.at("count").get<std::int64_t>();
        if (shape != dst.shape)
            throw io_error("checkpoint: shape mismatch for " + kind + " " + name + ": file " +
                           shape_str(shape) + " vs registry " + shape_str(dst.shape));
        if (count != dst.numel() || (offset + count) * 4 > static_cast<std::int64_t>(payload.size()))
            throw io_error("checkpoint: payload range out of bounds for " + name);
        for (std::int64_t i = 0; i < count; ++i)
            dst.data[static_cast<std::size_t>(i)] =
                static_cast<double>(read_f32le(payload.data() + (offset + i) * 4));
        ++report.loaded;
    };

    for (const auto& entry : manifest.at("params")) {
        std::string name = entry.at("name").get<std::string>();
        bool found = false;
        for (std::size_t i = 0; i < reg.params.size(); ++i)
            if (reg.params[i].first == name) {
                read_into(entry, reg.params[i].second->value, "param");
                covered_params[i] = true;
                found = true;
                break;
            }
        if (!found) throw io_error("checkpoint: registry has no param named " + name);
    }
    for (const auto& entry : manifest.at("buffers")) {
        std::string name = entry.at("name").get<std::string>();
        bool found = false;
        for (std::size_t i = 0; i < reg.buffers.size(); ++i)
            if (reg.buffers[i].first == name) {
                read_into(entry, *reg.buffers[i].second, "buffer");
                covered_buffers[i] = true;
                found = true;
                break;
            }
        if (!found) throw io_error("checkpoint: registry has no buffer named " + name);
    }

    for (std::size_t i = 0; i < covered_params.size(); ++i)
        if (!covered_params[i]) {
            ++report.registry_uncovered;
            if (!allow_partial)
                throw io_error("checkpoint: no value for param " + reg.params[i].first);
        }
    for (std::size_t i = 0; i < covered_buffers.size(); ++i)
        if (!covered_buffers[i]) {
            ++report.registry_uncovered;
            if (!allow_partial)
                throw io_error("checkpoint: no value for buffer " + reg.buffers[i].first);
        }
    return report;
}

}  // namespace punet::ckpt
