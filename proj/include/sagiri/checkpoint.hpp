// Self-describing checkpoint container: JSON header (kind, config, seed,
// step, tensor directory) followed by raw little-endian float32 payload.
#pragma once

#include <fstream>
#include <map>

#include <json.hpp>

#include "sagiri/tensor.hpp"

namespace sagiri {

using json = nlohmann::json;

struct ModelBundle {
    std::string kind;  // "restorer" | "vae" | "unet" | "sagiri"
    json config = json::object();
    uint64_t seed = 0;
    int64_t step = 0;
    std::map<std::string, Tensor> tensors;

    int64_t total_params() const {
        int64_t n = 0;
        for (auto& [k, t] : tensors) n += t.numel();
        return n;
    }
};

inline void save_bundle(const ModelBundle& b, const std::string& path) {
    json dir = json::array();
    int64_t offset = 0;
    for (auto& [name, t] : b.tensors) {
        dir.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.numel()}});
        offset += t.numel();
    }
    json header = {{"magic", "sagiri-bundle"}, {"version", 1},     {"kind", b.kind},
                   {"config", b.config},       {"seed", b.seed},   {"step", b.step},
                   {"tensors", dir}};
    std::string htext = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    uint64_t hlen = htext.size();
    f.write("SGRBNDL1", 8);
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (auto& [name, t] : b.tensors)
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!f) throw std::runtime_error("checkpoint write failure: " + path);
}

inline ModelBundle load_bundle(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    uint64_t hlen = 0;
    f.read(magic, 8);
    f.read(reinterpret_cast<char*>(&hlen), 8);
    if (!f || std::string(magic, 8) != "SGRBNDL1")
        throw std::runtime_error("not a checkpoint file: " + path);
    std::string htext(hlen, '\0');
    f.read(htext.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(htext);
    ModelBundle b;
    b.kind = header.at("kind").get<std::string>();
    b.config = header.at("config");
    b.seed = header.at("seed").get<uint64_t>();
    b.step = header.at("step").get<int64_t>();
    for (auto& e : header.at("tensors")) {
        Tensor t(e.at("shape").get<std::vector<int>>());
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)));
        b.tensors[e.at("name").get<std::string>()] = std::move(t);
    }
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    return b;
}

}  // namespace sagiri
