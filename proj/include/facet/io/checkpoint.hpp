#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/nn/layers.hpp"

namespace facet {

// Checkpoint directory = weights.bin + meta.json. weights.bin is a flat list
// of named float32 tensors:
//   u32 count, then per tensor: u32 name_len, name, u32 ndim, i32 dims, f32 data.
// Loading matches by name into an existing parameter set and refuses missing
// names or shape disagreement, so architecture mismatches surface as errors
// rather than silent garbage.

namespace detail {
template <class I>
void put(std::ofstream& f, I v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(I));
}
template <class I>
I get(std::ifstream& f) {
    I v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(I));
    return v;
}
}  // namespace detail

inline void save_weights(const std::string& path,
                         const std::vector<nn::Parameter<float>*>& params) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(errc::io_error, "save_weights: cannot open " + path);
    detail::put<uint32_t>(f, static_cast<uint32_t>(params.size()));
    for (const auto* p : params) {
        detail::put<uint32_t>(f, static_cast<uint32_t>(p->name.size()));
        f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        detail::put<uint32_t>(f, static_cast<uint32_t>(p->value.ndim()));
        for (int d : p->value.shape) detail::put<int32_t>(f, d);
        f.write(reinterpret_cast<const char*>(p->value.data()),
                p->value.numel() * static_cast<long long>(sizeof(float)));
    }
    if (!f) throw Error(errc::io_error, "save_weights: short write to " + path);
}

inline void load_weights(const std::string& path,
                         const std::vector<nn::Parameter<float>*>& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(errc::io_error, "load_weights: cannot open " + path);
    uint32_t count = detail::get<uint32_t>(f);
    std::map<std::string, std::pair<std::vector<int>, std::vector<float>>> loaded;
    for (uint32_t i = 0; i < count && f; ++i) {
        uint32_t nl = detail::get<uint32_t>(f);
        std::string name(nl, '\0');
        f.read(name.data(), nl);
        uint32_t nd = detail::get<uint32_t>(f);
        std::vector<int> shape(nd);
        long long n = 1;
        for (auto& d : shape) {
            d = detail::get<int32_t>(f);
            n *= d;
        }
        std::vector<float> data(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(data.data()), n * static_cast<long long>(sizeof(float)));
        loaded[name] = {std::move(shape), std::move(data)};
    }
    if (!f) throw Error(errc::integrity, "load_weights: truncated " + path);
    for (auto* p : params) {
        auto it = loaded.find(p->name);
        if (it == loaded.end())
            throw Error(errc::checkpoint_mismatch, "load_weights: missing tensor " + p->name);
        if (it->second.first != p->value.shape)
            throw Error(errc::checkpoint_mismatch, "load_weights: shape mismatch on " + p->name);
        std::copy(it->second.second.begin(), it->second.second.end(), p->value.data());
    }
}

inline void save_checkpoint_dir(const std::string& dir,
                                const std::vector<nn::Parameter<float>*>& params,
                                const nlohmann::json& meta) {
    std::filesystem::create_directories(dir);
    save_weights(dir + "/weights.bin", params);
    std::ofstream m(dir + "/meta.json", std::ios::trunc);
    if (!m) throw Error(errc::io_error, "save_checkpoint: cannot open meta in " + dir);
    m << meta.dump(2) << "\n";
}

inline nlohmann::json load_meta(const std::string& dir) {
    std::ifstream m(dir + "/meta.json");
    if (!m) throw Error(errc::io_error, "load_checkpoint: missing meta.json in " + dir);
    nlohmann::json j;
    try {
        m >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(errc::integrity, std::string("load_checkpoint: bad meta.json: ") + e.what());
    }
    return j;
}

}  // namespace facet
