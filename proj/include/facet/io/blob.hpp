#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/tensor.hpp"

namespace facet {

// Raw little-endian float32 tensor + JSON sidecar (<path>.json) describing
// shape/dtype plus free-form channel and unit annotations. Round trips are
// bit-exact; writes refuse non-finite data, reads refuse shape/byte-length
// disagreement.

static_assert(std::endian::native == std::endian::little,
              "blob io assumes a little-endian host");

inline std::string blob_sidecar_path(const std::string& path) { return path + ".json"; }

inline void write_blob(const std::string& path, const Tensor<float>& t,
                       const std::string& channels = "", const std::string& units = "") {
    if (!t.all_finite()) throw Error(errc::nan_input, "write_blob: non-finite values in " + path);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(errc::io_error, "write_blob: cannot open " + path);
    f.write(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(float));
    if (!f) throw Error(errc::io_error, "write_blob: short write to " + path);
    f.close();

    nlohmann::json j;
    j["shape"] = t.shape;
    j["dtype"] = "float32";
    j["channels"] = channels;
    j["units"] = units;
    std::ofstream s(blob_sidecar_path(path), std::ios::trunc);
    if (!s) throw Error(errc::io_error, "write_blob: cannot open sidecar for " + path);
    s << j.dump(2) << "\n";
}

inline Tensor<float> read_blob(const std::string& path) {
    std::ifstream s(blob_sidecar_path(path));
    if (!s) throw Error(errc::io_error, "read_blob: missing sidecar for " + path);
    nlohmann::json j;
    try {
        s >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(errc::integrity, "read_blob: bad sidecar for " + path + ": " + e.what());
    }
    if (j.value("dtype", "") != "float32")
        throw Error(errc::integrity, "read_blob: unsupported dtype in " + path);
    std::vector<int> shape = j.at("shape").get<std::vector<int>>();
    long long n = 1;
    for (int d : shape) {
        if (d <= 0) throw Error(errc::integrity, "read_blob: non-positive dim in " + path);
        n *= d;
    }
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw Error(errc::io_error, "read_blob: cannot open " + path);
    long long bytes = static_cast<long long>(f.tellg());
    if (bytes != n * static_cast<long long>(sizeof(float)))
        throw Error(errc::integrity, "read_blob: byte length " + std::to_string(bytes) +
                                         " disagrees with shape in " + path);
    Tensor<float> t(shape);
    f.seekg(0);
    f.read(reinterpret_cast<char*>(t.data()), bytes);
    if (!f) throw Error(errc::io_error, "read_blob: short read from " + path);
    return t;
}

}  // namespace facet
