#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/pose.hpp"
#include "facet/core/sha256.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/blob.hpp"
#include "facet/io/png_io.hpp"

namespace facet {

// One captured frame: per-view images plus UV-space assets. `gt` carries the
// generator's exact factors; ingested (real-footage style) records have
// has_gt = false and indicator = 1.
struct GroundTruth {
    std::vector<float> expr;
    PoseTransform pose;
    int frame_index = 0;
};

struct Frame {
    int t = 0;
    std::vector<Tensor<float>> images;      // per view, {3, image_res, image_res}
    Tensor<float> geometry;                 // {3, R_g, R_g} posed positions, mm
    Tensor<float> diffuse, specular, normal;  // {3|1|3, tex, tex}
    Tensor<float> jitter;                   // {2, tex, tex} corrective flow, px
    GroundTruth gt;
    bool has_gt = true;
    int indicator = 0;
    bool is_test = false;
};

struct Dataset {
    std::string performer_id;
    nlohmann::json config_echo;
    int num_views = 0;
    std::vector<double> view_yaws_deg;
    Tensor<float> neutral_diffuse, neutral_specular, neutral_normal;  // clean references
    Tensor<float> neutral_geometry;                                   // unposed {3,R,R}
    std::vector<Frame> frames;

    std::vector<int> split_indices(bool test) const {
        std::vector<int> out;
        for (const auto& f : frames)
            if (f.is_test == test) out.push_back(f.t);
        return out;
    }
};

namespace detail {
inline std::string hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(errc::io_error, "hash_file: cannot open " + path);
    Sha256 h;
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof(buf));
        h.update(buf, static_cast<size_t>(f.gcount()));
    }
    return h.hex_digest();
}

inline nlohmann::json pose_json(const PoseTransform& p) {
    return {{"quat", {p.rot.w, p.rot.x, p.rot.y, p.rot.z}},
            {"trans", {p.trans[0], p.trans[1], p.trans[2]}}};
}

inline PoseTransform pose_from_json(const nlohmann::json& j) {
    auto q = j.at("quat");
    auto t = j.at("trans");
    PoseTransform p;
    p.rot = Quat{q[0].get<double>(), q[1].get<double>(), q[2].get<double>(), q[3].get<double>()}
                .normalized_q();
    p.trans = Vec3{t[0].get<double>(), t[1].get<double>(), t[2].get<double>()};
    return p;
}
}  // namespace detail

// Writes dataset/<performer>/: manifest.json, neutral/, frames/<t>/. Every
// written file is hashed into the manifest so corruption and regeneration
// drift are detectable.
inline void write_dataset(const Dataset& ds, const std::string& root) {
    namespace fs = std::filesystem;
    std::string base = root + "/" + ds.performer_id;
    fs::create_directories(base + "/neutral");

    std::vector<std::pair<std::string, std::string>> files;  // rel path, hash
    auto put_blob = [&](const std::string& rel, const Tensor<float>& t,
                        const std::string& channels, const std::string& units) {
        write_blob(base + "/" + rel, t, channels, units);
        files.emplace_back(rel, detail::hash_file(base + "/" + rel));
    };

    put_blob("neutral/diffuse.blob", ds.neutral_diffuse, "rgb", "unit");
    put_blob("neutral/specular.blob", ds.neutral_specular, "intensity", "unit");
    put_blob("neutral/normal.blob", ds.neutral_normal, "xyz_encoded", "unit");
    put_blob("neutral/geom.blob", ds.neutral_geometry, "xyz", "mm");

    nlohmann::json jframes = nlohmann::json::array();
    for (const auto& f : ds.frames) {
        std::string fdir = "frames/" + std::to_string(f.t);
        fs::create_directories(base + "/" + fdir);
        for (size_t i = 0; i < f.images.size(); ++i) {
            std::string rel = fdir + "/" + std::to_string(i) + ".png";
            write_png16(base + "/" + rel, f.images[i]);
            files.emplace_back(rel, detail::hash_file(base + "/" + rel));
        }
        put_blob(fdir + "/geom.blob", f.geometry, "xyz", "mm");
        put_blob(fdir + "/tex_diffuse.blob", f.diffuse, "rgb", "unit");
        put_blob(fdir + "/tex_specular.blob", f.specular, "intensity", "unit");
        put_blob(fdir + "/tex_normal.blob", f.normal, "xyz_encoded", "unit");
        put_blob(fdir + "/jitter.blob", f.jitter, "flow_xy", "px");

        nlohmann::json gt;
        if (f.has_gt)
            gt = {{"expr", f.gt.expr},
                  {"pose", detail::pose_json(f.gt.pose)},
                  {"frame_index", f.gt.frame_index}};
        std::string grel = fdir + "/gt.json";
        {
            std::ofstream g(base + "/" + grel, std::ios::trunc);
            g << gt.dump(2) << "\n";
        }
        files.emplace_back(grel, detail::hash_file(base + "/" + grel));

        jframes.push_back({{"t", f.t},
                           {"views", static_cast<int>(f.images.size())},
                           {"split", f.is_test ? "test" : "train"},
                           {"indicator", f.indicator}});
    }

    nlohmann::json manifest;
    manifest["schema_version"] = 1;
    manifest["performer_id"] = ds.performer_id;
    manifest["config"] = ds.config_echo;
    manifest["view_yaws_deg"] = ds.view_yaws_deg;
    manifest["frames"] = jframes;
    nlohmann::json jfiles = nlohmann::json::array();
    for (const auto& [rel, hash] : files) jfiles.push_back({{"path", rel}, {"sha256", hash}});
    manifest["files"] = jfiles;
    std::ofstream m(base + "/manifest.json", std::ios::trunc);
    if (!m) throw Error(errc::io_error, "write_dataset: cannot write manifest in " + base);
    m << manifest.dump(2) << "\n";
}

// Loads a dataset directory; with verify_hashes every referenced file must
// exist and hash-match.
inline Dataset load_dataset(const std::string& dir, bool verify_hashes = true) {
    std::ifstream m(dir + "/manifest.json");
    if (!m) throw Error(errc::io_error, "load_dataset: missing manifest in " + dir);
    nlohmann::json manifest;
    try {
        m >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw Error(errc::integrity, std::string("load_dataset: bad manifest: ") + e.what());
    }

    if (verify_hashes)
        for (const auto& f : manifest.at("files")) {
            std::string rel = f.at("path");
            std::string want = f.at("sha256");
            std::string got = detail::hash_file(dir + "/" + rel);
            if (got != want)
                throw Error(errc::integrity, "load_dataset: hash mismatch on " + rel);
        }

    Dataset ds;
    ds.performer_id = manifest.at("performer_id");
    ds.config_echo = manifest.at("config");
    ds.view_yaws_deg = manifest.at("view_yaws_deg").get<std::vector<double>>();
    ds.num_views = static_cast<int>(ds.view_yaws_deg.size());
    ds.neutral_diffuse = read_blob(dir + "/neutral/diffuse.blob");
    ds.neutral_specular = read_blob(dir + "/neutral/specular.blob");
    ds.neutral_normal = read_blob(dir + "/neutral/normal.blob");
    ds.neutral_geometry = read_blob(dir + "/neutral/geom.blob");

    for (const auto& jf : manifest.at("frames")) {
        Frame f;
        f.t = jf.at("t");
        f.is_test = jf.at("split") == "test";
        f.indicator = jf.at("indicator");
        std::string fdir = dir + "/frames/" + std::to_string(f.t);
        int views = jf.at("views");
        for (int i = 0; i < views; ++i)
            f.images.push_back(read_png16(fdir + "/" + std::to_string(i) + ".png"));
        f.geometry = read_blob(fdir + "/geom.blob");
        f.diffuse = read_blob(fdir + "/tex_diffuse.blob");
        f.specular = read_blob(fdir + "/tex_specular.blob");
        f.normal = read_blob(fdir + "/tex_normal.blob");
        f.jitter = read_blob(fdir + "/jitter.blob");
        std::ifstream g(fdir + "/gt.json");
        nlohmann::json gt;
        g >> gt;
        if (gt.is_null()) {
            f.has_gt = false;
        } else {
            f.gt.expr = gt.at("expr").get<std::vector<float>>();
            f.gt.pose = detail::pose_from_json(gt.at("pose"));
            f.gt.frame_index = gt.at("frame_index");
        }
        ds.frames.push_back(std::move(f));
    }
    return ds;
}

// Exact generator factors for frame t (not an estimate).
inline const GroundTruth& ground_truth(const Dataset& ds, int t) {
    for (const auto& f : ds.frames)
        if (f.t == t) {
            if (!f.has_gt) throw Error(errc::bad_args, "ground_truth: ingested frame has none");
            return f.gt;
        }
    throw Error(errc::bounds, "ground_truth: frame index out of range");
}

}  // namespace facet
