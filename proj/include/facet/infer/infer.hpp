#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/blob.hpp"
#include "facet/io/dataset.hpp"
#include "facet/io/png_io.hpp"
#include "facet/train/train.hpp"
#include "facet/vae/texture.hpp"

namespace facet::infer {

// Character pack: the neutral assets the decoded deltas are applied to.
// Layout mirrors a dataset's neutral/ directory so one can be used directly.
struct CharacterPack {
    std::string name;
    Tensor<float> diffuse, specular, normal;  // full-resolution neutral textures
    Tensor<float> geometry;                   // neutral positions, mm
};

inline CharacterPack load_character_pack(const std::string& dir) {
    namespace fs = std::filesystem;
    std::string base = dir;
    if (fs::exists(dir + "/neutral/diffuse.blob")) base = dir + "/neutral";
    if (!fs::exists(base + "/diffuse.blob"))
        throw Error(errc::io_error, "character pack not found under " + dir);
    CharacterPack p;
    p.name = fs::path(dir).filename().string();
    p.diffuse = read_blob(base + "/diffuse.blob");
    p.specular = read_blob(base + "/specular.blob");
    p.normal = read_blob(base + "/normal.blob");
    p.geometry = read_blob(base + "/geom.blob");
    return p;
}

inline void save_character_pack(const std::string& dir, const CharacterPack& p) {
    std::filesystem::create_directories(dir);
    write_blob(dir + "/diffuse.blob", p.diffuse, "rgb", "unit");
    write_blob(dir + "/specular.blob", p.specular, "intensity", "unit");
    write_blob(dir + "/normal.blob", p.normal, "xyz_encoded", "unit");
    write_blob(dir + "/geom.blob", p.geometry, "xyz", "mm");
}

// One driven frame's outputs plus the codes that produced them.
struct FacialAsset {
    Tensor<float> geometry;      // pose-free positions, mm {3,Rg,Rg}
    vae::TextureSet textures;    // composed at the pack's resolution
    Tensor<float> z_expr, z_geom, z_tex;
    Tensor<float> wrinkle_field;  // raw decoder output at working res
};

// Optional artist edits, stored as additive offsets on the decoded outputs.
struct EditOffsets {
    Tensor<float> geometry;  // {3,Rg,Rg} mm, may be empty
    Tensor<float> diffuse;   // {3,Rt,Rt}, may be empty
};

inline void require_ready(const train::Bundle& b) {
    if (train::stage_rank(b.stage) < 3)
        throw Error(errc::stage_too_early,
                    "bundle stage '" + b.stage + "' cannot drive inference; finish training");
}

// image -> expression code -> mapped asset codes -> decoded assets,
// all through latent means.
inline FacialAsset drive(train::Bundle& b, const Tensor<float>& image,
                         const CharacterPack& pack, const EditOffsets* edits = nullptr) {
    require_ready(b);
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != b.cfg.expr.image_res)
        throw Error(errc::shape_mismatch, "driver image must be rgb at the trained resolution");

    FacialAsset a;
    auto [ze, zv] = vae::expr_codes(*b.expr, image);
    a.z_expr = std::move(ze);
    auto [zg, zt] = b.map->apply(a.z_expr);
    a.z_geom = std::move(zg);
    a.z_tex = std::move(zt);

    a.geometry = vae::decode_geometry(*b.geom, a.z_geom, b.cfg.geom);
    a.wrinkle_field = vae::decode_texture_field(*b.tex, a.z_tex);
    if (b.cfg.tex.wrinkle_deltas)
        a.textures = vae::compose_texture({pack.diffuse, pack.specular, pack.normal},
                                          a.wrinkle_field);
    else
        a.textures = vae::upsample_stack_naive(a.wrinkle_field, pack.diffuse.dim(1));

    if (edits) {
        if (edits->geometry.numel()) {
            if (!edits->geometry.same_shape(a.geometry))
                throw Error(errc::shape_mismatch, "geometry offset shape mismatch");
            for (long long i = 0; i < a.geometry.numel(); ++i)
                a.geometry[i] += edits->geometry[i];
        }
        if (edits->diffuse.numel()) {
            if (!edits->diffuse.same_shape(a.textures.diffuse))
                throw Error(errc::shape_mismatch, "diffuse offset shape mismatch");
            for (long long i = 0; i < a.textures.diffuse.numel(); ++i)
                a.textures.diffuse[i] =
                    std::clamp(a.textures.diffuse[i] + edits->diffuse[i], 0.0f, 1.0f);
        }
    }
    return a;
}

// An edit session: the offset is whatever the artist changed relative to the
// decoded output, so re-applying it tracks future decodes of other frames.
inline Tensor<float> geometry_offset(const Tensor<float>& decoded, const Tensor<float>& edited) {
    if (!decoded.same_shape(edited))
        throw Error(errc::shape_mismatch, "edited geometry must match the decoded shape");
    Tensor<float> off(decoded.shape);
    for (long long i = 0; i < off.numel(); ++i) off[i] = edited[i] - decoded[i];
    return off;
}

inline Tensor<float> diffuse_offset(const Tensor<float>& decoded, const Tensor<float>& edited) {
    return geometry_offset(decoded, edited);
}

inline void save_asset(const std::string& dir, const FacialAsset& a) {
    std::filesystem::create_directories(dir);
    write_blob(dir + "/geometry.blob", a.geometry, "xyz", "mm");
    write_blob(dir + "/diffuse.blob", a.textures.diffuse, "rgb", "unit");
    write_blob(dir + "/specular.blob", a.textures.specular, "intensity", "unit");
    write_blob(dir + "/normal.blob", a.textures.normal, "xyz_encoded", "unit");
    write_blob(dir + "/wrinkle.blob", a.wrinkle_field, "texture_delta", "unit");
    write_png16(dir + "/diffuse.png", a.textures.diffuse);
    write_png16(dir + "/specular.png", a.textures.specular);
    write_png16(dir + "/normal.png", a.textures.normal);
    nlohmann::json codes = {
        {"z_expr", std::vector<float>(a.z_expr.data(), a.z_expr.data() + a.z_expr.numel())},
        {"z_geom", std::vector<float>(a.z_geom.data(), a.z_geom.data() + a.z_geom.numel())},
        {"z_tex", std::vector<float>(a.z_tex.data(), a.z_tex.data() + a.z_tex.numel())}};
    std::ofstream f(dir + "/asset.json");
    f << codes.dump(2) << "\n";
    if (!f) throw Error(errc::io_error, "cannot write asset meta in " + dir);
}

// Position-map -> OBJ: one vertex per texel with grid UVs, two triangles per
// texel quad. Millimeter positions are kept as-is.
inline void export_mesh_obj(const Tensor<float>& geometry, const std::string& path) {
    if (geometry.ndim() != 3 || geometry.dim(0) != 3)
        throw Error(errc::shape_mismatch, "mesh export expects a {3,H,W} position map");
    int h = geometry.dim(1), w = geometry.dim(2);
    if (h < 2 || w < 2) throw Error(errc::bad_args, "mesh export needs at least 2x2 texels");
    long long hw = static_cast<long long>(h) * w;
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error(errc::io_error, "cannot open " + path);
    f << "# position-map grid mesh " << w << "x" << h << "\n";
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            long long i = static_cast<long long>(y) * w + x;
            f << "v " << geometry[i] << " " << geometry[hw + i] << " " << geometry[2 * hw + i]
              << "\n";
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            f << "vt " << (w > 1 ? static_cast<double>(x) / (w - 1) : 0.0) << " "
              << (h > 1 ? static_cast<double>(y) / (h - 1) : 0.0) << "\n";
    auto vid = [w](int y, int x) { return y * w + x + 1; };  // obj indices are 1-based
    for (int y = 0; y + 1 < h; ++y)
        for (int x = 0; x + 1 < w; ++x) {
            int a = vid(y, x), bq = vid(y, x + 1), c = vid(y + 1, x), d = vid(y + 1, x + 1);
            f << "f " << a << "/" << a << " " << bq << "/" << bq << " " << d << "/" << d << "\n";
            f << "f " << a << "/" << a << " " << d << "/" << d << " " << c << "/" << c << "\n";
        }
    if (!f) throw Error(errc::io_error, "short write to " + path);
}

}  // namespace facet::infer
