#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/rng.hpp"
#include "facet/io/checkpoint.hpp"
#include "facet/io/dataset.hpp"
#include "facet/map/mapping.hpp"
#include "facet/nn/adam.hpp"
#include "facet/vae/expression.hpp"
#include "facet/vae/geometry.hpp"
#include "facet/vae/texture.hpp"

namespace facet::train {

// Stage progression of a model bundle. Inference requires `finetune` or
// later; retargeting appends its own tag.
inline constexpr const char* kStageVaes = "vae_pretrain";
inline constexpr const char* kStageMapping = "mapping";
inline constexpr const char* kStageFinetune = "finetune";
inline constexpr const char* kStageRetargeted = "retargeted";

inline int stage_rank(const std::string& s) {
    if (s == kStageVaes) return 1;
    if (s == kStageMapping) return 2;
    if (s == kStageFinetune) return 3;
    if (s == kStageRetargeted) return 4;
    return 0;
}

struct TrainConfig {
    vae::ExprConfig expr;
    vae::GeomConfig geom;
    vae::TexConfig tex;
    map::MapConfig map;
    int joint_epochs = 100;
    double joint_lr = 1e-4;
    double joint_clip = 1.0;
    double w_joint_geom = 1.0;
    double w_joint_tex = 1.0;
    double w_joint_map = 1.0;
    uint64_t seed = 7;

    // one --seed drives every stage; latent dims must agree across modules
    void finalize() {
        expr.seed = geom.seed = tex.seed = map.seed = seed;
        map.d_expr = expr.d_expr;
        map.d_geom = geom.d_geom;
        map.d_tex = tex.d_tex;
    }

    nlohmann::json to_json() const {
        return {{"expr", expr.to_json()},
                {"geom", geom.to_json()},
                {"tex", tex.to_json()},
                {"map", map.to_json()},
                {"joint_epochs", joint_epochs},
                {"joint_lr", joint_lr},
                {"joint_clip", joint_clip},
                {"w_joint_geom", w_joint_geom},
                {"w_joint_tex", w_joint_tex},
                {"w_joint_map", w_joint_map},
                {"seed", seed}};
    }
    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        if (j.contains("expr")) c.expr = vae::ExprConfig::from_json(j.at("expr"));
        if (j.contains("geom")) c.geom = vae::GeomConfig::from_json(j.at("geom"));
        if (j.contains("tex")) c.tex = vae::TexConfig::from_json(j.at("tex"));
        if (j.contains("map")) c.map = map::MapConfig::from_json(j.at("map"));
        c.joint_epochs = j.value("joint_epochs", c.joint_epochs);
        c.joint_lr = j.value("joint_lr", c.joint_lr);
        c.joint_clip = j.value("joint_clip", c.joint_clip);
        c.w_joint_geom = j.value("w_joint_geom", c.w_joint_geom);
        c.w_joint_tex = j.value("w_joint_tex", c.w_joint_tex);
        c.w_joint_map = j.value("w_joint_map", c.w_joint_map);
        c.seed = j.value("seed", c.seed);
        c.finalize();
        return c;
    }
};

struct Bundle {
    TrainConfig cfg;
    std::string stage;
    std::unique_ptr<vae::ExpressionVae<float>> expr;
    std::unique_ptr<vae::GeometryVae<float>> geom;
    std::unique_ptr<vae::TextureVae<float>> tex;
    std::unique_ptr<map::LatentMap<float>> map;
};

inline Bundle make_bundle(TrainConfig cfg) {
    cfg.finalize();
    Bundle b;
    b.cfg = cfg;
    b.stage = "";
    Rng re = Rng::stream(cfg.seed, "init_expr");
    Rng rg = Rng::stream(cfg.seed, "init_geom");
    Rng rt = Rng::stream(cfg.seed, "init_tex");
    Rng rm = Rng::stream(cfg.seed, "init_map");
    b.expr = std::make_unique<vae::ExpressionVae<float>>(cfg.expr, re);
    b.geom = std::make_unique<vae::GeometryVae<float>>(cfg.geom, rg);
    b.tex = std::make_unique<vae::TextureVae<float>>(cfg.tex, rt);
    b.map = std::make_unique<map::LatentMap<float>>(cfg.map, rm);
    return b;
}

inline void save_bundle(const std::string& dir, Bundle& b) {
    std::filesystem::create_directories(dir);
    vae::save_expression(dir + "/expression", *b.expr, b.cfg.expr, b.stage);
    vae::save_geometry(dir + "/geometry", *b.geom, b.cfg.geom, b.stage);
    vae::save_texture(dir + "/texture", *b.tex, b.cfg.tex, b.stage);
    map::save_mapping(dir + "/mapping", *b.map, b.cfg.map, b.stage);
    nlohmann::json meta = {{"kind", "bundle"}, {"stage", b.stage}, {"config", b.cfg.to_json()}};
    std::ofstream f(dir + "/meta.json");
    f << meta.dump(2) << "\n";
    if (!f) throw Error(errc::io_error, "cannot write bundle meta to " + dir);
}

inline Bundle load_bundle(const std::string& dir) {
    std::ifstream f(dir + "/meta.json");
    if (!f) throw Error(errc::io_error, "cannot read bundle meta from " + dir);
    nlohmann::json meta = nlohmann::json::parse(f);
    if (meta.value("kind", "") != "bundle")
        throw Error(errc::checkpoint_mismatch, dir + " is not a model bundle");
    Bundle b = make_bundle(TrainConfig::from_json(meta.at("config")));
    b.stage = meta.value("stage", "");
    vae::load_expression(dir + "/expression", *b.expr);
    vae::load_geometry(dir + "/geometry", *b.geom);
    vae::load_texture(dir + "/texture", *b.tex);
    map::load_mapping(dir + "/mapping", *b.map);
    return b;
}

inline void check_dataset_compat(const Dataset& ds, const TrainConfig& cfg) {
    if (ds.frames.empty()) throw Error(errc::bad_args, "dataset has no frames");
    const Frame& f = ds.frames.front();
    if (f.images.empty() || f.images[0].dim(1) != cfg.expr.image_res)
        throw Error(errc::bad_args, "dataset image resolution does not match the config");
    if (f.geometry.dim(1) != cfg.geom.geom_res)
        throw Error(errc::bad_args, "dataset geometry resolution does not match the config");
    if (f.diffuse.dim(1) < cfg.tex.work_res || f.diffuse.dim(1) % cfg.tex.work_res != 0)
        throw Error(errc::bad_args,
                    "dataset texture resolution must be a multiple of the working one");
}

namespace detail {

// Runs `body(on_epoch)`; if it throws DIVERGED, parameters are rolled back
// to the end of the last completed epoch before rethrowing, so what remains
// in memory (and is subsequently saved) is the last healthy state.
template <class Body>
void run_guarded(const std::vector<nn::Parameter<float>*>& params, Body body) {
    std::vector<Tensor<float>> snap;
    snap.reserve(params.size());
    for (auto* p : params) snap.push_back(p->value.clone());
    try {
        body([&](int) {
            for (size_t i = 0; i < params.size(); ++i) snap[i] = params[i]->value.clone();
        });
    } catch (const Error& e) {
        if (e.code() == errc::diverged)
            for (size_t i = 0; i < params.size(); ++i) params[i]->value = snap[i].clone();
        throw;
    }
}

}  // namespace detail

inline void run_stage_vaes(Bundle& b, const Dataset& ds, std::ostream* log = nullptr) {
    check_dataset_compat(ds, b.cfg);
    detail::run_guarded(b.expr->params(), [&](const std::function<void(int)>& tick) {
        train_expression(*b.expr, ds, b.cfg.expr, log, tick);
    });
    detail::run_guarded(b.geom->params(), [&](const std::function<void(int)>& tick) {
        train_geometry(*b.geom, ds, b.cfg.geom, log, tick);
    });
    detail::run_guarded(b.tex->params(), [&](const std::function<void(int)>& tick) {
        train_texture(*b.tex, ds, b.cfg.tex, log, tick);
    });
    b.stage = kStageVaes;
}

// Frozen-encoder regression targets for the mapping: one sample per train
// frame and view.
struct MapSample {
    Tensor<float> z_e, z_g, z_t;
};

inline std::vector<MapSample> mapping_samples(Bundle& b, const Dataset& ds) {
    std::vector<MapSample> out;
    for (const auto& f : ds.frames) {
        if (f.is_test) continue;
        auto [zg, zp] = vae::geom_codes(*b.geom, f.geometry, b.cfg.geom);
        Tensor<float> zt = vae::tex_code(*b.tex, vae::frame_stack(f, b.cfg.tex));
        for (const auto& img : f.images) {
            auto [ze, zv] = vae::expr_codes(*b.expr, img);
            out.push_back({ze, zg.clone(), zt.clone()});
        }
    }
    if (out.empty()) throw Error(errc::bad_args, "no mapping samples in the train split");
    return out;
}

inline void run_stage_mapping(Bundle& b, const Dataset& ds, std::ostream* log = nullptr) {
    if (stage_rank(b.stage) < 1)
        throw Error(errc::stage_too_early, "mapping stage requires pretrained vaes");
    auto samples = mapping_samples(b, ds);
    auto params = b.map->params();
    nn::Adam<float> opt;
    opt.lr = b.cfg.map.lr;
    opt.clip_norm = b.cfg.map.clip;
    Rng order = Rng::stream(b.cfg.seed, "map_order");

    detail::run_guarded(params, [&](const std::function<void(int)>& tick) {
        std::vector<int> idx(samples.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        for (int epoch = 0; epoch < b.cfg.map.epochs; ++epoch) {
            for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
                std::swap(idx[i], idx[order.uniform_int(i + 1)]);
            double sum = 0;
            for (int i : idx) {
                nn::zero_grads(params);
                auto l = map::map_loss(*b.map, nn::constant(samples[i].z_e.clone()),
                                       nn::constant(samples[i].z_g.clone()),
                                       nn::constant(samples[i].z_t.clone()));
                if (!l->val.all_finite())
                    throw Error(errc::diverged, "mapping loss is not finite");
                nn::backward(l);
                opt.step(params);
                sum += l->val[0];
            }
            if (log) {
                nlohmann::json line = {{"event", "epoch"},
                                       {"model", "mapping"},
                                       {"epoch", epoch},
                                       {"loss", sum / static_cast<double>(idx.size())}};
                (*log) << line.dump() << "\n";
            }
            tick(epoch);
        }
    });
    b.stage = kStageMapping;
}

// Joint refinement: geometry + texture VAEs and the mapping train together
// while the expression model stays locked. The mapping loss backpropagates
// into the geometry/texture encoders, pulling their code spaces toward what
// the expression code can predict.
inline void run_stage_joint(Bundle& b, const Dataset& ds, std::ostream* log = nullptr) {
    if (stage_rank(b.stage) < 2)
        throw Error(errc::stage_too_early, "joint stage requires a trained mapping");
    check_dataset_compat(ds, b.cfg);

    std::vector<int> train;
    for (size_t i = 0; i < ds.frames.size(); ++i)
        if (!ds.frames[i].is_test) train.push_back(static_cast<int>(i));
    if (train.size() < 2) throw Error(errc::bad_args, "joint stage needs >= 2 train frames");

    // expression codes are fixed inputs here; precompute every (frame, view)
    std::vector<std::vector<Tensor<float>>> ze(ds.frames.size());
    for (int t : train) {
        ze[t].reserve(ds.frames[t].images.size());
        for (const auto& img : ds.frames[t].images)
            ze[t].push_back(vae::expr_codes(*b.expr, img).first);
    }

    std::vector<nn::Parameter<float>*> params;
    for (auto* p : b.geom->params()) params.push_back(p);
    for (auto* p : b.tex->params()) params.push_back(p);
    for (auto* p : b.map->params()) params.push_back(p);

    nn::Adam<float> opt;
    opt.lr = b.cfg.joint_lr;
    opt.clip_norm = b.cfg.joint_clip;
    Rng pick = Rng::stream(b.cfg.seed, "joint_pick");
    Rng augr = Rng::stream(b.cfg.seed, "joint_aug");
    Rng noise = Rng::stream(b.cfg.seed, "joint_noise");
    Tensor<float> neutral_tex = vae::neutral_stack(ds, b.cfg.tex);

    detail::run_guarded(params, [&](const std::function<void(int)>& tick) {
        for (int epoch = 0; epoch < b.cfg.joint_epochs; ++epoch) {
            double sg = 0, st = 0, sm = 0, sn = 0;
            for (size_t step = 0; step < train.size(); ++step) {
                int t = train[pick.uniform_int(static_cast<int>(train.size()))];
                int view = pick.uniform_int(static_cast<int>(ze[t].size()));
                vae::GeomTriplet tri;
                if (!vae::sample_geom_triplet(ds, train, t, b.cfg.geom, pick, augr, tri))
                    continue;

                nn::zero_grads(params);
                auto lg = vae::geom_triplet_loss(
                    *b.geom, vae::scale_map<float>(tri.ta, b.cfg.geom.map_scale),
                    vae::scale_map<float>(tri.tb, b.cfg.geom.map_scale),
                    vae::scale_map<float>(tri.sa, b.cfg.geom.map_scale), b.cfg.geom, &noise);
                auto stack = vae::frame_stack(ds.frames[t], b.cfg.tex);
                auto lt = vae::tex_frame_loss(*b.tex, stack, neutral_tex, b.cfg.tex, &noise);

                // live targets: gradients reach the geometry/texture encoders
                auto zg_mu =
                    b.geom
                        ->encode(vae::scale_map<float>(ds.frames[t].geometry,
                                                       b.cfg.geom.map_scale))
                        .geom.mu;
                auto zt_mu = b.tex->encode(stack).mu;
                auto lm = map::map_loss(*b.map, nn::constant(ze[t][view].clone()), zg_mu, zt_mu);

                auto total = nn::wsum<float>({{b.cfg.w_joint_geom, lg.total},
                                              {b.cfg.w_joint_tex, lt.total},
                                              {b.cfg.w_joint_map, lm}});
                if (!total->val.all_finite())
                    throw Error(errc::diverged, "joint loss is not finite");
                nn::backward(total);
                opt.step(params);
                sg += lg.total->val[0];
                st += lt.total->val[0];
                sm += lm->val[0];
                sn += total->val[0];
            }
            if (log) {
                double n = static_cast<double>(train.size());
                nlohmann::json line = {{"event", "epoch"}, {"model", "joint"},
                                       {"epoch", epoch},   {"loss", sn / n},
                                       {"geom", sg / n},   {"tex", st / n},
                                       {"map", sm / n}};
                (*log) << line.dump() << "\n";
            }
            tick(epoch);
        }
    });
    b.stage = kStageFinetune;
}

// Runs the requested stages in order, writing the bundle after each one. On
// divergence the last healthy parameters are saved before the error leaves.
inline void run_training(Bundle& b, const Dataset& ds, const std::string& stages,
                         const std::string& out_dir, std::ostream* log = nullptr) {
    auto wants = [&](char c) { return stages == "all" || stages.find(c) != std::string::npos; };
    if (!(stages == "all" || stages == "A" || stages == "B" || stages == "C"))
        throw Error(errc::bad_args, "stage must be one of all|A|B|C");
    try {
        if (wants('A')) {
            run_stage_vaes(b, ds, log);
            save_bundle(out_dir, b);
        }
        if (wants('B')) {
            run_stage_mapping(b, ds, log);
            save_bundle(out_dir, b);
        }
        if (wants('C')) {
            run_stage_joint(b, ds, log);
            save_bundle(out_dir, b);
        }
    } catch (const Error& e) {
        if (e.code() == errc::diverged) save_bundle(out_dir, b);
        throw;
    }
}

}  // namespace facet::train
