#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/pose.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/checkpoint.hpp"
#include "facet/io/dataset.hpp"
#include "facet/nn/adam.hpp"
#include "facet/vae/common.hpp"

namespace facet::vae {

// VAE over per-texel position maps, split into a pose-free shape code and a
// rigid-pose code. The decoder only ever sees the shape code; a small MLP
// turns the pose code into a quaternion + translation which is applied to
// the decoded map afterwards, so the rigid factorization is exact by
// construction. Training triplets pair two random rigid augmentations of one
// frame with the same augmentation of a nearby frame.

struct GeomConfig {
    int geom_res = 32;
    int base_ch = 8;
    int d_geom = 32;
    int d_pose = 8;
    int epochs = 200;
    double lr = 1e-3;
    double clip = 1.0;
    double w_rec = 1.0;
    double w_cyc = 0.1;
    double w_geo = 1.0;
    double w_pos = 1.0;
    double w_cro = 1.0;
    double beta = 1e-3;
    int temporal_window = 12;
    double aug_angle_deg = 15.0;
    double aug_trans_mm = 10.0;
    double map_scale = 0.01;  // mm -> network units
    bool pose_split = true;
    uint64_t seed = 7;

    nlohmann::json to_json() const {
        return {{"geom_res", geom_res},   {"base_ch", base_ch},
                {"d_geom", d_geom},       {"d_pose", d_pose},
                {"epochs", epochs},       {"lr", lr},
                {"clip", clip},           {"w_rec", w_rec},
                {"w_cyc", w_cyc},         {"w_geo", w_geo},
                {"w_pos", w_pos},         {"w_cro", w_cro},
                {"beta", beta},           {"temporal_window", temporal_window},
                {"aug_angle_deg", aug_angle_deg}, {"aug_trans_mm", aug_trans_mm},
                {"map_scale", map_scale}, {"pose_split", pose_split},
                {"seed", seed}};
    }
    static GeomConfig from_json(const nlohmann::json& j) {
        GeomConfig c;
        c.geom_res = j.value("geom_res", c.geom_res);
        c.base_ch = j.value("base_ch", c.base_ch);
        c.d_geom = j.value("d_geom", c.d_geom);
        c.d_pose = j.value("d_pose", c.d_pose);
        c.epochs = j.value("epochs", c.epochs);
        c.lr = j.value("lr", c.lr);
        c.clip = j.value("clip", c.clip);
        c.w_rec = j.value("w_rec", c.w_rec);
        c.w_cyc = j.value("w_cyc", c.w_cyc);
        c.w_geo = j.value("w_geo", c.w_geo);
        c.w_pos = j.value("w_pos", c.w_pos);
        c.w_cro = j.value("w_cro", c.w_cro);
        c.beta = j.value("beta", c.beta);
        c.temporal_window = j.value("temporal_window", c.temporal_window);
        c.aug_angle_deg = j.value("aug_angle_deg", c.aug_angle_deg);
        c.aug_trans_mm = j.value("aug_trans_mm", c.aug_trans_mm);
        c.map_scale = j.value("map_scale", c.map_scale);
        c.pose_split = j.value("pose_split", c.pose_split);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

// Rigidly moves every texel position (mm units).
inline Tensor<float> rigid_apply_map(const Tensor<float>& geom, const PoseTransform& pose) {
    if (geom.ndim() != 3 || geom.dim(0) != 3)
        throw Error(errc::shape_mismatch, "rigid_apply_map expects {3,H,W}");
    Tensor<float> out(geom.shape);
    long long hw = geom.numel() / 3;
    for (long long i = 0; i < hw; ++i) {
        Vec3 p{geom[i], geom[hw + i], geom[2 * hw + i]};
        Vec3 q = pose.apply(p);
        out[i] = static_cast<float>(q[0]);
        out[hw + i] = static_cast<float>(q[1]);
        out[2 * hw + i] = static_cast<float>(q[2]);
    }
    return out;
}

struct GeomAugment {
    Tensor<float> map;  // augmented positions, mm
    PoseTransform pose;
};

inline GeomAugment augment_geometry(const Tensor<float>& geom, Rng& rng,
                                    double max_angle_deg = 15.0, double max_trans_mm = 10.0) {
    double angle = rng.uniform(-max_angle_deg, max_angle_deg) * M_PI / 180.0;
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    if (norm(axis) < 1e-9) axis = Vec3{0, 0, 1};
    PoseTransform pose;
    pose.rot = Quat::from_axis_angle(normalized(axis), angle);
    pose.trans = Vec3{rng.uniform(-max_trans_mm, max_trans_mm),
                      rng.uniform(-max_trans_mm, max_trans_mm),
                      rng.uniform(-max_trans_mm, max_trans_mm)};
    return {rigid_apply_map(geom, pose), pose};
}

template <class T>
class GeometryVae {
public:
    GeometryVae(const GeomConfig& cfg, Rng& rng)
        : cfg_(cfg),
          trunk_("geom.enc", 3, cfg.base_ch, cfg.geom_res, rng),
          head_g_("geom.zg", trunk_.feature_dim(), cfg.d_geom, rng),
          head_p_("geom.zp", trunk_.feature_dim(), cfg.d_pose, rng),
          dec_("geom.dec", cfg.d_geom, 3, cfg.base_ch, cfg.geom_res, /*indicator=*/false, rng),
          pose_fc1_("geom.pose1", cfg.d_pose, 32, nn::Init::xavier, rng),
          pose_fc2_("geom.pose2", 32, 7, nn::Init::zero, rng) {}

    struct Enc {
        LatentDist<T> geom, pose;
    };

    // expects map_scale-normalized position maps
    Enc encode(const nn::Var<T>& geo) {
        auto feat = trunk_(geo);
        return {head_g_(feat), head_p_(feat)};
    }
    Enc encode(const Tensor<T>& geo) { return encode(nn::constant(geo.clone())); }

    struct PoseOut {
        nn::Var<T> q;      // unit quaternion {4}
        nn::Var<T> trans;  // {3}, normalized units
    };

    // Zero MLP output decodes to the identity transform.
    PoseOut pose_of(const nn::Var<T>& z_p) {
        using namespace nn;
        auto raw = pose_fc2_(tanh_op(pose_fc1_(z_p)));
        Tensor<T> unit = Tensor<T>::zeros({4});
        unit[0] = 1;
        auto q = quat_normalize(add(slice0(raw, 0, 4), constant(unit.clone())));
        return {q, slice0(raw, 4, 3)};
    }

    nn::Var<T> decode_posefree(const nn::Var<T>& z_g) { return dec_(z_g); }

    nn::Var<T> decode_full(const nn::Var<T>& z_g, const nn::Var<T>& z_p) {
        auto shape = decode_posefree(z_g);
        if (!cfg_.pose_split) return shape;
        auto p = pose_of(z_p);
        return nn::apply_rigid(shape, p.q, p.trans);
    }

    std::vector<nn::Parameter<T>*> params() {
        std::vector<nn::Parameter<T>*> ps;
        trunk_.collect(ps);
        head_g_.collect(ps);
        head_p_.collect(ps);
        dec_.collect(ps);
        pose_fc1_.collect(ps);
        pose_fc2_.collect(ps);
        return ps;
    }

    const GeomConfig& config() const { return cfg_; }

private:
    GeomConfig cfg_;
    ConvTrunk<T> trunk_;
    LatentHead<T> head_g_, head_p_;
    ConvDecoder<T> dec_;
    nn::LinearLayer<T> pose_fc1_, pose_fc2_;
};

template <class T>
struct GeomLosses {
    nn::Var<T> total, rec, cyc, geo, pos, cro, kl;
};

// Triplet members (all map_scale-normalized): anchor G(t) under augmentation
// a, G(t) under augmentation b, nearby G(s) under the same augmentation a.
template <class T>
GeomLosses<T> geom_triplet_loss(GeometryVae<T>& net, const Tensor<T>& g_ta,
                                const Tensor<T>& g_tb, const Tensor<T>& g_sa,
                                const GeomConfig& cfg, Rng* rng,
                                LatentMode mode = LatentMode::sample) {
    using namespace nn;
    auto e_ta = net.encode(g_ta);
    auto e_tb = net.encode(g_tb);
    auto e_sa = net.encode(g_sa);

    auto zg_ta = draw(e_ta.geom, mode, rng), zp_ta = draw(e_ta.pose, mode, rng);
    auto zg_tb = draw(e_tb.geom, mode, rng), zp_tb = draw(e_tb.pose, mode, rng);
    auto zg_sa = draw(e_sa.geom, mode, rng), zp_sa = draw(e_sa.pose, mode, rng);

    auto recon = net.decode_full(zg_ta, zp_ta);
    auto rec = mse_loss(recon, constant(g_ta.clone()));

    auto re = net.encode(recon);
    auto cyc = add(sum_sq_diff(zg_ta, re.geom.mu), sum_sq_diff(zp_ta, re.pose.mu));

    auto kl = wsum<T>({{1.0, kl_of(e_ta.geom)}, {1.0, kl_of(e_ta.pose)},
                       {1.0, kl_of(e_tb.geom)}, {1.0, kl_of(e_tb.pose)},
                       {1.0, kl_of(e_sa.geom)}, {1.0, kl_of(e_sa.pose)}});

    GeomLosses<T> out;
    out.rec = rec;
    out.cyc = cyc;
    out.kl = kl;
    if (cfg.pose_split) {
        out.geo = sum_sq_diff(zg_ta, zg_tb);
        out.pos = sum_sq_diff(zp_ta, zp_sa);
        auto cro_ta = mse_loss(net.decode_full(zg_tb, zp_sa), constant(g_ta.clone()));
        auto cro_tb = mse_loss(net.decode_full(zg_ta, zp_tb), constant(g_tb.clone()));
        auto cro_sa = mse_loss(net.decode_full(zg_sa, zp_ta), constant(g_sa.clone()));
        out.cro = add(add(cro_ta, cro_tb), cro_sa);
        out.total = wsum<T>({{cfg.w_rec, out.rec},
                             {cfg.w_cyc, out.cyc},
                             {cfg.w_geo, out.geo},
                             {cfg.w_pos, out.pos},
                             {cfg.w_cro, out.cro},
                             {cfg.beta, out.kl}});
    } else {
        out.geo = constant(Tensor<T>::zeros({1}));
        out.pos = constant(Tensor<T>::zeros({1}));
        out.cro = constant(Tensor<T>::zeros({1}));
        out.total = wsum<T>(
            {{cfg.w_rec, out.rec}, {cfg.w_cyc, out.cyc}, {cfg.beta, out.kl}});
    }
    return out;
}

// Materializes one training triplet around frame `t`: two fresh rigid
// augmentations of it plus a window-mate under the first augmentation.
// Returns false when no second frame lies within the temporal window.
struct GeomTriplet {
    Tensor<float> ta, tb, sa;
};

inline bool sample_geom_triplet(const Dataset& ds, const std::vector<int>& train, int t,
                                const GeomConfig& cfg, Rng& pick, Rng& augr, GeomTriplet& out) {
    std::vector<int> near;
    for (int c : train)
        if (c != t && std::abs(ds.frames[c].t - ds.frames[t].t) <= cfg.temporal_window)
            near.push_back(c);
    if (near.empty()) return false;
    int s = near[pick.uniform_int(static_cast<int>(near.size()))];
    auto aug_a = augment_geometry(ds.frames[t].geometry, augr, cfg.aug_angle_deg,
                                  cfg.aug_trans_mm);
    auto aug_b = augment_geometry(ds.frames[t].geometry, augr, cfg.aug_angle_deg,
                                  cfg.aug_trans_mm);
    out.ta = std::move(aug_a.map);
    out.tb = std::move(aug_b.map);
    out.sa = rigid_apply_map(ds.frames[s].geometry, aug_a.pose);
    return true;
}

template <class T>
Tensor<T> scale_map(const Tensor<float>& g, double s) {
    Tensor<T> out(g.shape);
    for (long long i = 0; i < g.numel(); ++i) out[i] = static_cast<T>(g[i] * s);
    return out;
}

template <class T>
void train_geometry(GeometryVae<T>& net, const Dataset& ds, const GeomConfig& cfg,
                    std::ostream* log = nullptr,
                      const std::function<void(int)>& on_epoch = {}) {
    std::vector<int> train;
    for (size_t i = 0; i < ds.frames.size(); ++i)
        if (!ds.frames[i].is_test) train.push_back(static_cast<int>(i));
    if (train.size() < 2) throw Error(errc::bad_args, "geometry training needs >= 2 frames");

    auto params = net.params();
    nn::Adam<T> opt;
    opt.lr = cfg.lr;
    opt.clip_norm = cfg.clip;
    Rng pick = Rng::stream(cfg.seed, "geom_triplets");
    Rng noise = Rng::stream(cfg.seed, "geom_noise");
    Rng augr = Rng::stream(cfg.seed, "geom_aug");

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double st = 0, sr = 0, sc = 0, sg = 0, sp = 0, sx = 0, sk = 0;
        for (size_t step = 0; step < train.size(); ++step) {
            int t = train[pick.uniform_int(static_cast<int>(train.size()))];
            GeomTriplet tri;
            if (!sample_geom_triplet(ds, train, t, cfg, pick, augr, tri)) continue;

            nn::zero_grads(params);
            auto losses = geom_triplet_loss(net, scale_map<T>(tri.ta, cfg.map_scale),
                                            scale_map<T>(tri.tb, cfg.map_scale),
                                            scale_map<T>(tri.sa, cfg.map_scale), cfg, &noise);
            if (!losses.total->val.all_finite())
                throw Error(errc::diverged, "geometry loss is not finite");
            nn::backward(losses.total);
            opt.step(params);
            st += losses.total->val[0];
            sr += losses.rec->val[0];
            sc += losses.cyc->val[0];
            sg += losses.geo->val[0];
            sp += losses.pos->val[0];
            sx += losses.cro->val[0];
            sk += losses.kl->val[0];
        }
        if (log) {
            double n = static_cast<double>(train.size());
            nlohmann::json line = {{"event", "epoch"}, {"model", "geometry"},
                                   {"epoch", epoch},   {"loss", st / n},
                                   {"rec", sr / n},    {"cyc", sc / n},
                                   {"geo", sg / n},    {"pose", sp / n},
                                   {"cross", sx / n},  {"kl", sk / n}};
            (*log) << line.dump() << "\n";
        }
        if (on_epoch) on_epoch(epoch);
    }
}

// Mean codes for a raw (mm) position map.
template <class T>
std::pair<Tensor<float>, Tensor<float>> geom_codes(GeometryVae<T>& net, const Tensor<float>& geo,
                                                   const GeomConfig& cfg) {
    Tensor<T> norm(geo.shape);
    for (long long i = 0; i < geo.numel(); ++i)
        norm[i] = static_cast<T>(geo[i] * cfg.map_scale);
    auto e = net.encode(norm);
    return {e.geom.mu->val.template cast<float>(), e.pose.mu->val.template cast<float>()};
}

// Pose-free decode of a shape code back to a raw (mm) position map.
template <class T>
Tensor<float> decode_geometry(GeometryVae<T>& net, const Tensor<float>& z_g,
                              const GeomConfig& cfg) {
    auto out = net.decode_posefree(nn::constant(z_g.template cast<T>()));
    Tensor<float> mm = out->val.template cast<float>();
    for (long long i = 0; i < mm.numel(); ++i)
        mm[i] = static_cast<float>(mm[i] / cfg.map_scale);
    return mm;
}

template <class T>
void save_geometry(const std::string& dir, GeometryVae<T>& net, const GeomConfig& cfg,
                   const std::string& stage_tag) {
    static_assert(std::is_same_v<T, float>, "checkpoints are float32");
    auto ps = net.params();
    save_checkpoint_dir(dir, ps,
                        {{"kind", "geometry_vae"}, {"stage", stage_tag},
                         {"config", cfg.to_json()}});
}

inline GeomConfig load_geometry_config(const std::string& dir) {
    nlohmann::json meta = load_meta(dir);
    if (meta.value("kind", "") != "geometry_vae")
        throw Error(errc::checkpoint_mismatch, "checkpoint is not a geometry vae");
    return GeomConfig::from_json(meta.at("config"));
}

inline void load_geometry(const std::string& dir, GeometryVae<float>& net) {
    auto ps = net.params();
    load_weights(dir + "/weights.bin", ps);
}

}  // namespace facet::vae
