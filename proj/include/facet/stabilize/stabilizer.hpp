#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/image_ops.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/checkpoint.hpp"
#include "facet/io/dataset.hpp"
#include "facet/nn/adam.hpp"
#include "facet/nn/layers.hpp"
#include "facet/nn/ops.hpp"

namespace facet::stab {

// Temporal texture stabilization. A small U-net looks at a raw (jittered)
// texture next to the neutral reference and predicts
//   - a corrective flow field F {2,R,R}: resampling the raw texture by F
//     should recover the registration-clean texture, and
//   - a multiplicative wrinkle map W {1,R,R} in [0,1] such that W * neutral
//     approximates the clean texture's shading.
// Training is self-supervised on consecutive frames:
//   fidelity   mean |warp(T_t, F_t) - W_t * N|
//   temporal   mean |W_t - W_{t+1}|      (appearance must change slowly)
//   smallness  rms(F_t) + rms(grad F_t)  (prefer no displacement)
// The temporal term is what stops W from absorbing per-frame jitter as fake
// shading: jitter decorrelates frame to frame, wrinkles do not.

struct StabConfig {
    int tex_res = 64;
    int base_ch = 8;
    int epochs = 40;
    double lr = 2e-3;
    double clip = 1.0;
    double w_fid = 1.0;
    double w_tem = 0.5;
    double w_dis = 0.01;  // strong enough to kill drift, weak enough to chase px-scale jitter
    uint64_t seed = 7;

    nlohmann::json to_json() const {
        return {{"tex_res", tex_res}, {"base_ch", base_ch}, {"epochs", epochs},
                {"lr", lr},           {"clip", clip},       {"w_fid", w_fid},
                {"w_tem", w_tem},     {"w_dis", w_dis},     {"seed", seed}};
    }
    static StabConfig from_json(const nlohmann::json& j) {
        StabConfig c;
        c.tex_res = j.value("tex_res", c.tex_res);
        c.base_ch = j.value("base_ch", c.base_ch);
        c.epochs = j.value("epochs", c.epochs);
        c.lr = j.value("lr", c.lr);
        c.clip = j.value("clip", c.clip);
        c.w_fid = j.value("w_fid", c.w_fid);
        c.w_tem = j.value("w_tem", c.w_tem);
        c.w_dis = j.value("w_dis", c.w_dis);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

template <class T>
class StabNet {
public:
    StabNet(int base_ch, Rng& rng)
        : c_(base_ch),
          enc1_("stab.enc1", 6, c_, 3, 1, nn::Init::he, rng),
          down1_("stab.down1", c_, 2 * c_, 3, 2, nn::Init::he, rng),
          enc2_("stab.enc2", 2 * c_, 2 * c_, 3, 1, nn::Init::he, rng),
          down2_("stab.down2", 2 * c_, 4 * c_, 3, 2, nn::Init::he, rng),
          mid_("stab.mid", 4 * c_, 4 * c_, 3, 1, nn::Init::he, rng),
          up2_("stab.up2", 4 * c_, 2 * c_, 3, 1, nn::Init::he, rng),
          dec2_("stab.dec2", 4 * c_, 2 * c_, 3, 1, nn::Init::he, rng),
          up1_("stab.up1", 2 * c_, c_, 3, 1, nn::Init::he, rng),
          dec1_("stab.dec1", 2 * c_, c_, 3, 1, nn::Init::he, rng),
          head_flow_("stab.flow", c_, 2, 3, 1, nn::Init::zero, rng),
          head_wrinkle_("stab.wrinkle", c_, 1, 3, 1, nn::Init::zero, rng) {}

    struct Out {
        nn::Var<T> flow;     // {2,R,R} pixels
        nn::Var<T> wrinkle;  // {1,R,R} in [0,1]
    };

    // tex and neutral are {3,R,R}; gradients are not propagated into them.
    Out forward(const Tensor<T>& tex, const Tensor<T>& neutral) {
        using namespace nn;
        if (!tex.same_shape(neutral) || tex.ndim() != 3 || tex.dim(0) != 3)
            throw Error(errc::shape_mismatch, "stabilizer expects matching {3,R,R} textures");
        auto x0 = concat0<T>({constant(tex.clone()), constant(neutral.clone())});
        auto e1 = relu(enc1_(x0));
        auto e2 = relu(enc2_(relu(down1_(e1))));
        auto m = relu(mid_(relu(down2_(e2))));
        auto u2 = relu(up2_(upsample_nearest2(m)));
        auto f2 = relu(dec2_(concat0<T>({u2, e2})));
        auto u1 = relu(up1_(upsample_nearest2(f2)));
        auto f1 = relu(dec1_(concat0<T>({u1, e1})));
        return {head_flow_(f1), squash01(head_wrinkle_(f1))};
    }

    std::vector<nn::Parameter<T>*> params() {
        std::vector<nn::Parameter<T>*> ps;
        for (auto* l : {&enc1_, &down1_, &enc2_, &down2_, &mid_, &up2_, &dec2_, &up1_, &dec1_,
                        &head_flow_, &head_wrinkle_})
            l->collect(ps);
        return ps;
    }

    int base_channels() const { return c_; }

private:
    int c_;
    nn::Conv2dLayer<T> enc1_, down1_, enc2_, down2_, mid_, up2_, dec2_, up1_, dec1_, head_flow_,
        head_wrinkle_;
};

template <class T>
struct StabLosses {
    nn::Var<T> total, fid, tem, dis;
};

template <class T>
StabLosses<T> stab_pair_loss(StabNet<T>& net, const Tensor<T>& tex_a, const Tensor<T>& tex_b,
                             const Tensor<T>& neutral, const StabConfig& cfg) {
    using namespace nn;
    auto oa = net.forward(tex_a, neutral);
    auto ob = net.forward(tex_b, neutral);
    auto nref = constant(neutral.clone());
    auto fid_a = l1_loss(grid_warp(constant(tex_a.clone()), oa.flow), mul_bc(nref, oa.wrinkle));
    auto fid_b = l1_loss(grid_warp(constant(tex_b.clone()), ob.flow), mul_bc(nref, ob.wrinkle));
    auto fid = scale(add(fid_a, fid_b), 0.5);
    auto tem = l1_loss(oa.wrinkle, ob.wrinkle);
    auto dis_a = add(rms_field(oa.flow), rms_field(spatial_grad(oa.flow)));
    auto dis_b = add(rms_field(ob.flow), rms_field(spatial_grad(ob.flow)));
    auto dis = scale(add(dis_a, dis_b), 0.5);
    auto total = wsum<T>({{cfg.w_fid, fid}, {cfg.w_tem, tem}, {cfg.w_dis, dis}});
    return {total, fid, tem, dis};
}

// Trains on consecutive train-split frame pairs in shuffled order. `log`
// (optional) receives one JSON line per epoch.
template <class T>
void train_stabilizer(StabNet<T>& net, const Dataset& ds, const StabConfig& cfg,
                      std::ostream* log = nullptr,
                      const std::function<void(int)>& on_epoch = {}) {
    auto params = net.params();
    nn::Adam<T> opt;
    opt.lr = cfg.lr;
    opt.clip_norm = cfg.clip;

    std::vector<int> pair_lo;  // indices into ds.frames, both halves in train
    for (size_t i = 0; i + 1 < ds.frames.size(); ++i)
        if (!ds.frames[i].is_test && !ds.frames[i + 1].is_test)
            pair_lo.push_back(static_cast<int>(i));
    if (pair_lo.empty()) throw Error(errc::bad_args, "no adjacent train frame pairs");

    // optimization happens at the working resolution
    int full = ds.frames.front().diffuse.dim(1);
    if (full % cfg.tex_res != 0)
        throw Error(errc::bad_args, "working resolution must divide the texture resolution");
    int factor = full / cfg.tex_res;
    auto shrink = [&](const Tensor<float>& t) {
        return (factor > 1 ? downsample_box(t, factor) : t).template cast<T>();
    };
    std::vector<Tensor<T>> diffuse_w(ds.frames.size());
    for (size_t i = 0; i < ds.frames.size(); ++i) diffuse_w[i] = shrink(ds.frames[i].diffuse);

    Tensor<T> neutral = shrink(ds.neutral_diffuse);
    Rng order = Rng::stream(cfg.seed, "stab_order");
    double initial_avg = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates on the pair list
        for (int i = static_cast<int>(pair_lo.size()) - 1; i > 0; --i)
            std::swap(pair_lo[i], pair_lo[order.uniform_int(i + 1)]);
        double sum_total = 0, sum_fid = 0, sum_tem = 0, sum_dis = 0;
        for (int i : pair_lo) {
            nn::zero_grads(params);
            auto losses = stab_pair_loss(net, diffuse_w[i], diffuse_w[i + 1], neutral, cfg);
            if (!losses.total->val.all_finite())
                throw Error(errc::diverged, "stabilizer loss is not finite");
            nn::backward(losses.total);
            opt.step(params);
            sum_total += losses.total->val[0];
            sum_fid += losses.fid->val[0];
            sum_tem += losses.tem->val[0];
            sum_dis += losses.dis->val[0];
        }
        double avg = sum_total / static_cast<double>(pair_lo.size());
        if (epoch == 0)
            initial_avg = avg;
        else if (avg > 10.0 * initial_avg)
            throw Error(errc::diverged, "stabilizer loss grew past 10x its initial value");
        if (log) {
            double n = static_cast<double>(pair_lo.size());
            nlohmann::json line = {{"event", "epoch"},      {"model", "stabilizer"},
                                   {"epoch", epoch},        {"loss", sum_total / n},
                                   {"fidelity", sum_fid / n}, {"temporal", sum_tem / n},
                                   {"displacement", sum_dis / n}};
            (*log) << line.dump() << "\n";
        }
        if (on_epoch) on_epoch(epoch);
    }
}

// Inference product for one frame: the corrective flow actually applied
// (full texture resolution, pixels at that resolution), the working-res
// wrinkle prediction, and every texture channel resampled by the flow.
struct StabilizedFrame {
    Tensor<float> flow, wrinkle;
    Tensor<float> diffuse, specular, normal;
};

// Prediction happens at `work_res` (the training resolution); the flow is
// bilinearly upsampled and rescaled to texture resolution before warping.
template <class T>
StabilizedFrame stabilize_frame(StabNet<T>& net, const Frame& f, const Tensor<float>& neutral,
                                int work_res) {
    int full = f.diffuse.dim(1);
    if (work_res <= 0 || full % work_res != 0)
        throw Error(errc::bad_args, "working resolution must divide the texture resolution");
    int factor = full / work_res;

    Tensor<float> tex_w = factor > 1 ? downsample_box(f.diffuse, factor) : f.diffuse.clone();
    Tensor<float> neu_w = factor > 1 ? downsample_box(neutral, factor) : neutral.clone();
    auto out = net.forward(tex_w.template cast<T>(), neu_w.template cast<T>());
    Tensor<float> flow_w = out.flow->val.template cast<float>();
    for (long long i = 0; i < flow_w.numel(); ++i)
        if (std::abs(flow_w[i]) > work_res / 4.0)
            throw Error(errc::integrity, "predicted flow exceeds the quarter-frame bound");

    Tensor<float> flow = factor > 1 ? upsample_bilinear(flow_w, factor) : std::move(flow_w);
    if (factor > 1)
        for (long long i = 0; i < flow.numel(); ++i) flow[i] *= static_cast<float>(factor);

    StabilizedFrame s;
    s.flow = std::move(flow);
    s.wrinkle = out.wrinkle->val.template cast<float>();
    s.diffuse = apply_warp(f.diffuse, s.flow);
    s.specular = apply_warp(f.specular, s.flow);
    s.normal = apply_warp(f.normal, s.flow);
    return s;
}

// Per-step mean absolute difference of consecutive diffuse textures, in
// sequence order; length T-1.
inline std::vector<double> consecutive_diff_curve(const Dataset& ds) {
    if (ds.frames.size() < 2) throw Error(errc::bad_args, "curve needs >= 2 frames");
    std::vector<double> curve;
    for (size_t i = 0; i + 1 < ds.frames.size(); ++i)
        curve.push_back(mean_abs_diff(ds.frames[i].diffuse, ds.frames[i + 1].diffuse));
    return curve;
}

// Quality report. "before" is the mean L1 between consecutive raw diffuse
// textures, "after" the same through stabilization; "flow_cosine" compares
// predicted flow with the generator's corrective field on held-out frames.
template <class T>
nlohmann::json stability_report(StabNet<T>& net, const Dataset& ds, int work_res) {
    std::vector<StabilizedFrame> stabs;
    stabs.reserve(ds.frames.size());
    for (const auto& f : ds.frames)
        stabs.push_back(stabilize_frame(net, f, ds.neutral_diffuse, work_res));

    auto raw_curve = consecutive_diff_curve(ds);
    double before = 0, after = 0;
    int pairs = static_cast<int>(raw_curve.size());
    for (size_t i = 0; i + 1 < ds.frames.size(); ++i) {
        before += raw_curve[i];
        after += mean_abs_diff(stabs[i].diffuse, stabs[i + 1].diffuse);
    }
    before /= pairs;
    after /= pairs;

    double cos_sum = 0;
    int cos_n = 0;
    for (size_t i = 0; i < ds.frames.size(); ++i) {
        if (!ds.frames[i].is_test) continue;
        const Tensor<float>& gt = ds.frames[i].jitter;
        const Tensor<float>& pr = stabs[i].flow;
        double dp = 0, n_gt = 0, n_pr = 0;
        for (long long k = 0; k < gt.numel(); ++k) {
            dp += static_cast<double>(gt[k]) * pr[k];
            n_gt += static_cast<double>(gt[k]) * gt[k];
            n_pr += static_cast<double>(pr[k]) * pr[k];
        }
        cos_sum += dp / (std::sqrt(n_gt) * std::sqrt(n_pr) + 1e-12);
        ++cos_n;
    }

    return {{"pairs", pairs},
            {"l1_before", before},
            {"l1_after", after},
            {"ratio", before > 0 ? after / before : 0.0},
            {"flow_cosine", cos_n ? cos_sum / cos_n : 0.0},
            {"test_frames", cos_n}};
}

// ---- checkpointing ----

template <class T>
void save_stabilizer(const std::string& dir, StabNet<T>& net, const StabConfig& cfg) {
    std::vector<nn::Parameter<float>*> ps;
    std::vector<nn::Parameter<float>> converted;  // used when T != float
    if constexpr (std::is_same_v<T, float>) {
        ps = net.params();
        save_checkpoint_dir(dir, ps,
                            {{"kind", "stabilizer"}, {"stage", "stabilize"},
                             {"config", cfg.to_json()}});
    } else {
        auto src = net.params();
        converted.reserve(src.size());
        for (auto* p : src) converted.emplace_back(p->name, p->value.template cast<float>());
        for (auto& p : converted) ps.push_back(&p);
        save_checkpoint_dir(dir, ps,
                            {{"kind", "stabilizer"}, {"stage", "stabilize"},
                             {"config", cfg.to_json()}});
    }
}

inline StabConfig load_stabilizer(const std::string& dir, StabNet<float>& net) {
    nlohmann::json meta = load_meta(dir);
    if (meta.value("kind", "") != "stabilizer")
        throw Error(errc::checkpoint_mismatch, "checkpoint is not a stabilizer");
    auto ps = net.params();
    load_weights(dir + "/weights.bin", ps);
    return StabConfig::from_json(meta.at("config"));
}

}  // namespace facet::stab
