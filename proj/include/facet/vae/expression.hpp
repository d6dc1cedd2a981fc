#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/checkpoint.hpp"
#include "facet/io/dataset.hpp"
#include "facet/nn/adam.hpp"
#include "facet/vae/common.hpp"

namespace facet::vae {

// VAE over face images with two latent heads: an expression code shared
// across simultaneous views, and a view code shared across time for a fixed
// camera. Training pulls matching codes together and swaps codes between
// triplet members before decoding, so neither code can smuggle the other
// factor. The decoder also sees a constant identity-indicator channel at
// every conv input; stage-capture frames use 0, retarget clips use 1.

struct ExprConfig {
    int image_res = 64;
    int base_ch = 8;
    int d_expr = 32;
    int d_view = 8;
    int epochs = 200;
    double lr = 1e-3;
    double clip = 1.0;
    double w_rec = 1.0;
    double w_cyc = 0.1;
    double w_exp = 1.0;
    double w_view = 1.0;
    double w_cro = 1.0;
    double beta = 1e-3;
    bool disentangle = true;
    uint64_t seed = 7;

    nlohmann::json to_json() const {
        return {{"image_res", image_res}, {"base_ch", base_ch}, {"d_expr", d_expr},
                {"d_view", d_view},       {"epochs", epochs},   {"lr", lr},
                {"clip", clip},           {"w_rec", w_rec},     {"w_cyc", w_cyc},
                {"w_exp", w_exp},         {"w_view", w_view},   {"w_cro", w_cro},
                {"beta", beta},           {"disentangle", disentangle}, {"seed", seed}};
    }
    static ExprConfig from_json(const nlohmann::json& j) {
        ExprConfig c;
        c.image_res = j.value("image_res", c.image_res);
        c.base_ch = j.value("base_ch", c.base_ch);
        c.d_expr = j.value("d_expr", c.d_expr);
        c.d_view = j.value("d_view", c.d_view);
        c.epochs = j.value("epochs", c.epochs);
        c.lr = j.value("lr", c.lr);
        c.clip = j.value("clip", c.clip);
        c.w_rec = j.value("w_rec", c.w_rec);
        c.w_cyc = j.value("w_cyc", c.w_cyc);
        c.w_exp = j.value("w_exp", c.w_exp);
        c.w_view = j.value("w_view", c.w_view);
        c.w_cro = j.value("w_cro", c.w_cro);
        c.beta = j.value("beta", c.beta);
        c.disentangle = j.value("disentangle", c.disentangle);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

template <class T>
class ExpressionVae {
public:
    ExpressionVae(const ExprConfig& cfg, Rng& rng)
        : cfg_(cfg),
          trunk_("expr.enc", 3, cfg.base_ch, cfg.image_res, rng),
          head_e_("expr.ze", trunk_.feature_dim(), cfg.d_expr, rng),
          head_v_("expr.zv", trunk_.feature_dim(), cfg.d_view, rng),
          dec_("expr.dec", cfg.d_expr + cfg.d_view, 3, cfg.base_ch, cfg.image_res,
               /*indicator=*/true, rng) {}

    struct Enc {
        LatentDist<T> expr, view;
    };

    Enc encode(const nn::Var<T>& img) {
        auto feat = trunk_(img);
        return {head_e_(feat), head_v_(feat)};
    }
    Enc encode(const Tensor<T>& img) { return encode(nn::constant(img.clone())); }

    nn::Var<T> decode(const nn::Var<T>& z_e, const nn::Var<T>& z_v, double indicator) {
        return nn::squash01(dec_(nn::concat0<T>({z_e, z_v}), indicator));
    }

    std::vector<nn::Parameter<T>*> params() {
        std::vector<nn::Parameter<T>*> ps;
        trunk_.collect(ps);
        head_e_.collect(ps);
        head_v_.collect(ps);
        dec_.collect(ps);
        return ps;
    }

    const ExprConfig& config() const { return cfg_; }

private:
    ExprConfig cfg_;
    ConvTrunk<T> trunk_;
    LatentHead<T> head_e_, head_v_;
    ConvDecoder<T> dec_;
};

template <class T>
struct ExprLosses {
    nn::Var<T> total, rec, cyc, exp, view, cro, kl;
};

// Triplet members: anchor I(t,i), same-frame other view I(t,j), other-frame
// same view I(s,i). Reconstruction and the cycle term run on the anchor; the
// attraction and swapped-decode terms use all three.
template <class T>
ExprLosses<T> expr_triplet_loss(ExpressionVae<T>& net, const Tensor<T>& img_ti,
                                const Tensor<T>& img_tj, const Tensor<T>& img_si,
                                double indicator, const ExprConfig& cfg, Rng* rng,
                                LatentMode mode = LatentMode::sample) {
    using namespace nn;
    auto e_ti = net.encode(img_ti);
    auto e_tj = net.encode(img_tj);
    auto e_si = net.encode(img_si);

    auto ze_ti = draw(e_ti.expr, mode, rng), zv_ti = draw(e_ti.view, mode, rng);
    auto ze_tj = draw(e_tj.expr, mode, rng), zv_tj = draw(e_tj.view, mode, rng);
    auto ze_si = draw(e_si.expr, mode, rng), zv_si = draw(e_si.view, mode, rng);

    auto recon = net.decode(ze_ti, zv_ti, indicator);
    auto rec = l1_loss(recon, constant(img_ti.clone()));

    auto re = net.encode(recon);
    auto cyc = add(sum_sq_diff(ze_ti, re.expr.mu), sum_sq_diff(zv_ti, re.view.mu));

    auto kl = wsum<T>({{1.0, kl_of(e_ti.expr)}, {1.0, kl_of(e_ti.view)},
                       {1.0, kl_of(e_tj.expr)}, {1.0, kl_of(e_tj.view)},
                       {1.0, kl_of(e_si.expr)}, {1.0, kl_of(e_si.view)}});

    ExprLosses<T> out;
    out.rec = rec;
    out.cyc = cyc;
    out.kl = kl;
    if (cfg.disentangle) {
        out.exp = sum_sq_diff(ze_ti, ze_tj);
        out.view = sum_sq_diff(zv_ti, zv_si);
        auto cro_ti = l1_loss(net.decode(ze_tj, zv_si, indicator), constant(img_ti.clone()));
        auto cro_tj = l1_loss(net.decode(ze_ti, zv_tj, indicator), constant(img_tj.clone()));
        auto cro_si = l1_loss(net.decode(ze_si, zv_ti, indicator), constant(img_si.clone()));
        out.cro = add(add(cro_ti, cro_tj), cro_si);
        out.total = wsum<T>({{cfg.w_rec, out.rec},
                             {cfg.w_cyc, out.cyc},
                             {cfg.w_exp, out.exp},
                             {cfg.w_view, out.view},
                             {cfg.w_cro, out.cro},
                             {cfg.beta, out.kl}});
    } else {
        out.exp = constant(Tensor<T>::zeros({1}));
        out.view = constant(Tensor<T>::zeros({1}));
        out.cro = constant(Tensor<T>::zeros({1}));
        out.total = wsum<T>(
            {{cfg.w_rec, out.rec}, {cfg.w_cyc, out.cyc}, {cfg.beta, out.kl}});
    }
    return out;
}

// One epoch = one sampled triplet per training frame.
template <class T>
void train_expression(ExpressionVae<T>& net, const Dataset& ds, const ExprConfig& cfg,
                      std::ostream* log = nullptr,
                      const std::function<void(int)>& on_epoch = {}) {
    if (ds.num_views < 2) throw Error(errc::bad_args, "expression training needs >= 2 views");
    std::vector<int> train;
    for (size_t i = 0; i < ds.frames.size(); ++i)
        if (!ds.frames[i].is_test) train.push_back(static_cast<int>(i));
    if (train.size() < 2) throw Error(errc::bad_args, "expression training needs >= 2 frames");

    auto params = net.params();
    nn::Adam<T> opt;
    opt.lr = cfg.lr;
    opt.clip_norm = cfg.clip;
    Rng pick = Rng::stream(cfg.seed, "expr_triplets");
    Rng noise = Rng::stream(cfg.seed, "expr_noise");

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double st = 0, sr = 0, sc = 0, se = 0, sv = 0, sx = 0, sk = 0;
        for (size_t step = 0; step < train.size(); ++step) {
            int t = train[pick.uniform_int(static_cast<int>(train.size()))];
            int s = t;
            while (s == t) s = train[pick.uniform_int(static_cast<int>(train.size()))];
            int i = pick.uniform_int(ds.num_views);
            int j = i;
            while (j == i) j = pick.uniform_int(ds.num_views);

            nn::zero_grads(params);
            auto losses = expr_triplet_loss(
                net, ds.frames[t].images[i].template cast<T>(),
                ds.frames[t].images[j].template cast<T>(),
                ds.frames[s].images[i].template cast<T>(), ds.frames[t].indicator, cfg,
                &noise);
            if (!losses.total->val.all_finite())
                throw Error(errc::diverged, "expression loss is not finite");
            nn::backward(losses.total);
            opt.step(params);
            st += losses.total->val[0];
            sr += losses.rec->val[0];
            sc += losses.cyc->val[0];
            se += losses.exp->val[0];
            sv += losses.view->val[0];
            sx += losses.cro->val[0];
            sk += losses.kl->val[0];
        }
        if (log) {
            double n = static_cast<double>(train.size());
            nlohmann::json line = {{"event", "epoch"},   {"model", "expression"},
                                   {"epoch", epoch},     {"loss", st / n},
                                   {"rec", sr / n},      {"cyc", sc / n},
                                   {"exp", se / n},      {"view", sv / n},
                                   {"cross", sx / n},    {"kl", sk / n}};
            (*log) << line.dump() << "\n";
        }
        if (on_epoch) on_epoch(epoch);
    }
}

// Mean latent codes for a single image (no sampling); used everywhere
// downstream of training.
template <class T>
std::pair<Tensor<float>, Tensor<float>> expr_codes(ExpressionVae<T>& net,
                                                   const Tensor<float>& img) {
    auto e = net.encode(img.template cast<T>());
    return {e.expr.mu->val.template cast<float>(), e.view.mu->val.template cast<float>()};
}

template <class T>
void save_expression(const std::string& dir, ExpressionVae<T>& net, const ExprConfig& cfg,
                     const std::string& stage_tag) {
    static_assert(std::is_same_v<T, float>, "checkpoints are float32");
    auto ps = net.params();
    save_checkpoint_dir(dir, ps,
                        {{"kind", "expression_vae"}, {"stage", stage_tag},
                         {"config", cfg.to_json()}});
}

inline ExprConfig load_expression_config(const std::string& dir) {
    nlohmann::json meta = load_meta(dir);
    if (meta.value("kind", "") != "expression_vae")
        throw Error(errc::checkpoint_mismatch, "checkpoint is not an expression vae");
    return ExprConfig::from_json(meta.at("config"));
}

inline void load_expression(const std::string& dir, ExpressionVae<float>& net) {
    auto ps = net.params();
    load_weights(dir + "/weights.bin", ps);
}

}  // namespace facet::vae
