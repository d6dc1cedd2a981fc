#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/checkpoint.hpp"
#include "facet/nn/adam.hpp"
#include "facet/nn/layers.hpp"
#include "facet/nn/ops.hpp"

namespace facet::map {

// Bridges the image-side expression code to the asset-side codes: one MLP
// with three tanh hidden layers of 256 units whose output splits into the
// geometry code followed by the texture code.

struct MapConfig {
    int d_expr = 32;
    int d_geom = 32;
    int d_tex = 32;
    int hidden = 256;
    int epochs = 100;
    double lr = 1e-3;
    double clip = 1.0;
    uint64_t seed = 7;

    nlohmann::json to_json() const {
        return {{"d_expr", d_expr}, {"d_geom", d_geom}, {"d_tex", d_tex},
                {"hidden", hidden}, {"epochs", epochs}, {"lr", lr},
                {"clip", clip},     {"seed", seed}};
    }
    static MapConfig from_json(const nlohmann::json& j) {
        MapConfig c;
        c.d_expr = j.value("d_expr", c.d_expr);
        c.d_geom = j.value("d_geom", c.d_geom);
        c.d_tex = j.value("d_tex", c.d_tex);
        c.hidden = j.value("hidden", c.hidden);
        c.epochs = j.value("epochs", c.epochs);
        c.lr = j.value("lr", c.lr);
        c.clip = j.value("clip", c.clip);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

template <class T>
class LatentMap {
public:
    LatentMap(const MapConfig& cfg, Rng& rng)
        : cfg_(cfg),
          fc1_("map.fc1", cfg.d_expr, cfg.hidden, nn::Init::xavier, rng),
          fc2_("map.fc2", cfg.hidden, cfg.hidden, nn::Init::xavier, rng),
          fc3_("map.fc3", cfg.hidden, cfg.hidden, nn::Init::xavier, rng),
          out_("map.out", cfg.hidden, cfg.d_geom + cfg.d_tex, nn::Init::zero, rng) {}

    struct Out {
        nn::Var<T> geom, tex;
    };

    Out operator()(const nn::Var<T>& z_e) {
        using namespace nn;
        auto h = tanh_op(fc3_(tanh_op(fc2_(tanh_op(fc1_(z_e))))));
        auto y = out_(h);
        return {slice0(y, 0, cfg_.d_geom), slice0(y, cfg_.d_geom, cfg_.d_tex)};
    }

    std::pair<Tensor<float>, Tensor<float>> apply(const Tensor<float>& z_e) {
        auto o = (*this)(nn::constant(z_e.template cast<T>()));
        return {o.geom->val.template cast<float>(), o.tex->val.template cast<float>()};
    }

    std::vector<nn::Parameter<T>*> params() {
        std::vector<nn::Parameter<T>*> ps;
        fc1_.collect(ps);
        fc2_.collect(ps);
        fc3_.collect(ps);
        out_.collect(ps);
        return ps;
    }

    const MapConfig& config() const { return cfg_; }

private:
    MapConfig cfg_;
    nn::LinearLayer<T> fc1_, fc2_, fc3_, out_;
};

// Squared-distance regression onto both target codes. Targets enter the
// graph as Vars so later training stages can pass live encoder outputs and
// backpropagate through them; frozen-target callers pass constants.
template <class T>
nn::Var<T> map_loss(LatentMap<T>& net, const nn::Var<T>& z_e, const nn::Var<T>& z_g,
                    const nn::Var<T>& z_t) {
    auto o = net(z_e);
    return nn::add(nn::sum_sq_diff(o.geom, z_g), nn::sum_sq_diff(o.tex, z_t));
}

template <class T>
void save_mapping(const std::string& dir, LatentMap<T>& net, const MapConfig& cfg,
                  const std::string& stage_tag) {
    static_assert(std::is_same_v<T, float>, "checkpoints are float32");
    auto ps = net.params();
    save_checkpoint_dir(dir, ps,
                        {{"kind", "latent_map"}, {"stage", stage_tag},
                         {"config", cfg.to_json()}});
}

inline MapConfig load_mapping_config(const std::string& dir) {
    nlohmann::json meta = load_meta(dir);
    if (meta.value("kind", "") != "latent_map")
        throw Error(errc::checkpoint_mismatch, "checkpoint is not a latent map");
    return MapConfig::from_json(meta.at("config"));
}

inline void load_mapping(const std::string& dir, LatentMap<float>& net) {
    auto ps = net.params();
    load_weights(dir + "/weights.bin", ps);
}

}  // namespace facet::map
