#pragma once

#include <string>
#include <vector>

#include "facet/core/error.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/nn/layers.hpp"
#include "facet/nn/ops.hpp"

namespace facet::vae {

enum class LatentMode { sample, mean };

// A diagonal-Gaussian latent in the graph.
template <class T>
struct LatentDist {
    nn::Var<T> mu, logvar;
};

template <class T>
nn::Var<T> draw(const LatentDist<T>& d, LatentMode mode, Rng* rng) {
    if (mode == LatentMode::mean) return d.mu;
    if (!rng) throw Error(errc::bad_args, "sampling a latent needs an rng");
    Tensor<T> eps(d.mu->val.shape);
    for (auto& v : *eps.store) v = static_cast<T>(rng->normal());
    return nn::reparam(d.mu, d.logvar, eps);
}

template <class T>
nn::Var<T> kl_of(const LatentDist<T>& d) {
    return nn::kl_unit(d.mu, d.logvar);
}

// Strided conv trunk res -> res/8 with channels c, 2c, 4c, flattened.
template <class T>
class ConvTrunk {
public:
    ConvTrunk() = default;
    ConvTrunk(const std::string& name, int in_ch, int base_ch, int res, Rng& rng) {
        if (res % 8 != 0 || res < 8)
            throw Error(errc::bad_args, name + ": resolution must be a multiple of 8");
        feat_dim_ = 4 * base_ch * (res / 8) * (res / 8);
        c1_ = nn::Conv2dLayer<T>(name + ".c1", in_ch, base_ch, 3, 2, nn::Init::he, rng);
        c2_ = nn::Conv2dLayer<T>(name + ".c2", base_ch, 2 * base_ch, 3, 2, nn::Init::he, rng);
        c3_ = nn::Conv2dLayer<T>(name + ".c3", 2 * base_ch, 4 * base_ch, 3, 2, nn::Init::he, rng);
    }

    nn::Var<T> operator()(const nn::Var<T>& x) {
        return nn::reshape(nn::relu(c3_(nn::relu(c2_(nn::relu(c1_(x)))))), {feat_dim_});
    }

    int feature_dim() const { return feat_dim_; }

    void collect(std::vector<nn::Parameter<T>*>& out) {
        c1_.collect(out);
        c2_.collect(out);
        c3_.collect(out);
    }

private:
    int feat_dim_ = 0;
    nn::Conv2dLayer<T> c1_, c2_, c3_;
};

// Latent head: features -> (mu, logvar). The logvar branch starts at zero
// (unit variance) so early sampling is the unit prior.
template <class T>
class LatentHead {
public:
    LatentHead() = default;
    LatentHead(const std::string& name, int feat_dim, int latent_dim, Rng& rng)
        : mu_(name + ".mu", feat_dim, latent_dim, nn::Init::xavier, rng),
          lv_(name + ".lv", feat_dim, latent_dim, nn::Init::zero, rng) {}

    LatentDist<T> operator()(const nn::Var<T>& feat) { return {mu_(feat), lv_(feat)}; }

    void collect(std::vector<nn::Parameter<T>*>& out) {
        mu_.collect(out);
        lv_.collect(out);
    }

private:
    nn::LinearLayer<T> mu_, lv_;
};

// Decoder: latent -> {out_ch, res, res} via fc + three upsample/conv stages.
// With `indicator` enabled, a constant-valued channel is appended to the
// input of every convolution, signalling the identity domain to decode into.
// The final head is zero-initialized: an untrained decoder emits exactly 0.
template <class T>
class ConvDecoder {
public:
    ConvDecoder() = default;
    ConvDecoder(const std::string& name, int latent_dim, int out_ch, int base_ch, int res,
                bool indicator, Rng& rng)
        : res_(res), base_(base_ch), indicator_(indicator) {
        if (res % 8 != 0 || res < 8)
            throw Error(errc::bad_args, name + ": resolution must be a multiple of 8");
        int r8 = res / 8, ind = indicator ? 1 : 0;
        fc_ = nn::LinearLayer<T>(name + ".fc", latent_dim, 4 * base_ch * r8 * r8, nn::Init::he,
                                 rng);
        d1_ = nn::Conv2dLayer<T>(name + ".d1", 4 * base_ch + ind, 2 * base_ch, 3, 1,
                                 nn::Init::he, rng);
        d2_ = nn::Conv2dLayer<T>(name + ".d2", 2 * base_ch + ind, base_ch, 3, 1, nn::Init::he,
                                 rng);
        d3_ = nn::Conv2dLayer<T>(name + ".d3", base_ch + ind, base_ch, 3, 1, nn::Init::he, rng);
        head_ = nn::Conv2dLayer<T>(name + ".head", base_ch + ind, out_ch, 3, 1, nn::Init::zero,
                                   rng);
    }

    // Raw (untransformed) output map; callers apply their own range squashing.
    nn::Var<T> operator()(const nn::Var<T>& z, double indicator_value = 0.0) {
        using namespace nn;
        int r8 = res_ / 8;
        auto h = reshape(relu(fc_(z)), {4 * base_, r8, r8});
        h = relu(d1_(tag(upsample_nearest2(h), indicator_value)));
        h = relu(d2_(tag(upsample_nearest2(h), indicator_value)));
        h = relu(d3_(tag(upsample_nearest2(h), indicator_value)));
        return head_(tag(h, indicator_value));
    }

    void collect(std::vector<nn::Parameter<T>*>& out) {
        fc_.collect(out);
        d1_.collect(out);
        d2_.collect(out);
        d3_.collect(out);
        head_.collect(out);
    }

private:
    nn::Var<T> tag(const nn::Var<T>& x, double value) {
        return indicator_ ? nn::append_channel(x, value) : x;
    }

    int res_ = 0, base_ = 0;
    bool indicator_ = false;
    nn::LinearLayer<T> fc_;
    nn::Conv2dLayer<T> d1_, d2_, d3_, head_;
};

template <class T>
nn::Var<T> as_latent_input(const Tensor<T>& img) {
    return nn::constant(img.clone());
}

}  // namespace facet::vae
