#pragma once

#include <algorithm>
#include <array>
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
#include "facet/vae/common.hpp"

namespace facet::vae {

// VAE over the 7-channel texture stack (diffuse rgb, specular, normal xyz).
// The decoder emits a bounded per-texel delta ("wrinkle field") against the
// neutral texture at working resolution; composition clamps diffuse to
// [0,1], keeps specular non-negative, and renormalizes normals. Because the
// deltas live at low resolution they can be upsampled and composed against
// the full-resolution neutral texture, which carries the fine detail.

struct TexConfig {
    int work_res = 64;  // network resolution, <= dataset texture resolution
    int base_ch = 8;
    int d_tex = 32;
    int epochs = 200;
    double lr = 1e-3;
    double clip = 1.0;
    double w_rec = 1.0;
    double w_cyc = 0.1;
    double beta = 1e-3;
    bool wrinkle_deltas = true;  // false: decode the stack directly
    uint64_t seed = 7;

    nlohmann::json to_json() const {
        return {{"work_res", work_res}, {"base_ch", base_ch}, {"d_tex", d_tex},
                {"epochs", epochs},     {"lr", lr},           {"clip", clip},
                {"w_rec", w_rec},       {"w_cyc", w_cyc},     {"beta", beta},
                {"wrinkle_deltas", wrinkle_deltas}, {"seed", seed}};
    }
    static TexConfig from_json(const nlohmann::json& j) {
        TexConfig c;
        c.work_res = j.value("work_res", c.work_res);
        c.base_ch = j.value("base_ch", c.base_ch);
        c.d_tex = j.value("d_tex", c.d_tex);
        c.epochs = j.value("epochs", c.epochs);
        c.lr = j.value("lr", c.lr);
        c.clip = j.value("clip", c.clip);
        c.w_rec = j.value("w_rec", c.w_rec);
        c.w_cyc = j.value("w_cyc", c.w_cyc);
        c.beta = j.value("beta", c.beta);
        c.wrinkle_deltas = j.value("wrinkle_deltas", c.wrinkle_deltas);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

// One frame's texture channels; `normal` uses the storage encoding (n+1)/2.
struct TextureSet {
    Tensor<float> diffuse;   // {3,R,R}
    Tensor<float> specular;  // {1,R,R}
    Tensor<float> normal;    // {3,R,R}
};

inline TextureSet texture_of_frame(const Frame& f) { return {f.diffuse, f.specular, f.normal}; }

inline TextureSet neutral_textures(const Dataset& ds) {
    return {ds.neutral_diffuse, ds.neutral_specular, ds.neutral_normal};
}

inline TextureSet downsample_set(const TextureSet& s, int res) {
    int r = s.diffuse.dim(1);
    if (r == res) return {s.diffuse.clone(), s.specular.clone(), s.normal.clone()};
    if (r % res != 0)
        throw Error(errc::bad_args, "texture resolution must be a multiple of the working one");
    int f = r / res;
    TextureSet out{downsample_box(s.diffuse, f), downsample_box(s.specular, f),
                   downsample_box(s.normal, f)};
    // box-filtered storage normals are no longer unit; renormalize
    long long hw = static_cast<long long>(res) * res;
    for (long long i = 0; i < hw; ++i) {
        double x = 2.0 * out.normal[i] - 1.0, y = 2.0 * out.normal[hw + i] - 1.0,
               z = 2.0 * out.normal[2 * hw + i] - 1.0;
        double n = std::sqrt(x * x + y * y + z * z);
        if (n < 1e-9) {
            x = 0, y = 0, z = 1, n = 1;
        }
        out.normal[i] = static_cast<float>(0.5 * (x / n + 1.0));
        out.normal[hw + i] = static_cast<float>(0.5 * (y / n + 1.0));
        out.normal[2 * hw + i] = static_cast<float>(0.5 * (z / n + 1.0));
    }
    return out;
}

// {7,R,R} stack with unit-vector normals (decoded from storage).
inline Tensor<float> stack_unit(const TextureSet& s) {
    int r = s.diffuse.dim(1);
    Tensor<float> out({7, r, r});
    long long hw = static_cast<long long>(r) * r;
    for (long long i = 0; i < 3 * hw; ++i) out[i] = s.diffuse[i];
    for (long long i = 0; i < hw; ++i) out[3 * hw + i] = s.specular[i];
    for (long long i = 0; i < 3 * hw; ++i)
        out[4 * hw + i] = 2.0f * s.normal[i] - 1.0f;
    return out;
}

// {7,R,R} stack with storage-encoded normals; every channel lies in [0,1].
inline Tensor<float> stack_storage(const TextureSet& s) {
    int r = s.diffuse.dim(1);
    Tensor<float> out({7, r, r});
    long long hw = static_cast<long long>(r) * r;
    for (long long i = 0; i < 3 * hw; ++i) out[i] = s.diffuse[i];
    for (long long i = 0; i < hw; ++i) out[3 * hw + i] = s.specular[i];
    for (long long i = 0; i < 3 * hw; ++i) out[4 * hw + i] = s.normal[i];
    return out;
}

// Per-channel normalization of encoder inputs, estimated on the train split.
// Defaults to the identity so an untrained checkpoint stays loadable.
struct ChannelStats {
    std::array<double, 7> mean{};
    std::array<double, 7> stdev{1, 1, 1, 1, 1, 1, 1};

    nlohmann::json to_json() const {
        return {{"mean", std::vector<double>(mean.begin(), mean.end())},
                {"std", std::vector<double>(stdev.begin(), stdev.end())}};
    }
    static ChannelStats from_json(const nlohmann::json& j) {
        ChannelStats s;
        auto m = j.at("mean").get<std::vector<double>>();
        auto d = j.at("std").get<std::vector<double>>();
        if (m.size() != 7 || d.size() != 7)
            throw Error(errc::bad_args, "channel stats must have 7 entries");
        std::copy(m.begin(), m.end(), s.mean.begin());
        std::copy(d.begin(), d.end(), s.stdev.begin());
        return s;
    }
};

inline ChannelStats compute_channel_stats(const std::vector<Tensor<float>>& stacks) {
    if (stacks.empty()) throw Error(errc::bad_args, "no stacks for channel stats");
    ChannelStats s;
    long long hw = stacks[0].numel() / 7;
    for (int c = 0; c < 7; ++c) {
        double sum = 0, sum2 = 0;
        long long n = 0;
        for (const auto& st : stacks)
            for (long long i = 0; i < hw; ++i) {
                double v = st[c * hw + i];
                sum += v;
                sum2 += v * v;
                ++n;
            }
        double mean = sum / n;
        double var = std::max(0.0, sum2 / n - mean * mean);
        s.mean[c] = mean;
        s.stdev[c] = std::max(1e-3, std::sqrt(var));
    }
    return s;
}

template <class T>
class TextureVae {
public:
    TextureVae(const TexConfig& cfg, Rng& rng)
        : cfg_(cfg),
          trunk_("tex.enc", 7, cfg.base_ch, cfg.work_res, rng),
          head_("tex.z", trunk_.feature_dim(), cfg.d_tex, rng),
          dec_("tex.dec", cfg.d_tex, 7, cfg.base_ch, cfg.work_res, /*indicator=*/false, rng) {
        set_stats(ChannelStats{});  // identity until training estimates real ones
    }

    void set_stats(const ChannelStats& s) {
        stats_ = s;
        int r = cfg_.work_res;
        long long hw = static_cast<long long>(r) * r;
        neg_mean_ = Tensor<T>({7, r, r});
        inv_std_ = Tensor<T>({7, r, r});
        for (int c = 0; c < 7; ++c)
            for (long long i = 0; i < hw; ++i) {
                neg_mean_[c * hw + i] = static_cast<T>(-s.mean[c]);
                inv_std_[c * hw + i] = static_cast<T>(1.0 / s.stdev[c]);
            }
        has_stats_ = true;
    }
    const ChannelStats& stats() const { return stats_; }

    // stack is a raw {7,S,S} tensor (unit-normal flavor in delta mode)
    LatentDist<T> encode(const nn::Var<T>& stack) {
        if (!has_stats_) throw Error(errc::bad_args, "texture stats not initialized");
        using namespace nn;
        auto norm = mul(add(stack, constant(neg_mean_.clone())), constant(inv_std_.clone()));
        return head_(trunk_(norm));
    }
    LatentDist<T> encode(const Tensor<T>& stack) { return encode(nn::constant(stack.clone())); }

    // delta mode: bounded per-texel offsets; direct mode: the stack itself
    nn::Var<T> decode_raw(const nn::Var<T>& z) {
        return cfg_.wrinkle_deltas ? nn::tanh_op(dec_(z)) : nn::squash01(dec_(z));
    }

    // Differentiable composition against the neutral stack at working res.
    nn::Var<T> compose(const nn::Var<T>& deltas, const Tensor<T>& neutral_unit_stack) {
        using namespace nn;
        int r = cfg_.work_res;
        long long hw = static_cast<long long>(r) * r;
        Tensor<T> nd({3, r, r}), ns({1, r, r}), nn_({3, r, r});
        for (long long i = 0; i < 3 * hw; ++i) nd[i] = neutral_unit_stack[i];
        for (long long i = 0; i < hw; ++i) ns[i] = neutral_unit_stack[3 * hw + i];
        for (long long i = 0; i < 3 * hw; ++i) nn_[i] = neutral_unit_stack[4 * hw + i];
        auto dd = slice0(deltas, 0, 3);
        auto dsp = slice0(deltas, 3, 1);
        auto dn = slice0(deltas, 4, 3);
        return concat0<T>({clamp01(add(dd, constant(nd.clone()))),
                           relu(add(dsp, constant(ns.clone()))),
                           normalize3(add(dn, constant(nn_.clone())))});
    }

    std::vector<nn::Parameter<T>*> params() {
        std::vector<nn::Parameter<T>*> ps;
        trunk_.collect(ps);
        head_.collect(ps);
        dec_.collect(ps);
        return ps;
    }

    const TexConfig& config() const { return cfg_; }

private:
    TexConfig cfg_;
    ConvTrunk<T> trunk_;
    LatentHead<T> head_;
    ConvDecoder<T> dec_;
    ChannelStats stats_;
    Tensor<T> neg_mean_, inv_std_;
    bool has_stats_ = false;
};

template <class T>
struct TexLosses {
    nn::Var<T> total, rec, cyc, kl;
};

// target: {7,S,S} stack of the frame. neutral: {7,S,S} stack used by the
// delta composition (ignored in direct mode).
template <class T>
TexLosses<T> tex_frame_loss(TextureVae<T>& net, const Tensor<T>& target,
                            const Tensor<T>& neutral, const TexConfig& cfg, Rng* rng,
                            LatentMode mode = LatentMode::sample) {
    using namespace nn;
    auto dist = net.encode(target);
    auto z = draw(dist, mode, rng);
    auto raw = net.decode_raw(z);
    auto out = cfg.wrinkle_deltas ? net.compose(raw, neutral) : raw;
    TexLosses<T> l;
    l.rec = l1_loss(out, constant(target.clone()));
    auto re = net.encode(out);
    l.cyc = sum_sq_diff(z, re.mu);
    l.kl = kl_of(dist);
    l.total = wsum<T>({{cfg.w_rec, l.rec}, {cfg.w_cyc, l.cyc}, {cfg.beta, l.kl}});
    return l;
}

// Builds the per-frame stacks at working resolution. Delta mode uses the
// unit-normal flavor (composition renormalizes), direct mode the storage
// flavor (all channels bounded for the squashed head).
inline Tensor<float> frame_stack(const Frame& f, const TexConfig& cfg) {
    TextureSet s = downsample_set(texture_of_frame(f), cfg.work_res);
    return cfg.wrinkle_deltas ? stack_unit(s) : stack_storage(s);
}

inline Tensor<float> neutral_stack(const Dataset& ds, const TexConfig& cfg) {
    TextureSet s = downsample_set(neutral_textures(ds), cfg.work_res);
    return cfg.wrinkle_deltas ? stack_unit(s) : stack_storage(s);
}

template <class T>
void train_texture(TextureVae<T>& net, const Dataset& ds, const TexConfig& cfg,
                   std::ostream* log = nullptr,
                      const std::function<void(int)>& on_epoch = {}) {
    std::vector<int> train;
    for (size_t i = 0; i < ds.frames.size(); ++i)
        if (!ds.frames[i].is_test) train.push_back(static_cast<int>(i));
    if (train.empty()) throw Error(errc::bad_args, "texture training needs frames");

    std::vector<Tensor<float>> stacks;
    stacks.reserve(train.size());
    for (int i : train) stacks.push_back(frame_stack(ds.frames[i], cfg));
    net.set_stats(compute_channel_stats(stacks));
    Tensor<T> neutral = neutral_stack(ds, cfg).template cast<T>();

    auto params = net.params();
    nn::Adam<T> opt;
    opt.lr = cfg.lr;
    opt.clip_norm = cfg.clip;
    Rng order = Rng::stream(cfg.seed, "tex_order");
    Rng noise = Rng::stream(cfg.seed, "tex_noise");

    std::vector<int> idx(train.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
            std::swap(idx[i], idx[order.uniform_int(i + 1)]);
        double st = 0, sr = 0, sc = 0, sk = 0;
        for (int i : idx) {
            nn::zero_grads(params);
            auto losses =
                tex_frame_loss(net, stacks[i].template cast<T>(), neutral, cfg, &noise);
            if (!losses.total->val.all_finite())
                throw Error(errc::diverged, "texture loss is not finite");
            nn::backward(losses.total);
            opt.step(params);
            st += losses.total->val[0];
            sr += losses.rec->val[0];
            sc += losses.cyc->val[0];
            sk += losses.kl->val[0];
        }
        if (log) {
            double n = static_cast<double>(idx.size());
            nlohmann::json line = {{"event", "epoch"}, {"model", "texture"},
                                   {"epoch", epoch},   {"loss", st / n},
                                   {"rec", sr / n},    {"cyc", sc / n},
                                   {"kl", sk / n}};
            (*log) << line.dump() << "\n";
        }
        if (on_epoch) on_epoch(epoch);
    }
}

template <class T>
Tensor<float> tex_code(TextureVae<T>& net, const Tensor<float>& stack) {
    auto dist = net.encode(stack.template cast<T>());
    return dist.mu->val.template cast<float>();
}

// Low-res wrinkle field for a texture code (delta mode) or the directly
// decoded stack (direct mode).
template <class T>
Tensor<float> decode_texture_field(TextureVae<T>& net, const Tensor<float>& z) {
    auto raw = net.decode_raw(nn::constant(z.template cast<T>()));
    return raw->val.template cast<float>();
}

// Composes a low-res delta field against a full-resolution neutral texture.
// The neutral resolution must be an integer multiple of the field's.
inline TextureSet compose_texture(const TextureSet& neutral, const Tensor<float>& deltas) {
    if (deltas.ndim() != 3 || deltas.dim(0) != 7)
        throw Error(errc::shape_mismatch, "compose_texture expects a {7,S,S} delta field");
    int hi = neutral.diffuse.dim(1), lo = deltas.dim(1);
    if (hi < lo || hi % lo != 0)
        throw Error(errc::bad_args,
                    "neutral resolution must be an integer multiple of the delta field's");
    Tensor<float> up = hi == lo ? deltas.clone() : upsample_bilinear(deltas, hi / lo);

    long long hw = static_cast<long long>(hi) * hi;
    TextureSet out{Tensor<float>({3, hi, hi}), Tensor<float>({1, hi, hi}),
                   Tensor<float>({3, hi, hi})};
    for (long long i = 0; i < 3 * hw; ++i)
        out.diffuse[i] = std::clamp(neutral.diffuse[i] + up[i], 0.0f, 1.0f);
    for (long long i = 0; i < hw; ++i)
        out.specular[i] = std::max(0.0f, neutral.specular[i] + up[3 * hw + i]);
    for (long long i = 0; i < hw; ++i) {
        double x = 2.0 * neutral.normal[i] - 1.0 + up[4 * hw + i];
        double y = 2.0 * neutral.normal[hw + i] - 1.0 + up[5 * hw + i];
        double z = 2.0 * neutral.normal[2 * hw + i] - 1.0 + up[6 * hw + i];
        double n = std::sqrt(x * x + y * y + z * z);
        if (n < 1e-9) {
            x = 0, y = 0, z = 1, n = 1;
        }
        out.normal[i] = static_cast<float>(0.5 * (x / n + 1.0));
        out.normal[hw + i] = static_cast<float>(0.5 * (y / n + 1.0));
        out.normal[2 * hw + i] = static_cast<float>(0.5 * (z / n + 1.0));
    }
    return out;
}

// Direct-mode fallback: naively upsample a decoded storage stack.
inline TextureSet upsample_stack_naive(const Tensor<float>& stack, int hi_res) {
    int lo = stack.dim(1);
    if (hi_res % lo != 0) throw Error(errc::bad_args, "resolutions must divide");
    Tensor<float> up = hi_res == lo ? stack.clone() : upsample_bilinear(stack, hi_res / lo);
    long long hw = static_cast<long long>(hi_res) * hi_res;
    TextureSet out{Tensor<float>({3, hi_res, hi_res}), Tensor<float>({1, hi_res, hi_res}),
                   Tensor<float>({3, hi_res, hi_res})};
    for (long long i = 0; i < 3 * hw; ++i) out.diffuse[i] = std::clamp(up[i], 0.0f, 1.0f);
    for (long long i = 0; i < hw; ++i) out.specular[i] = std::max(0.0f, up[3 * hw + i]);
    for (long long i = 0; i < 3 * hw; ++i)
        out.normal[i] = std::clamp(up[4 * hw + i], 0.0f, 1.0f);
    return out;
}

template <class T>
void save_texture(const std::string& dir, TextureVae<T>& net, const TexConfig& cfg,
                  const std::string& stage_tag) {
    static_assert(std::is_same_v<T, float>, "checkpoints are float32");
    auto ps = net.params();
    save_checkpoint_dir(dir, ps,
                        {{"kind", "texture_vae"}, {"stage", stage_tag},
                         {"config", cfg.to_json()}, {"stats", net.stats().to_json()}});
}

inline TexConfig load_texture_config(const std::string& dir) {
    nlohmann::json meta = load_meta(dir);
    if (meta.value("kind", "") != "texture_vae")
        throw Error(errc::checkpoint_mismatch, "checkpoint is not a texture vae");
    return TexConfig::from_json(meta.at("config"));
}

inline void load_texture(const std::string& dir, TextureVae<float>& net) {
    nlohmann::json meta = load_meta(dir);
    net.set_stats(ChannelStats::from_json(meta.at("stats")));
    auto ps = net.params();
    load_weights(dir + "/weights.bin", ps);
}

}  // namespace facet::vae
