#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/checkpoint.hpp"
#include "facet/io/dataset.hpp"
#include "facet/io/png_io.hpp"
#include "facet/nn/adam.hpp"
#include "facet/train/train.hpp"

namespace facet::retarget {

// Adapts a trained bundle to unseen performers from short monocular clips.
// Phase 1 fine-tunes the expression VAE on the union of stage frames
// (identity indicator 0) and clip frames (indicator 1, masked reconstruction
// only) while a gradient-reversed subject classifier pushes identity out of
// the expression code. Phase 2 re-runs the joint stage on stage data only
// with the expression model locked.

struct RetargetConfig {
    int phase1_epochs = 60;
    int phase2_epochs = 40;
    double lr = 1e-4;
    double clip = 1.0;
    double lambda_rev = 1.0;  // plateau value after warmup
    double w_adv = 1.0;
    double clip_seconds = 30.0;
    uint64_t seed = 7;

    nlohmann::json to_json() const {
        return {{"phase1_epochs", phase1_epochs}, {"phase2_epochs", phase2_epochs},
                {"lr", lr},                       {"clip", clip},
                {"lambda_rev", lambda_rev},       {"w_adv", w_adv},
                {"clip_seconds", clip_seconds},   {"seed", seed}};
    }
    static RetargetConfig from_json(const nlohmann::json& j) {
        RetargetConfig c;
        c.phase1_epochs = j.value("phase1_epochs", c.phase1_epochs);
        c.phase2_epochs = j.value("phase2_epochs", c.phase2_epochs);
        c.lr = j.value("lr", c.lr);
        c.clip = j.value("clip", c.clip);
        c.lambda_rev = j.value("lambda_rev", c.lambda_rev);
        c.w_adv = j.value("w_adv", c.w_adv);
        c.clip_seconds = j.value("clip_seconds", c.clip_seconds);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

struct ClipFrame {
    Tensor<float> image;  // {3,R,R}
    Tensor<float> mask;   // {1,R,R} in [0,1]
    int subject;          // dense id, >= 1 (0 is the stage performer)
};

struct RetargetData {
    std::vector<ClipFrame> clips;
    std::vector<std::string> subject_names;  // [0] = stage performer
};

// Clip directory layout: <root>/<clip>/clip.json {"fps": F, "subject_id": S}
// plus frames 0.png, 1.png, ... and masks mask_0.png, ... Only the first
// clip_seconds worth of frames are used.
inline RetargetData load_clips(const std::string& root, const Dataset& ds,
                               double clip_seconds) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw Error(errc::io_error, "clip root not found: " + root);
    RetargetData out;
    out.subject_names.push_back(ds.performer_id);
    std::map<std::string, int> subject_of;

    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw Error(errc::bad_args, "no clips under " + root);

    int res = ds.frames.front().images.front().dim(1);
    for (const auto& dir : dirs) {
        std::ifstream jf(dir + "/clip.json");
        if (!jf) throw Error(errc::io_error, "missing clip.json in " + dir);
        nlohmann::json meta = nlohmann::json::parse(jf);
        double fps = meta.at("fps").get<double>();
        std::string subject = meta.at("subject_id").get<std::string>();
        if (fps <= 0) throw Error(errc::bad_args, "clip fps must be positive in " + dir);
        if (subject == ds.performer_id)
            throw Error(errc::bad_args, "clip subject duplicates the stage performer");
        if (!subject_of.count(subject)) {
            subject_of[subject] = static_cast<int>(out.subject_names.size());
            out.subject_names.push_back(subject);
        }
        int sid = subject_of[subject];

        int limit = static_cast<int>(fps * clip_seconds);
        for (int n = 0; n < limit; ++n) {
            std::string img_path = dir + "/" + std::to_string(n) + ".png";
            if (!fs::exists(img_path)) break;
            Tensor<float> img = read_png16(img_path);
            if (img.dim(0) != 3 || img.dim(1) != res || img.dim(2) != res)
                throw Error(errc::shape_mismatch,
                            "clip frame resolution mismatch: " + img_path);
            Tensor<float> mask = read_png16(dir + "/mask_" + std::to_string(n) + ".png");
            if (mask.dim(0) != 1 || mask.dim(1) != res)
                throw Error(errc::shape_mismatch, "clip mask must be 1x" +
                                                      std::to_string(res) + " grayscale");
            out.clips.push_back({std::move(img), std::move(mask), sid});
        }
    }
    if (out.clips.empty()) throw Error(errc::bad_args, "clips contain no frames");
    return out;
}

// Subject classifier over expression codes.
template <class T>
class SubjectDisc {
public:
    SubjectDisc(int d_expr, int num_subjects, Rng& rng)
        : fc1_("disc.fc1", d_expr, 64, nn::Init::he, rng),
          fc2_("disc.fc2", 64, 64, nn::Init::he, rng),
          out_("disc.out", 64, num_subjects, nn::Init::zero, rng) {}

    nn::Var<T> logits(const nn::Var<T>& z_e) {
        using namespace nn;
        return out_(relu(fc2_(relu(fc1_(z_e)))));
    }

    std::vector<nn::Parameter<T>*> params() {
        std::vector<nn::Parameter<T>*> ps;
        fc1_.collect(ps);
        fc2_.collect(ps);
        out_.collect(ps);
        return ps;
    }

private:
    nn::LinearLayer<T> fc1_, fc2_, out_;
};

template <class T>
void save_discriminator(const std::string& dir, SubjectDisc<T>& disc, int num_subjects) {
    static_assert(std::is_same_v<T, float>);
    auto ps = disc.params();
    save_checkpoint_dir(dir, ps,
                        {{"kind", "subject_disc"}, {"num_subjects", num_subjects}});
}

inline int load_discriminator(const std::string& dir, SubjectDisc<float>& disc) {
    nlohmann::json meta = load_meta(dir);
    if (meta.value("kind", "") != "subject_disc")
        throw Error(errc::checkpoint_mismatch, "checkpoint is not a subject classifier");
    auto ps = disc.params();
    load_weights(dir + "/weights.bin", ps);
    return meta.at("num_subjects").get<int>();
}

// Phase 1. Every step combines one stage triplet, one clip frame, and the
// reversed-gradient subject loss on both expression codes; a single backward
// pass trains the classifier forward and the encoder adversarially.
inline void run_phase1(train::Bundle& b, const Dataset& ds, const RetargetData& rd,
                       SubjectDisc<float>& disc, const RetargetConfig& cfg,
                       std::ostream* log = nullptr) {
    std::vector<int> train_frames;
    for (size_t i = 0; i < ds.frames.size(); ++i)
        if (!ds.frames[i].is_test) train_frames.push_back(static_cast<int>(i));
    if (train_frames.size() < 2 || ds.num_views < 2)
        throw Error(errc::bad_args, "stage data too small for retargeting");

    std::vector<nn::Parameter<float>*> params;
    for (auto* p : b.expr->params()) params.push_back(p);
    for (auto* p : disc.params()) params.push_back(p);

    nn::Adam<float> opt;
    opt.lr = cfg.lr;
    opt.clip_norm = cfg.clip;
    Rng pick = Rng::stream(cfg.seed, "ret_pick");
    Rng noise = Rng::stream(cfg.seed, "ret_noise");
    const auto& ecfg = b.cfg.expr;

    int steps = static_cast<int>(train_frames.size());
    int warmup = std::max(1, cfg.phase1_epochs / 3);

    train::detail::run_guarded(params, [&](const std::function<void(int)>& tick) {
        for (int epoch = 0; epoch < cfg.phase1_epochs; ++epoch) {
            double lam = cfg.lambda_rev * std::min(1.0, static_cast<double>(epoch) / warmup);
            double s_stage = 0, s_clip = 0, s_adv = 0, s_tot = 0;
            int adv_skipped = 0;
            for (int step = 0; step < steps; ++step) {
                using namespace nn;
                // stage triplet, as in pretraining
                int t = train_frames[pick.uniform_int(steps)];
                int s = t;
                while (s == t) s = train_frames[pick.uniform_int(steps)];
                int i = pick.uniform_int(ds.num_views);
                int j = i;
                while (j == i) j = pick.uniform_int(ds.num_views);

                nn::zero_grads(params);
                auto stage_losses = vae::expr_triplet_loss(
                    *b.expr, ds.frames[t].images[i], ds.frames[t].images[j],
                    ds.frames[s].images[i], 0.0, ecfg, &noise);

                // clip frame: masked reconstruction + kl only
                const ClipFrame& cf =
                    rd.clips[pick.uniform_int(static_cast<int>(rd.clips.size()))];
                auto enc = b.expr->encode(cf.image);
                auto z_e = vae::draw(enc.expr, vae::LatentMode::sample, &noise);
                auto z_v = vae::draw(enc.view, vae::LatentMode::sample, &noise);
                auto recon = b.expr->decode(z_e, z_v, 1.0);
                auto l_rec = masked_l1(recon, constant(cf.image.clone()), cf.mask);
                auto l_kl = add(kl_unit(enc.expr.mu, enc.expr.logvar),
                                kl_unit(enc.view.mu, enc.view.logvar));
                auto clip_loss = wsum<float>({{ecfg.w_rec, l_rec}, {ecfg.beta, l_kl}});

                // adversary on the two codes seen this step
                auto stage_enc = b.expr->encode(ds.frames[t].images[i]);
                std::vector<std::pair<double, Var<float>>> terms = {
                    {1.0, stage_losses.total}, {1.0, clip_loss}};
                if (cf.subject != 0) {
                    auto ce_stage =
                        softmax_ce(disc.logits(grad_reverse(stage_enc.expr.mu, lam)), 0);
                    auto ce_clip =
                        softmax_ce(disc.logits(grad_reverse(enc.expr.mu, lam)), cf.subject);
                    auto adv = scale(add(ce_stage, ce_clip), 0.5);
                    terms.push_back({cfg.w_adv, adv});
                    s_adv += adv->val[0];
                } else {
                    ++adv_skipped;
                }
                auto total = wsum<float>(terms);
                if (!total->val.all_finite())
                    throw Error(errc::diverged, "retarget loss is not finite");
                nn::backward(total);
                opt.step(params);
                s_stage += stage_losses.total->val[0];
                s_clip += clip_loss->val[0];
                s_tot += total->val[0];
            }
            if (log) {
                double n = steps;
                nlohmann::json line = {{"event", "epoch"},   {"model", "retarget_p1"},
                                       {"epoch", epoch},     {"loss", s_tot / n},
                                       {"stage", s_stage / n}, {"clip", s_clip / n},
                                       {"adv", s_adv / n},   {"lambda", lam},
                                       {"adv_skipped", adv_skipped}};
                (*log) << line.dump() << "\n";
            }
            tick(epoch);
        }
    });
}

// Phase 2: joint geometry/texture/mapping refinement on stage data with the
// expression model untouched.
inline void run_phase2(train::Bundle& b, const Dataset& ds, const RetargetConfig& cfg,
                       std::ostream* log = nullptr) {
    train::TrainConfig jc = b.cfg;
    jc.joint_epochs = cfg.phase2_epochs;
    jc.joint_lr = cfg.lr;
    jc.seed = cfg.seed;  // fresh sampling streams, distinct from the train run
    std::swap(b.cfg, jc);
    try {
        train::run_stage_joint(b, ds, log);
    } catch (...) {
        std::swap(b.cfg, jc);
        throw;
    }
    std::swap(b.cfg, jc);
}

// Full retargeting run; saves the adapted bundle plus the subject classifier
// and returns the clip inventory. The expression weights are guaranteed
// bit-identical across phase 2.
inline RetargetData run_retargeting(train::Bundle& b, const Dataset& ds,
                                    const std::string& clips_dir, const RetargetConfig& cfg,
                                    const std::string& out_dir,
                                    std::ostream* log = nullptr) {
    if (train::stage_rank(b.stage) < 3)
        throw Error(errc::stage_too_early, "retargeting requires a finetuned bundle");
    RetargetData rd = load_clips(clips_dir, ds, cfg.clip_seconds);
    Rng dr = Rng::stream(cfg.seed, "disc_init");
    SubjectDisc<float> disc(b.cfg.expr.d_expr, static_cast<int>(rd.subject_names.size()), dr);

    try {
        run_phase1(b, ds, rd, disc, cfg, log);

        std::vector<Tensor<float>> frozen;
        for (auto* p : b.expr->params()) frozen.push_back(p->value.clone());
        run_phase2(b, ds, cfg, log);
        auto after = b.expr->params();
        for (size_t i = 0; i < after.size(); ++i)
            if (max_abs_diff(frozen[i], after[i]->value) != 0.0f)
                throw Error(errc::integrity, "expression weights moved during phase 2");
    } catch (const Error& e) {
        if (e.code() == errc::diverged) {
            b.stage = train::kStageRetargeted;
            train::save_bundle(out_dir, b);
        }
        throw;
    }

    b.stage = train::kStageRetargeted;
    train::save_bundle(out_dir, b);
    save_discriminator(out_dir + "/discriminator", disc,
                       static_cast<int>(rd.subject_names.size()));
    nlohmann::json inv = {{"subjects", rd.subject_names},
                          {"clip_frames", rd.clips.size()},
                          {"config", cfg.to_json()}};
    std::ofstream f(out_dir + "/retarget.json");
    f << inv.dump(2) << "\n";
    return rd;
}

}  // namespace facet::retarget
