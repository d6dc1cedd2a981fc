#include <filesystem>
#include <sstream>

#include <catch2/catch_amalgamated.hpp>

#include "facet/map/mapping.hpp"
#include "facet/stage/synthetic.hpp"
#include "facet/vae/expression.hpp"
#include "facet/vae/geometry.hpp"
#include "facet/vae/texture.hpp"
#include "support/gradcheck.hpp"

using namespace facet;
using Catch::Approx;

namespace {

Tensor<float> random01(std::vector<int> shape, uint64_t salt) {
    Rng r = Rng::stream(123, "vaefill", salt);
    Tensor<float> t(std::move(shape));
    for (long long i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(r.uniform());
    return t;
}

stage::StageConfig tiny_stage() {
    stage::StageConfig sc;
    sc.seed = 41;
    sc.num_frames = 10;
    sc.num_views = 2;
    sc.image_res = 16;
    sc.geom_res = 8;
    sc.tex_res = 16;
    sc.expr_dims = 3;
    sc.jitter_amplitude = 0.0;
    return sc;
}

// FD probe of network parameters against backward() gradients.
template <class LossFn>
double param_fd_worst(std::vector<nn::Parameter<double>*> params, LossFn loss, int trials,
                      uint64_t seed) {
    nn::zero_grads(params);
    auto root = loss();
    nn::backward(root);
    std::vector<Tensor<double>> grads;
    for (auto* p : params) grads.push_back(p->grad.clone());

    Rng pick = Rng::stream(seed, "fd_pick");
    double worst = 0;
    for (int k = 0; k < trials; ++k) {
        size_t pi = pick.uniform_int(static_cast<int>(params.size()));
        auto* p = params[pi];
        long long i = pick.uniform_int(static_cast<int>(p->value.numel()));
        double orig = p->value[i], h = 1e-5;
        p->value[i] = orig + h;
        double fp = loss()->val[0];
        p->value[i] = orig - h;
        double fm = loss()->val[0];
        p->value[i] = orig;
        double num = (fp - fm) / (2 * h);
        double err = std::abs(grads[pi][i] - num) /
                     std::max({1e-3, std::abs(num), std::abs(grads[pi][i])});
        worst = std::max(worst, err);
    }
    return worst;
}

template <class T, class Net>
void nudge_params(Net& net, uint64_t seed, double amp = 0.02) {
    Rng nud = Rng::stream(seed, "nudge");
    for (auto* p : net.params())
        for (long long i = 0; i < p->value.numel(); ++i)
            p->value[i] += static_cast<T>(amp * nud.uniform(-1.0, 1.0));
}

}  // namespace

TEST_CASE("expression vae shapes and untrained decode") {
    vae::ExprConfig cfg;
    cfg.image_res = 16;
    cfg.base_ch = 2;
    cfg.d_expr = 4;
    cfg.d_view = 2;
    Rng rng = Rng::stream(3, "init");
    vae::ExpressionVae<float> net(cfg, rng);

    auto img = random01({3, 16, 16}, 0);
    auto e = net.encode(img);
    CHECK(e.expr.mu->val.numel() == 4);
    CHECK(e.view.mu->val.numel() == 2);
    // logvar head starts at zero
    CHECK(mean_abs(e.expr.logvar->val) == 0.0);

    auto out = net.decode(e.expr.mu, e.view.mu, 0.0);
    REQUIRE(out->val.shape == std::vector<int>{3, 16, 16});
    for (long long i = 0; i < out->val.numel(); ++i) CHECK(out->val[i] == 0.5f);
}

TEST_CASE("expression decoder reacts to the indicator channel") {
    vae::ExprConfig cfg;
    cfg.image_res = 16;
    cfg.base_ch = 2;
    cfg.d_expr = 4;
    cfg.d_view = 2;
    Rng rng = Rng::stream(9, "init");
    vae::ExpressionVae<float> net(cfg, rng);
    nudge_params<float>(net, 10, 0.05);

    auto img = random01({3, 16, 16}, 1);
    auto e = net.encode(img);
    auto a = net.decode(e.expr.mu, e.view.mu, 0.0);
    auto b = net.decode(e.expr.mu, e.view.mu, 1.0);
    CHECK(mean_abs_diff(a->val, b->val) > 0);
}

TEST_CASE("expression triplet loss gradient matches finite differences") {
    vae::ExprConfig cfg;
    cfg.image_res = 8;
    cfg.base_ch = 2;
    cfg.d_expr = 3;
    cfg.d_view = 2;
    Rng rng = Rng::stream(17, "init");
    vae::ExpressionVae<double> net(cfg, rng);
    nudge_params<double>(net, 18);

    Tensor<double> ti = random01({3, 8, 8}, 2).cast<double>();
    Tensor<double> tj = random01({3, 8, 8}, 3).cast<double>();
    Tensor<double> si = random01({3, 8, 8}, 4).cast<double>();

    // mean mode: the FD re-evaluations must be deterministic
    auto loss = [&]() {
        return vae::expr_triplet_loss(net, ti, tj, si, 0.0, cfg, nullptr,
                                      vae::LatentMode::mean)
            .total;
    };
    CHECK(param_fd_worst(net.params(), loss, 14, 19) < 1e-4);
}

TEST_CASE("disabling disentanglement removes the attraction terms") {
    vae::ExprConfig cfg;
    cfg.image_res = 8;
    cfg.base_ch = 2;
    cfg.d_expr = 3;
    cfg.d_view = 2;
    cfg.disentangle = false;
    Rng rng = Rng::stream(23, "init");
    vae::ExpressionVae<double> net(cfg, rng);
    Tensor<double> ti = random01({3, 8, 8}, 5).cast<double>();
    Tensor<double> tj = random01({3, 8, 8}, 6).cast<double>();
    Tensor<double> si = random01({3, 8, 8}, 7).cast<double>();
    auto l = vae::expr_triplet_loss(net, ti, tj, si, 0.0, cfg, nullptr, vae::LatentMode::mean);
    CHECK(l.exp->val[0] == 0.0);
    CHECK(l.view->val[0] == 0.0);
    CHECK(l.cro->val[0] == 0.0);
    CHECK(l.total->val[0] ==
          Approx(cfg.w_rec * l.rec->val[0] + cfg.w_cyc * l.cyc->val[0] + cfg.beta * l.kl->val[0]));
}

TEST_CASE("expression training smoke run improves the loss") {
    Dataset ds = stage::StageModel(tiny_stage()).generate();
    vae::ExprConfig cfg;
    cfg.image_res = 16;
    cfg.base_ch = 2;
    cfg.d_expr = 4;
    cfg.d_view = 2;
    cfg.epochs = 4;
    cfg.seed = 5;
    Rng rng = Rng::stream(cfg.seed, "expr_init");
    vae::ExpressionVae<float> net(cfg, rng);

    std::ostringstream log;
    train_expression(net, ds, cfg, &log);
    std::istringstream lines(log.str());
    std::string line, first, last;
    while (std::getline(lines, line)) {
        if (first.empty()) first = line;
        last = line;
    }
    double l0 = nlohmann::json::parse(first).at("loss").get<double>();
    double l1 = nlohmann::json::parse(last).at("loss").get<double>();
    CHECK(l1 < l0);

    std::string dir = "expr_ckpt_test";
    std::filesystem::remove_all(dir);
    vae::save_expression(dir, net, cfg, "vae_pretrain");
    Rng rng2 = Rng::stream(99, "other");
    vae::ExpressionVae<float> net2(vae::load_expression_config(dir), rng2);
    vae::load_expression(dir, net2);
    auto pa = net.params(), pb = net2.params();
    for (size_t i = 0; i < pa.size(); ++i)
        CHECK(max_abs_diff(pa[i]->value, pb[i]->value) == 0.0f);
    CHECK(load_meta(dir).at("stage").get<std::string>() == "vae_pretrain");
    std::filesystem::remove_all(dir);
}

TEST_CASE("rigid augmentation matches the per-texel transform") {
    Dataset ds = stage::StageModel(tiny_stage()).generate();
    Rng rng = Rng::stream(7, "aug");
    const Tensor<float>& g = ds.frames[3].geometry;
    auto aug = vae::augment_geometry(g, rng, 15.0, 10.0);
    CHECK(aug.pose.rot.angle() <= 15.0 * M_PI / 180.0 + 1e-9);
    CHECK(std::abs(aug.pose.trans[0]) <= 10.0);
    long long hw = g.numel() / 3;
    for (long long i : {0LL, hw / 2, hw - 1}) {
        Vec3 p{g[i], g[hw + i], g[2 * hw + i]};
        Vec3 q = aug.pose.apply(p);
        CHECK(aug.map[i] == Approx(q[0]).margin(1e-4));
        CHECK(aug.map[hw + i] == Approx(q[1]).margin(1e-4));
        CHECK(aug.map[2 * hw + i] == Approx(q[2]).margin(1e-4));
    }
}

TEST_CASE("untrained geometry vae has an exact identity pose") {
    vae::GeomConfig cfg;
    cfg.geom_res = 8;
    cfg.base_ch = 2;
    cfg.d_geom = 4;
    cfg.d_pose = 2;
    Rng rng = Rng::stream(13, "init");
    vae::GeometryVae<float> net(cfg, rng);

    auto g = random01({3, 8, 8}, 8);
    auto e = net.encode(g);
    auto p = net.pose_of(e.pose.mu);
    CHECK(p.q->val[0] == 1.0f);
    CHECK(p.q->val[1] == 0.0f);
    CHECK(mean_abs(p.trans->val) == 0.0);

    auto free_d = net.decode_posefree(e.geom.mu);
    auto full_d = net.decode_full(e.geom.mu, e.pose.mu);
    CHECK(max_abs_diff(free_d->val, full_d->val) == 0.0f);
}

TEST_CASE("geometry triplet loss gradient matches finite differences") {
    vae::GeomConfig cfg;
    cfg.geom_res = 8;
    cfg.base_ch = 2;
    cfg.d_geom = 3;
    cfg.d_pose = 2;
    Rng rng = Rng::stream(29, "init");
    vae::GeometryVae<double> net(cfg, rng);
    nudge_params<double>(net, 30);

    Tensor<double> ta = random01({3, 8, 8}, 9).cast<double>();
    Tensor<double> tb = random01({3, 8, 8}, 10).cast<double>();
    Tensor<double> sa = random01({3, 8, 8}, 11).cast<double>();

    auto loss = [&]() {
        return vae::geom_triplet_loss(net, ta, tb, sa, cfg, nullptr, vae::LatentMode::mean)
            .total;
    };
    CHECK(param_fd_worst(net.params(), loss, 14, 31) < 1e-4);
}

TEST_CASE("geometry training smoke run improves the loss and round-trips") {
    Dataset ds = stage::StageModel(tiny_stage()).generate();
    vae::GeomConfig cfg;
    cfg.geom_res = 8;
    cfg.base_ch = 2;
    cfg.d_geom = 4;
    cfg.d_pose = 2;
    cfg.epochs = 4;
    cfg.seed = 5;
    Rng rng = Rng::stream(cfg.seed, "geom_init");
    vae::GeometryVae<float> net(cfg, rng);

    std::ostringstream log;
    train_geometry(net, ds, cfg, &log);
    std::istringstream lines(log.str());
    std::string line, first, last;
    while (std::getline(lines, line)) {
        if (first.empty()) first = line;
        last = line;
    }
    CHECK(nlohmann::json::parse(last).at("loss").get<double>() <
          nlohmann::json::parse(first).at("loss").get<double>());

    std::string dir = "geom_ckpt_test";
    std::filesystem::remove_all(dir);
    vae::save_geometry(dir, net, cfg, "vae_pretrain");
    Rng rng2 = Rng::stream(99, "other");
    vae::GeometryVae<float> net2(vae::load_geometry_config(dir), rng2);
    vae::load_geometry(dir, net2);
    auto pa = net.params(), pb = net2.params();
    for (size_t i = 0; i < pa.size(); ++i)
        CHECK(max_abs_diff(pa[i]->value, pb[i]->value) == 0.0f);
    std::filesystem::remove_all(dir);

    auto [zg, zp] = vae::geom_codes(net, ds.frames[0].geometry, cfg);
    CHECK(zg.numel() == cfg.d_geom);
    Tensor<float> mm = vae::decode_geometry(net, zg, cfg);
    CHECK(mm.shape == ds.frames[0].geometry.shape);
}

TEST_CASE("texture stacks and channel stats") {
    Dataset ds = stage::StageModel(tiny_stage()).generate();
    vae::TexConfig cfg;
    cfg.work_res = 8;
    auto stack = vae::frame_stack(ds.frames[2], cfg);
    REQUIRE(stack.shape == std::vector<int>{7, 8, 8});
    // unit flavor: normal block rows are unit vectors
    long long hw = 64;
    for (long long i = 0; i < hw; ++i) {
        double n2 = 0;
        for (int c = 4; c < 7; ++c) n2 += stack[c * hw + i] * stack[c * hw + i];
        CHECK(n2 == Approx(1.0).margin(2e-2));
    }

    std::vector<Tensor<float>> stacks{stack, vae::frame_stack(ds.frames[3], cfg)};
    auto stats = vae::compute_channel_stats(stacks);
    for (int c = 0; c < 7; ++c) CHECK(stats.stdev[c] >= 1e-3);
    double m = 0;
    for (long long i = 0; i < hw; ++i) m += (stacks[0][i] + stacks[1][i]) / (2.0 * hw);
    CHECK(stats.mean[0] == Approx(m).margin(1e-6));
}

TEST_CASE("zero delta composition reproduces the neutral texture") {
    Dataset ds = stage::StageModel(tiny_stage()).generate();
    auto neutral = vae::neutral_textures(ds);
    Tensor<float> zero = Tensor<float>::zeros({7, 8, 8});
    auto out = vae::compose_texture(neutral, zero);
    CHECK(max_abs_diff(out.diffuse, neutral.diffuse) < 1e-6f);
    CHECK(max_abs_diff(out.specular, neutral.specular) < 1e-6f);
    CHECK(max_abs_diff(out.normal, neutral.normal) < 1e-5f);

    Tensor<float> bad({7, 5, 5});
    CHECK_THROWS_AS(vae::compose_texture(neutral, bad), Error);
}

TEST_CASE("texture loss gradient matches finite differences") {
    vae::TexConfig cfg;
    cfg.work_res = 8;
    cfg.base_ch = 2;
    cfg.d_tex = 3;
    Rng rng = Rng::stream(37, "init");
    vae::TextureVae<double> net(cfg, rng);
    nudge_params<double>(net, 38);

    Dataset ds = stage::StageModel(tiny_stage()).generate();
    Tensor<double> target = vae::frame_stack(ds.frames[1], cfg).cast<double>();
    Tensor<double> neutral = vae::neutral_stack(ds, cfg).cast<double>();
    std::vector<Tensor<float>> stacks{vae::frame_stack(ds.frames[1], cfg),
                                      vae::frame_stack(ds.frames[2], cfg)};
    net.set_stats(vae::compute_channel_stats(stacks));

    auto loss = [&]() {
        return vae::tex_frame_loss(net, target, neutral, cfg, nullptr, vae::LatentMode::mean)
            .total;
    };
    CHECK(param_fd_worst(net.params(), loss, 14, 39) < 1e-4);
}

TEST_CASE("texture training smoke run improves the loss and round-trips") {
    Dataset ds = stage::StageModel(tiny_stage()).generate();
    vae::TexConfig cfg;
    cfg.work_res = 8;
    cfg.base_ch = 2;
    cfg.d_tex = 4;
    cfg.epochs = 12;
    cfg.lr = 3e-3;
    cfg.seed = 5;
    Rng rng = Rng::stream(cfg.seed, "tex_init");
    vae::TextureVae<float> net(cfg, rng);

    std::ostringstream log;
    train_texture(net, ds, cfg, &log);
    std::istringstream lines(log.str());
    std::string line;
    std::vector<double> recs;
    while (std::getline(lines, line))
        recs.push_back(nlohmann::json::parse(line).at("rec").get<double>());
    REQUIRE(recs.size() == 12);
    // sampled latents make single epochs noisy; compare 3-epoch windows
    double head = (recs[0] + recs[1] + recs[2]) / 3;
    double tail = (recs[9] + recs[10] + recs[11]) / 3;
    CHECK(tail < head);

    std::string dir = "tex_ckpt_test";
    std::filesystem::remove_all(dir);
    vae::save_texture(dir, net, cfg, "vae_pretrain");
    Rng rng2 = Rng::stream(99, "other");
    vae::TextureVae<float> net2(vae::load_texture_config(dir), rng2);
    vae::load_texture(dir, net2);
    auto pa = net.params(), pb = net2.params();
    for (size_t i = 0; i < pa.size(); ++i)
        CHECK(max_abs_diff(pa[i]->value, pb[i]->value) == 0.0f);
    for (int c = 0; c < 7; ++c)
        CHECK(net2.stats().mean[c] == Approx(net.stats().mean[c]).margin(1e-12));
    std::filesystem::remove_all(dir);

    // wrinkle field decode and hi-res composition
    auto stack = vae::frame_stack(ds.frames[0], cfg);
    Tensor<float> z = vae::tex_code(net, stack);
    Tensor<float> deltas = vae::decode_texture_field(net, z);
    REQUIRE(deltas.shape == std::vector<int>{7, 8, 8});
    auto hi = vae::compose_texture(vae::neutral_textures(ds), deltas);
    CHECK(hi.diffuse.dim(1) == 16);
    for (long long i = 0; i < hi.diffuse.numel(); ++i) {
        CHECK(hi.diffuse[i] >= 0.0f);
        CHECK(hi.diffuse[i] <= 1.0f);
    }
}

TEST_CASE("latent map sizes, zero init, and gradient") {
    vae::TexConfig tex;
    map::MapConfig cfg;
    cfg.d_expr = 4;
    cfg.d_geom = 3;
    cfg.d_tex = 2;
    cfg.hidden = 8;
    Rng rng = Rng::stream(43, "init");
    map::LatentMap<double> net(cfg, rng);

    Tensor<double> ze = random01({4}, 12).cast<double>();
    auto out = net(nn::leaf(ze, false));
    CHECK(out.geom->val.numel() == 3);
    CHECK(out.tex->val.numel() == 2);
    CHECK(mean_abs(out.geom->val) == 0.0);
    CHECK(mean_abs(out.tex->val) == 0.0);

    nudge_params<double>(net, 44);
    Tensor<double> zg = random01({3}, 13).cast<double>();
    Tensor<double> zt = random01({2}, 14).cast<double>();
    auto loss = [&]() {
        return map::map_loss(net, nn::constant(ze.clone()), nn::constant(zg.clone()),
                             nn::constant(zt.clone()));
    };
    CHECK(param_fd_worst(net.params(), loss, 14, 45) < 1e-4);
}

TEST_CASE("latent map fits a small regression problem") {
    map::MapConfig cfg;
    cfg.d_expr = 4;
    cfg.d_geom = 3;
    cfg.d_tex = 2;
    cfg.hidden = 16;
    Rng rng = Rng::stream(47, "init");
    map::LatentMap<float> net(cfg, rng);

    Rng data = Rng::stream(47, "data");
    std::vector<Tensor<float>> xs, gs, ts;
    for (int n = 0; n < 16; ++n) {
        Tensor<float> x({4}), g({3}), t({2});
        for (int i = 0; i < 4; ++i) x[i] = static_cast<float>(data.uniform(-1.0, 1.0));
        for (int i = 0; i < 3; ++i) g[i] = 0.5f * x[i] - 0.25f * x[3];
        t[0] = 0.3f * x[0] + 0.2f * x[1];
        t[1] = -0.4f * x[2];
        xs.push_back(x);
        gs.push_back(g);
        ts.push_back(t);
    }
    auto params = net.params();
    nn::Adam<float> opt;
    opt.lr = 1e-2;
    double first = -1, last = -1;
    for (int epoch = 0; epoch < 150; ++epoch) {
        double sum = 0;
        for (size_t n = 0; n < xs.size(); ++n) {
            nn::zero_grads(params);
            auto l = map::map_loss(net, nn::constant(xs[n].clone()),
                                   nn::constant(gs[n].clone()), nn::constant(ts[n].clone()));
            nn::backward(l);
            opt.step(params);
            sum += l->val[0];
        }
        if (epoch == 0) first = sum;
        last = sum;
    }
    CHECK(last < 0.05 * first);

    std::string dir = "map_ckpt_test";
    std::filesystem::remove_all(dir);
    map::save_mapping(dir, net, cfg, "mapping");
    Rng rng2 = Rng::stream(53, "other");
    map::LatentMap<float> net2(map::load_mapping_config(dir), rng2);
    map::load_mapping(dir, net2);
    auto pa = net.params(), pb = net2.params();
    for (size_t i = 0; i < pa.size(); ++i)
        CHECK(max_abs_diff(pa[i]->value, pb[i]->value) == 0.0f);
    std::filesystem::remove_all(dir);
}
