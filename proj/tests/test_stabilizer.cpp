#include <sstream>

#include <filesystem>

#include <catch2/catch_amalgamated.hpp>

#include "facet/stabilize/stabilizer.hpp"
#include "facet/stage/synthetic.hpp"
#include "support/gradcheck.hpp"

using namespace facet;
using Catch::Approx;

namespace {

Tensor<double> filled(std::vector<int> shape, uint64_t salt) {
    Rng r = Rng::stream(99, "fill", salt);
    Tensor<double> t(std::move(shape));
    for (long long i = 0; i < t.numel(); ++i) t[i] = r.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("clamp01 values and gradient") {
    Tensor<double> x({1, 2, 2});
    x[0] = -0.5;
    x[1] = 0.25;
    x[2] = 0.75;
    x[3] = 1.5;
    auto v = nn::clamp01(nn::leaf(x, false));
    CHECK(v->val[0] == 0.0);
    CHECK(v->val[1] == 0.25);
    CHECK(v->val[2] == 0.75);
    CHECK(v->val[3] == 1.0);

    auto build = [](std::vector<nn::Var<double>>& in) {
        return nn::sum_sq(nn::clamp01(in[0]));
    };
    CHECK(gradcheck::max_rel_err(build, {x}) < 1e-6);
}

TEST_CASE("normalize3 produces unit vectors and passes gradcheck") {
    auto x = filled({3, 3, 2}, 1);
    for (long long i = 0; i < x.numel(); ++i) x[i] += (x[i] >= 0 ? 0.4 : -0.4);
    auto v = nn::normalize3(nn::leaf(x, false));
    int hw = 3 * 2;
    for (int p = 0; p < hw; ++p) {
        double n2 = 0;
        for (int c = 0; c < 3; ++c) n2 += v->val[c * hw + p] * v->val[c * hw + p];
        CHECK(n2 == Approx(1.0).margin(1e-12));
    }

    auto w = filled({3, 3, 2}, 2);
    auto build = [&](std::vector<nn::Var<double>>& in) {
        return nn::sum_sq_diff(nn::normalize3(in[0]), nn::constant(w.clone()));
    };
    CHECK(gradcheck::max_rel_err(build, {x}) < 1e-5);
}

TEST_CASE("masked_l1 ignores masked-out texels") {
    auto a = filled({2, 4, 4}, 3);
    auto b = filled({2, 4, 4}, 4);
    Tensor<double> mask = Tensor<double>::zeros({1, 4, 4});
    mask[1] = 1;
    mask[5] = 1;
    mask[10] = 1;

    auto got = nn::masked_l1(nn::leaf(a, false), nn::leaf(b, false), mask);
    double want = 0;
    for (int c = 0; c < 2; ++c)
        for (int p = 0; p < 16; ++p)
            if (mask[p] > 0) want += std::abs(a[c * 16 + p] - b[c * 16 + p]);
    want /= 2 * 3;  // channels * active texels
    CHECK(got->val[0] == Approx(want).epsilon(1e-12));

    // all-zero mask: exactly zero, and no gradient flows
    auto z = nn::masked_l1(nn::leaf(a, true), nn::leaf(b, false), Tensor<double>::zeros({1, 4, 4}));
    CHECK(z->val[0] == 0.0);

    auto build = [&](std::vector<nn::Var<double>>& in) {
        return nn::masked_l1(in[0], in[1], mask);
    };
    CHECK(gradcheck::max_rel_err(build, {a, b}) < 1e-6);
}

TEST_CASE("append_channel adds a constant plane") {
    auto x = filled({2, 3, 3}, 5);
    auto y = nn::append_channel(nn::leaf(x, false), 0.75);
    REQUIRE(y->val.dim(0) == 3);
    for (int p = 0; p < 9; ++p) CHECK(y->val[2 * 9 + p] == 0.75);
    for (int p = 0; p < 18; ++p) CHECK(y->val[p] == x[p]);

    auto build = [](std::vector<nn::Var<double>>& in) {
        return nn::sum_sq(nn::append_channel(in[0], 0.3));
    };
    CHECK(gradcheck::max_rel_err(build, {x}) < 1e-6);
}

TEST_CASE("untrained stabilizer predicts zero flow and mid wrinkle") {
    Rng rng = Rng::stream(5, "init");
    stab::StabNet<float> net(4, rng);
    Rng fill = Rng::stream(5, "tex");
    Tensor<float> tex({3, 16, 16}), neutral({3, 16, 16});
    for (long long i = 0; i < tex.numel(); ++i) {
        tex[i] = static_cast<float>(fill.uniform());
        neutral[i] = static_cast<float>(fill.uniform());
    }
    auto out = net.forward(tex, neutral);
    CHECK(mean_abs(out.flow->val) == 0.0);
    for (long long i = 0; i < out.wrinkle->val.numel(); ++i)
        CHECK(out.wrinkle->val[i] == 0.5f);

    // zero flow leaves every channel bit-identical after resampling
    Frame f;
    f.diffuse = tex;
    f.specular = Tensor<float>({1, 16, 16});
    f.normal = Tensor<float>({3, 16, 16});
    for (long long i = 0; i < f.specular.numel(); ++i) f.specular[i] = 0.25f;
    for (long long i = 0; i < f.normal.numel(); ++i) f.normal[i] = 0.5f;
    auto s = stabilize_frame(net, f, neutral, 16);
    CHECK(max_abs_diff(s.diffuse, tex) == 0.0f);
    CHECK(max_abs_diff(s.specular, f.specular) == 0.0f);
    CHECK(max_abs_diff(s.normal, f.normal) == 0.0f);
}

TEST_CASE("stabilizer pair loss matches finite differences") {
    Rng rng = Rng::stream(21, "init");
    stab::StabNet<double> net(2, rng);
    stab::StabConfig cfg;
    cfg.w_fid = 1.0;
    cfg.w_tem = 0.5;
    cfg.w_dis = 0.1;

    Tensor<double> ta = filled({3, 8, 8}, 11), tb = filled({3, 8, 8}, 12),
                   nt = filled({3, 8, 8}, 13);
    for (long long i = 0; i < ta.numel(); ++i) {
        ta[i] = 0.5 + 0.4 * ta[i];
        tb[i] = 0.5 + 0.4 * tb[i];
        nt[i] = 0.5 + 0.4 * nt[i];
    }

    // nudge heads off zero so flow/wrinkle gradients are exercised
    auto params = net.params();
    Rng nud = Rng::stream(21, "nudge");
    for (auto* p : params)
        for (long long i = 0; i < p->value.numel(); ++i)
            p->value[i] += 0.02 * nud.uniform(-1.0, 1.0);

    nn::zero_grads(params);
    auto losses = stab::stab_pair_loss(net, ta, tb, nt, cfg);
    nn::backward(losses.total);

    Rng pick = Rng::stream(21, "pick");
    double worst = 0;
    for (int trial = 0; trial < 12; ++trial) {
        auto* p = params[pick.uniform_int(static_cast<int>(params.size()))];
        long long i = pick.uniform_int(static_cast<int>(p->value.numel()));
        double orig = p->value[i], h = 1e-5;
        p->value[i] = orig + h;
        double fp = stab::stab_pair_loss(net, ta, tb, nt, cfg).total->val[0];
        p->value[i] = orig - h;
        double fm = stab::stab_pair_loss(net, ta, tb, nt, cfg).total->val[0];
        p->value[i] = orig;
        double num = (fp - fm) / (2 * h);
        double err = std::abs(p->grad[i] - num) /
                     std::max({1e-3, std::abs(num), std::abs(p->grad[i])});
        worst = std::max(worst, err);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("short stabilizer training lowers the loss and round-trips") {
    stage::StageConfig sc;
    sc.seed = 31;
    sc.num_frames = 12;
    sc.num_views = 2;
    sc.image_res = 8;
    sc.geom_res = 8;
    sc.tex_res = 16;
    sc.expr_dims = 3;
    sc.jitter_amplitude = 1.0;
    stage::StageModel stagem(sc);
    Dataset ds = stagem.generate();

    stab::StabConfig cfg;
    cfg.tex_res = sc.tex_res;
    cfg.base_ch = 2;
    cfg.epochs = 6;
    cfg.lr = 2e-3;
    cfg.seed = 31;

    Rng rng = Rng::stream(cfg.seed, "stab_init");
    stab::StabNet<float> net(cfg.base_ch, rng);

    // loss of the first epoch vs the last from the training log
    std::ostringstream log;
    train_stabilizer(net, ds, cfg, &log);
    std::istringstream lines(log.str());
    std::string line, first, last;
    while (std::getline(lines, line)) {
        if (first.empty()) first = line;
        last = line;
    }
    double l0 = nlohmann::json::parse(first).at("loss").get<double>();
    double l1 = nlohmann::json::parse(last).at("loss").get<double>();
    CHECK(l1 < l0);

    auto rep = stab::stability_report(net, ds, cfg.tex_res);
    CHECK(rep.at("l1_before").get<double>() > 0);
    CHECK(std::isfinite(rep.at("flow_cosine").get<double>()));

    std::string dir = "stab_ckpt_test";
    std::filesystem::remove_all(dir);
    stab::save_stabilizer(dir, net, cfg);
    Rng rng2 = Rng::stream(777, "other");
    stab::StabNet<float> net2(cfg.base_ch, rng2);
    stab::StabConfig back = stab::load_stabilizer(dir, net2);
    CHECK(back.epochs == cfg.epochs);
    auto pa = net.params(), pb = net2.params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i)
        CHECK(max_abs_diff(pa[i]->value, pb[i]->value) == 0.0f);
    std::filesystem::remove_all(dir);
}
