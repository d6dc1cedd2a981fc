#include <catch2/catch_amalgamated.hpp>

#include "facet/core/image_ops.hpp"
#include "facet/core/pose.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/nn/ops.hpp"
#include "support/gradcheck.hpp"

using facet::Rng;
using facet::Tensor;
namespace nn = facet::nn;
using Vars = std::vector<nn::Var<double>>;

namespace {

Tensor<double> rand_t(std::vector<int> shape, Rng& rng, double lo = -1, double hi = 1) {
    Tensor<double> t(std::move(shape));
    for (auto& v : *t.store) v = rng.uniform(lo, hi);
    return t;
}

// uniform magnitude in [0.1, 1] with random sign: keeps relu/abs kinks at
// finite-difference distance
Tensor<double> rand_away_from_zero(std::vector<int> shape, Rng& rng) {
    Tensor<double> t(std::move(shape));
    for (auto& v : *t.store) v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 1.0);
    return t;
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("grad: elementwise ops") {
    Rng rng(100);
    auto a = rand_away_from_zero({2, 3, 3}, rng);
    auto b = rand_away_from_zero({2, 3, 3}, rng);

    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::sum_all(nn::mul(nn::add(v[0], v[1]), v[0])); },
                {a, b}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    return nn::sum_all(nn::scale_shift(nn::sub(v[0], v[1]), 1.7, 0.3));
                },
                {a, b}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::sum_all(nn::relu(v[0])); }, {a}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::sum_all(nn::leaky_relu(v[0], 0.2)); }, {a}) <
            kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::sum_all(nn::tanh_op(v[0])); }, {a}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::sum_all(nn::exp_op(v[0])); }, {a}) < kTol);
}

TEST_CASE("grad: squash01 inside the active band") {
    Rng rng(101);
    // values in (-0.35, 0.35) keep x+0.5 away from both clamp corners
    auto a = rand_t({1, 4, 4}, rng, -0.35, 0.35);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    auto w = nn::squash01(v[0]);
                    return nn::sum_all(nn::mul(w, w));
                },
                {a}) < kTol);
}

TEST_CASE("grad: reductions and losses") {
    Rng rng(102);
    auto a = rand_t({3, 4}, rng);
    auto b = rand_t({3, 4}, rng);
    // keep |a-b| >= 0.05 so the l1 kink stays away from the probe
    for (long long i = 0; i < a.numel(); ++i)
        if (std::abs(a[i] - b[i]) < 0.05) b[i] += 0.1;

    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::l1_loss(v[0], v[1]); }, {a, b}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::sum_sq_diff(v[0], v[1]); }, {a, b}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::mse_loss(v[0], v[1]); }, {a, b}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::mean_all(nn::mul(v[0], v[0])); }, {a}) < kTol);
}

TEST_CASE("grad: kl and reparameterization") {
    Rng rng(103);
    auto mu = rand_t({5}, rng);
    auto lv = rand_t({5}, rng, -0.8, 0.8);
    Tensor<double> eps({5});
    for (auto& v : *eps.store) v = rng.normal();

    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::kl_unit(v[0], v[1]); }, {mu, lv}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [eps](const Vars& v) {
                    auto z = nn::reparam(v[0], v[1], eps);
                    return nn::sum_all(nn::mul(z, z));
                },
                {mu, lv}) < kTol);
}

TEST_CASE("grad: softmax cross entropy") {
    Rng rng(104);
    auto l = rand_t({6}, rng, -2, 2);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::softmax_ce(v[0], 2); }, {l}) < kTol);
}

TEST_CASE("grad: linear") {
    Rng rng(105);
    auto W = rand_t({3, 4}, rng);
    auto x = rand_t({4}, rng);
    auto b = rand_t({3}, rng);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    auto y = nn::linear(v[0], v[1], v[2]);
                    return nn::sum_all(nn::mul(y, y));
                },
                {W, x, b}) < kTol);
}

TEST_CASE("grad: conv2d stride 1 and 2") {
    Rng rng(106);
    auto x = rand_t({2, 5, 5}, rng);
    auto W = rand_t({3, 2, 3, 3}, rng);
    auto b = rand_t({3}, rng);
    for (int stride : {1, 2}) {
        REQUIRE(gradcheck::max_rel_err(
                    [stride](const Vars& v) {
                        auto y = nn::conv2d(v[0], v[1], v[2], stride);
                        return nn::sum_all(nn::mul(y, y));
                    },
                    {x, W, b}) < kTol);
    }
}

TEST_CASE("conv2d forward matches a hand-rolled kernel") {
    // 1x3x3 input, 1x1x2x2 kernel, no pad: plain sliding dot product
    auto x = nn::constant(Tensor<double>::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    auto W = nn::constant(Tensor<double>::from({1, 1, 2, 2}, {1, 0, 0, -1}));
    auto b = nn::constant(Tensor<double>::from({1}, {0.5}));
    auto y = nn::conv2d(x, W, b, 1, 0);
    REQUIRE(y->val.shape == std::vector<int>{1, 2, 2});
    REQUIRE(y->val.at(0, 0, 0) == Catch::Approx(1 - 5 + 0.5));
    REQUIRE(y->val.at(0, 1, 1) == Catch::Approx(5 - 9 + 0.5));
}

TEST_CASE("grad: upsample, slice, concat, reshape") {
    Rng rng(107);
    auto a = rand_t({3, 2, 2}, rng);
    auto b = rand_t({2, 2, 2}, rng);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    auto u = nn::upsample_nearest2(v[0]);
                    return nn::sum_all(nn::mul(u, u));
                },
                {a}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    auto c = nn::concat0(std::vector{v[0], v[1]});
                    auto s = nn::slice0(c, 1, 3);
                    return nn::sum_all(nn::mul(s, s));
                },
                {a, b}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    auto r = nn::reshape(v[0], {12});
                    return nn::sum_sq(r);
                },
                {a}) < kTol);
}

TEST_CASE("grad: spatial gradient and rms penalties") {
    Rng rng(108);
    auto f = rand_t({2, 4, 4}, rng);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::rms_field(v[0]); }, {f}) < kTol);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) { return nn::rms_field(nn::spatial_grad(v[0])); }, {f}) <
            kTol);
}

TEST_CASE("rms of a constant (+2,0) flow is 2 with zero-gradient field") {
    Tensor<double> flow = Tensor<double>::zeros({2, 8, 8});
    for (int i = 0; i < 64; ++i) flow[i] = 2.0;
    auto F = nn::constant(flow);
    REQUIRE(nn::rms_field(F)->val[0] == Catch::Approx(2.0).epsilon(1e-6));
    REQUIRE(nn::rms_field(nn::spatial_grad(F))->val[0] == Catch::Approx(0.0).margin(1e-5));
}

TEST_CASE("grad: mul_bc broadcast wrinkle shading") {
    Rng rng(109);
    auto img = rand_t({3, 3, 3}, rng);
    auto w = rand_t({1, 3, 3}, rng);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    auto y = nn::mul_bc(v[0], v[1]);
                    return nn::sum_all(nn::mul(y, y));
                },
                {img, w}) < kTol);
}

TEST_CASE("grad: grid_warp in image and flow") {
    Rng rng(110);
    auto img = rand_t({2, 5, 5}, rng);
    // fractional flows with |f| in [0.2, 0.45]: off-integer (bilinear kinks)
    // and small enough that only the outermost ring can clamp
    Tensor<double> flow({2, 5, 5});
    for (auto& v : *flow.store)
        v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.2, 0.45);
    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    auto y = nn::grid_warp(v[0], v[1]);
                    return nn::sum_all(nn::mul(y, y));
                },
                {img, flow}, 1e-6) < kTol);
}

TEST_CASE("grid_warp forward equals apply_warp") {
    Rng rng(111);
    Tensor<float> img({3, 6, 6});
    for (auto& v : *img.store) v = static_cast<float>(rng.uniform());
    Tensor<float> flow({2, 6, 6});
    for (auto& v : *flow.store) v = static_cast<float>(rng.uniform(-1.2, 1.2));
    auto node = nn::grid_warp(nn::constant(img), nn::constant(flow));
    Tensor<float> direct = facet::apply_warp(img, flow);
    REQUIRE(facet::max_abs_diff(node->val, direct) < 1e-6);
}

TEST_CASE("grad: quaternion normalize and rigid transform") {
    Rng rng(112);
    Tensor<double> q = Tensor<double>::from({4}, {0.9, 0.2, -0.3, 0.15});
    Tensor<double> t = Tensor<double>::from({3}, {0.4, -0.2, 0.7});
    auto geo = rand_t({3, 3, 3}, rng);

    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    auto qn = nn::quat_normalize(v[0]);
                    return nn::sum_all(nn::mul(qn, qn));  // == 1, flat: zero grads
                },
                {q}) < kTol);

    REQUIRE(gradcheck::max_rel_err(
                [](const Vars& v) {
                    auto out = nn::apply_rigid(v[2], nn::quat_normalize(v[0]), v[1]);
                    return nn::sum_all(nn::mul(out, out));
                },
                {q, t, geo}) < kTol);
}

TEST_CASE("apply_rigid matches the pose math on a probe map") {
    Rng rng(113);
    facet::PoseTransform p = facet::random_pose(rng, 0.5, 2.0);
    Tensor<double> q = Tensor<double>::from({4}, {p.rot.w, p.rot.x, p.rot.y, p.rot.z});
    Tensor<double> t = Tensor<double>::from({3}, {p.trans[0], p.trans[1], p.trans[2]});
    auto geo = rand_t({3, 4, 4}, rng, -3, 3);
    auto out = nn::apply_rigid(nn::constant(geo), nn::constant(q), nn::constant(t));
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            facet::Vec3 v{geo.at(0, y, x), geo.at(1, y, x), geo.at(2, y, x)};
            facet::Vec3 r = p.apply(v);
            for (int c = 0; c < 3; ++c)
                REQUIRE(out->val.at(c, y, x) == Catch::Approx(r[c]).margin(1e-12));
        }
}

TEST_CASE("grad: composite stabilization-style objective") {
    // warp + broadcast-multiply + l1 + rms priors, all at once
    Rng rng(114);
    auto tex = rand_t({3, 4, 4}, rng, 0.1, 0.9);
    auto neutral = rand_t({3, 4, 4}, rng, 0.1, 0.9);
    Tensor<double> flow({2, 4, 4});
    for (auto& v : *flow.store)
        v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.2, 0.4);
    auto wr = rand_t({1, 4, 4}, rng, -0.3, 0.3);

    REQUIRE(gradcheck::max_rel_err(
                [neutral](const Vars& v) {
                    auto warped = nn::grid_warp(v[0], v[1]);
                    auto wrinkle = nn::squash01(v[2]);
                    auto target = nn::mul_bc(nn::constant(neutral), wrinkle);
                    auto fid = nn::l1_loss(warped, target);
                    auto dis = nn::add(nn::rms_field(v[1]),
                                       nn::rms_field(nn::spatial_grad(v[1])));
                    return nn::wsum<double>({{1.0, fid}, {0.1, dis}});
                },
                {tex, flow, wr}, 1e-6) < kTol);
}
