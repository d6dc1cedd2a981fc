#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/image_ops.hpp"
#include "facet/core/pose.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/dataset.hpp"
#include "facet/io/png_io.hpp"

namespace facet::stage {

// Deterministic procedural capture stand-in. Every field below is an analytic
// function of (u, v) in [0,1]^2, so tests can re-evaluate the recipe directly
// instead of trusting the generator. Units are millimeters for geometry,
// [0,1] for images and textures, pixels for flow.
//
// Recipe (fixed):
//   neutral shell   G0(u,v) = (160(u-.5), 200(v-.5), 40(1 - ru^2 - rv^2)),
//                   ru = 2(u-.5), rv = 2(v-.5)
//   blendshapes     B_j = amp * exp(-|uv - a_j|^2 / (2*0.08^2)) * dir_j, amp ~ 8 mm
//   wrinkles        W_j = 0.35 sin(2*pi*6*(cos(phi_j) u + sin(phi_j) v) + rho_j)
//                         * exp(-|uv - a_j|^2 / (2*0.16^2))
//   wrinkle scale   w(e) = clip(1 + sum_j e_j W_j, 0.3, 1.0)
//   expression      e_j(t) = sin(theta_j(t/T) - theta_j(0)),
//                   theta_j(tau) = 1.1 sin(2 pi f1 tau + psi) + 0.6 sin(2 pi f2 tau + chi)
//   head pose       angle(tau) = 1.5deg * (sin(2 pi f tau + p) - sin(p)) about a fixed
//                   axis, translation 2mm * (sin(...) - sin(.)) per axis; identity at t=0
//   views           yaw_0 = 0, then alternating -/+ (20 + 15*floor((i-1)/2)) degrees
//   image           backward-resampled, shaded UV map (see render_view)
//   jitter          smooth random flow: low-res gaussian N(0, sigma_j) upsampled
//                   bilinearly, magnitude clamped to 3*sigma_j. Textures are warped
//                   by J_gen; the stored ground-truth field is the corrective flow
//                   -J_gen (what a stabilizer should predict).
// Per-performer variation (anchor offsets, direction/orientation/phase offsets,
// amplitude scale) derives from a hash of performer_id alone, so each identity
// is stable across seeds; trajectories and jitter derive from the seed.

struct StageConfig {
    uint64_t seed = 7;
    int num_frames = 600;
    int num_views = 4;
    int image_res = 64;
    int geom_res = 32;
    int tex_res = 128;
    int expr_dims = 6;
    double jitter_amplitude = 1.5;  // sigma_j, pixels at tex_res
    std::string performer_id = "alpha";
    double split_fraction = 0.2;

    void validate() const {
        auto pow2 = [](int n) { return n >= 2 && (n & (n - 1)) == 0; };
        if (num_frames < 2) throw Error(errc::bad_args, "num_frames must be >= 2");
        if (num_views < 2) throw Error(errc::bad_args, "num_views must be >= 2");
        if (!pow2(image_res) || !pow2(geom_res) || !pow2(tex_res))
            throw Error(errc::bad_args, "resolutions must be powers of two");
        if (expr_dims < 1) throw Error(errc::bad_args, "expr_dims must be >= 1");
        if (jitter_amplitude < 0) throw Error(errc::bad_args, "jitter_amplitude must be >= 0");
        if (split_fraction < 0 || split_fraction > 0.5)
            throw Error(errc::bad_args, "split_fraction must be in [0, 0.5]");
    }

    nlohmann::json to_json() const {
        return {{"seed", seed},           {"num_frames", num_frames},
                {"num_views", num_views}, {"image_res", image_res},
                {"geom_res", geom_res},   {"tex_res", tex_res},
                {"expr_dims", expr_dims}, {"jitter_amplitude", jitter_amplitude},
                {"performer_id", performer_id}, {"split_fraction", split_fraction}};
    }

    static StageConfig from_json(const nlohmann::json& j) {
        StageConfig c;
        c.seed = j.value("seed", c.seed);
        c.num_frames = j.value("num_frames", c.num_frames);
        c.num_views = j.value("num_views", c.num_views);
        c.image_res = j.value("image_res", c.image_res);
        c.geom_res = j.value("geom_res", c.geom_res);
        c.tex_res = j.value("tex_res", c.tex_res);
        c.expr_dims = j.value("expr_dims", c.expr_dims);
        c.jitter_amplitude = j.value("jitter_amplitude", c.jitter_amplitude);
        c.performer_id = j.value("performer_id", c.performer_id);
        c.split_fraction = j.value("split_fraction", c.split_fraction);
        return c;
    }
};

class StageModel {
public:
    explicit StageModel(StageConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const int K = cfg_.expr_dims;

        // identity-determined basis (hash of performer_id only)
        uint64_t h = 1469598103934665603ull;
        for (char c : cfg_.performer_id) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        Rng idr(Rng::splitmix(h));
        dir_offset_ = idr.uniform(0, 2 * kPi);
        amp_scale_ = idr.uniform(0.75, 1.25);
        wrinkle_offset_ = idr.uniform(0, 2 * kPi);
        for (int k = 0; k < 3; ++k) neutral_phase_[k] = idr.uniform(0, 2 * kPi);
        anchors_.resize(K);
        wrinkle_phase_.resize(K);
        static constexpr double kBase[6][2] = {{0.32, 0.70}, {0.68, 0.70}, {0.32, 0.58},
                                               {0.68, 0.58}, {0.40, 0.28}, {0.60, 0.28}};
        for (int j = 0; j < K; ++j) {
            double au = kBase[j % 6][0] + 0.06 * (j / 6) * std::cos(2.4 * j);
            double av = kBase[j % 6][1] + 0.06 * (j / 6) * std::sin(2.4 * j);
            anchors_[j][0] = au + idr.uniform(-0.03, 0.03);
            anchors_[j][1] = av + idr.uniform(-0.03, 0.03);
            wrinkle_phase_[j] = idr.uniform(0, 2 * kPi);
        }

        // seed-determined trajectories
        Rng er = Rng::stream(cfg_.seed, "expr");
        f1_.resize(K);
        f2_.resize(K);
        psi_.resize(K);
        chi_.resize(K);
        theta0_.resize(K);
        for (int j = 0; j < K; ++j) {
            f1_[j] = 1 + er.uniform_int(4);
            psi_[j] = er.uniform(0, 2 * kPi);
            f2_[j] = 2 + er.uniform_int(5);
            chi_[j] = er.uniform(0, 2 * kPi);
            theta0_[j] = theta(j, 0.0);
        }
        Rng pr = Rng::stream(cfg_.seed, "pose");
        pose_axis_ = normalized(Vec3{pr.normal(), pr.normal(), pr.normal()});
        if (norm(pose_axis_) < 1e-9) pose_axis_ = Vec3{0, 0, 1};
        pose_freq_ = 1 + pr.uniform_int(2);
        pose_phase_ = pr.uniform(0, 2 * kPi);
        for (int k = 0; k < 3; ++k) {
            trans_freq_[k] = 1 + pr.uniform_int(3);
            trans_phase_[k] = pr.uniform(0, 2 * kPi);
        }
    }

    const StageConfig& config() const { return cfg_; }

    // ---- analytic fields ----

    Vec3 g0(double u, double v) const {
        double ru = 2 * (u - 0.5), rv = 2 * (v - 0.5);
        return {160 * (u - 0.5), 200 * (v - 0.5), 40 * (1 - ru * ru - rv * rv)};
    }

    Vec3 blendshape(int j, double u, double v) const {
        double du = u - anchors_[j][0], dv = v - anchors_[j][1];
        double g = std::exp(-(du * du + dv * dv) / (2 * 0.08 * 0.08));
        double a = 2.399963229728653 * j + dir_offset_;
        Vec3 dir = normalized(Vec3{0.2 * std::cos(a), 0.2 * std::sin(a), 1.0});
        return (8.0 * amp_scale_ * g) * dir;
    }

    Vec3 geometry_point(const std::vector<float>& e, double u, double v) const {
        Vec3 p = g0(u, v);
        for (size_t j = 0; j < e.size(); ++j) p = p + static_cast<double>(e[j]) * blendshape(static_cast<int>(j), u, v);
        return p;
    }

    double wrinkle_pattern(int j, double u, double v) const {
        double du = u - anchors_[j][0], dv = v - anchors_[j][1];
        double env = std::exp(-(du * du + dv * dv) / (2 * 0.16 * 0.16));
        double phi = 2 * kPi * j / cfg_.expr_dims + wrinkle_offset_;
        double s = std::sin(2 * kPi * 6.0 * (std::cos(phi) * u + std::sin(phi) * v) +
                            wrinkle_phase_[j]);
        return 0.35 * s * env;
    }

    double wrinkle(const std::vector<float>& e, double u, double v) const {
        double w = 1.0;
        for (size_t j = 0; j < e.size(); ++j)
            w += static_cast<double>(e[j]) * wrinkle_pattern(static_cast<int>(j), u, v);
        return std::min(1.0, std::max(0.3, w));
    }

    std::array<double, 3> neutral_rgb(double u, double v) const {
        static constexpr double base[3] = {0.55, 0.45, 0.40};
        std::array<double, 3> out{};
        for (int k = 0; k < 3; ++k) {
            double c = base[k] +
                       0.12 * std::sin(2 * kPi * 3 * u + neutral_phase_[0] + 0.7 * k) *
                           std::sin(2 * kPi * 3 * v + neutral_phase_[1] + 0.4 * k) +
                       0.08 * std::sin(2 * kPi * 7 * (u + v) + neutral_phase_[2] + 0.9 * k);
            out[k] = std::min(0.95, std::max(0.05, c));
        }
        return out;
    }

    static double specular_of(double w) {
        return std::min(1.0, std::max(0.0, 0.3 + 0.5 * (1.0 - w)));
    }

    // ---- trajectories ----

    std::vector<float> expr_at(int t) const {
        check_t(t);
        std::vector<float> e(cfg_.expr_dims);
        double tau = static_cast<double>(t) / cfg_.num_frames;
        for (int j = 0; j < cfg_.expr_dims; ++j)
            e[j] = static_cast<float>(std::sin(theta(j, tau) - theta0_[j]));
        return e;
    }

    PoseTransform pose_at(int t) const {
        check_t(t);
        double tau = static_cast<double>(t) / cfg_.num_frames;
        double deg = 1.5 * (std::sin(2 * kPi * pose_freq_ * tau + pose_phase_) -
                            std::sin(pose_phase_));
        Vec3 tr;
        for (int k = 0; k < 3; ++k)
            tr[k] = 2.0 * (std::sin(2 * kPi * trans_freq_[k] * tau + trans_phase_[k]) -
                           std::sin(trans_phase_[k]));
        return {Quat::from_axis_angle(pose_axis_, deg * kPi / 180.0), tr};
    }

    double view_yaw_deg(int i) const {
        if (i < 0 || i >= cfg_.num_views) throw Error(errc::bounds, "view index out of range");
        if (i == 0) return 0.0;
        double mag = 20.0 + 15.0 * ((i - 1) / 2);
        return (i % 2 == 1) ? -mag : mag;
    }

    // ---- sampled maps ----

    Tensor<float> geometry_map(const std::vector<float>& e, const PoseTransform& pose) const {
        int R = cfg_.geom_res;
        Tensor<float> g({3, R, R});
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                Vec3 p = pose.apply(geometry_point(e, grid_u(x, R), grid_u(y, R)));
                for (int c = 0; c < 3; ++c) g.at(c, y, x) = static_cast<float>(p[c]);
            }
        return g;
    }

    Tensor<float> clean_diffuse(const std::vector<float>& e) const {
        int R = cfg_.tex_res;
        Tensor<float> d({3, R, R});
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                double u = texel_u(x, R), v = texel_u(y, R);
                double w = wrinkle(e, u, v);
                auto rgb = neutral_rgb(u, v);
                for (int c = 0; c < 3; ++c)
                    d.at(c, y, x) = static_cast<float>(std::min(1.0, std::max(0.0, w * rgb[c])));
            }
        return d;
    }

    Tensor<float> clean_specular(const std::vector<float>& e) const {
        int R = cfg_.tex_res;
        Tensor<float> s({1, R, R});
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x)
                s.at(0, y, x) =
                    static_cast<float>(specular_of(wrinkle(e, texel_u(x, R), texel_u(y, R))));
        return s;
    }

    // Tangent-space normal from the wrinkle field's forward-difference slope,
    // n = normalize(-6 dw/du, -6 dw/dv, 1), stored as (n+1)/2.
    Tensor<float> clean_normal(const std::vector<float>& e) const {
        int R = cfg_.tex_res;
        Tensor<float> w({1, R, R});
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x)
                w.at(0, y, x) = static_cast<float>(wrinkle(e, texel_u(x, R), texel_u(y, R)));
        Tensor<float> n({3, R, R});
        double h = 1.0 / R;
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                int x1 = std::min(x + 1, R - 1), x0 = x1 - 1;
                int y1 = std::min(y + 1, R - 1), y0 = y1 - 1;
                double dwdu = (w.at(0, y, x1) - w.at(0, y, x0)) / h;
                double dwdv = (w.at(0, y1, x) - w.at(0, y0, x)) / h;
                Vec3 nv = normalized(Vec3{-6.0 * dwdu, -6.0 * dwdv, 1.0});
                for (int c = 0; c < 3; ++c)
                    n.at(c, y, x) = static_cast<float>(0.5 * (nv[c] + 1.0));
            }
        return n;
    }

    // The raw warp applied to clean textures for frame t (NOT the stored
    // ground truth, which is its negation).
    Tensor<float> jitter_gen(int t) const {
        check_t(t);
        int R = cfg_.tex_res;
        double sj = cfg_.jitter_amplitude;
        if (sj == 0) return Tensor<float>::zeros({2, R, R});
        int L = std::max(2, R / 8);
        Rng jr = Rng::stream(cfg_.seed, "jitter", static_cast<uint64_t>(t));
        Tensor<float> low({2, L, L});
        for (auto& v : *low.store) v = static_cast<float>(sj * jr.normal());
        Tensor<float> f = upsample_bilinear(low, R / L);
        for (long long i = 0; i < static_cast<long long>(R) * R; ++i) {
            double fx = f[i], fy = f[static_cast<long long>(R) * R + i];
            double m = std::sqrt(fx * fx + fy * fy);
            if (m > 3 * sj) {
                double s = 3 * sj / m;
                f[i] = static_cast<float>(fx * s);
                f[static_cast<long long>(R) * R + i] = static_cast<float>(fy * s);
            }
        }
        return f;
    }

    // Backward-resampled shaded view. For output pixel (u', v'):
    //   z-hat   = (z of posed point at (u',v') - 20) / 60
    //   u_src   = 0.5 + (u'-0.5)/cos(yaw) - 0.15 sin(yaw) z-hat - tx/160
    //   v_src   = v' - ty/200,   both clamped to [0,1]
    //   normal  = normalize(dQ/du x dQ/dv), Q = R_yaw(posed point), forward
    //             differences with h = 1/image_res
    //   pixel   = clamp01(w(e) * N) * (0.25 + 0.75 max(0, n . l)),
    //             l = normalize(0.3, 0.4, 1)
    // Foreshortening, parallax, shading, and translation make the image pose-
    // and view-dependent without a mesh rasterizer.
    Tensor<float> render_view(const std::vector<float>& e, const PoseTransform& pose,
                              double yaw_deg) const {
        int s = cfg_.image_res;
        double th = yaw_deg * kPi / 180.0;
        double c = std::cos(th), sn = std::sin(th);
        Vec3 l = normalized(Vec3{0.3, 0.4, 1.0});
        double h = 1.0 / s;
        auto posed = [&](double u, double v) { return pose.apply(geometry_point(e, u, v)); };
        auto rotated = [&](double u, double v) {
            Vec3 p = posed(u, v);
            return Vec3{c * p[0] + sn * p[2], p[1], -sn * p[0] + c * p[2]};
        };
        Tensor<float> img({3, s, s});
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                double up = texel_u(x, s), vp = texel_u(y, s);
                double zh = (posed(up, vp)[2] - 20.0) / 60.0;
                double us = 0.5 + (up - 0.5) / c - 0.15 * sn * zh - pose.trans[0] / 160.0;
                double vs = vp - pose.trans[1] / 200.0;
                us = std::min(1.0, std::max(0.0, us));
                vs = std::min(1.0, std::max(0.0, vs));
                Vec3 q0 = rotated(us, vs);
                Vec3 du = (1.0 / h) * (rotated(us + h, vs) - q0);
                Vec3 dv = (1.0 / h) * (rotated(us, vs + h) - q0);
                Vec3 n = normalized(cross(du, dv));
                double shade = 0.25 + 0.75 * std::max(0.0, dot(n, l));
                double w = wrinkle(e, us, vs);
                auto rgb = neutral_rgb(us, vs);
                for (int ch = 0; ch < 3; ++ch) {
                    double a = std::min(1.0, std::max(0.0, w * rgb[ch]));
                    img.at(ch, y, x) = static_cast<float>(std::min(1.0, a * shade));
                }
            }
        return img;
    }

    // ---- full dataset ----

    Dataset generate() const {
        Dataset ds;
        ds.performer_id = cfg_.performer_id;
        ds.config_echo = cfg_.to_json();
        ds.num_views = cfg_.num_views;
        for (int i = 0; i < cfg_.num_views; ++i) ds.view_yaws_deg.push_back(view_yaw_deg(i));

        std::vector<float> e0(cfg_.expr_dims, 0.f);
        ds.neutral_diffuse = clean_diffuse(e0);
        ds.neutral_specular = clean_specular(e0);
        ds.neutral_normal = clean_normal(e0);
        {
            int R = cfg_.geom_res;
            ds.neutral_geometry = Tensor<float>({3, R, R});
            for (int y = 0; y < R; ++y)
                for (int x = 0; x < R; ++x) {
                    Vec3 p = g0(grid_u(x, R), grid_u(y, R));
                    for (int ci = 0; ci < 3; ++ci)
                        ds.neutral_geometry.at(ci, y, x) = static_cast<float>(p[ci]);
                }
        }

        int every = cfg_.split_fraction > 0
                        ? static_cast<int>(std::lround(1.0 / cfg_.split_fraction))
                        : 0;
        for (int t = 0; t < cfg_.num_frames; ++t) {
            Frame f;
            f.t = t;
            f.gt.expr = expr_at(t);
            f.gt.pose = pose_at(t);
            f.gt.frame_index = t;
            f.is_test = every > 0 && t % every == every - 1;

            Tensor<float> jg = jitter_gen(t);
            f.diffuse = apply_warp(clean_diffuse(f.gt.expr), jg);
            f.specular = apply_warp(clean_specular(f.gt.expr), jg);
            f.normal = apply_warp(clean_normal(f.gt.expr), jg);
            f.jitter = Tensor<float>({2, cfg_.tex_res, cfg_.tex_res});
            for (long long i = 0; i < jg.numel(); ++i) f.jitter[i] = -jg[i];
            f.geometry = geometry_map(f.gt.expr, f.gt.pose);
            for (int i = 0; i < cfg_.num_views; ++i) {
                Tensor<float> img = render_view(f.gt.expr, f.gt.pose, view_yaw_deg(i));
                quantize16_inplace(img);  // in-memory equals the PNG round trip
                f.images.push_back(std::move(img));
            }
            ds.frames.push_back(std::move(f));
        }
        return ds;
    }

    static double texel_u(int x, int res) { return (x + 0.5) / res; }
    static double grid_u(int x, int res) { return static_cast<double>(x) / (res - 1); }

private:
    static constexpr double kPi = 3.14159265358979323846;

    double theta(int j, double tau) const {
        return 1.1 * std::sin(2 * kPi * f1_[j] * tau + psi_[j]) +
               0.6 * std::sin(2 * kPi * f2_[j] * tau + chi_[j]);
    }

    void check_t(int t) const {
        if (t < 0 || t >= cfg_.num_frames)
            throw Error(errc::bounds, "frame index out of range");
    }

    StageConfig cfg_;
    // identity basis
    double dir_offset_ = 0, amp_scale_ = 1, wrinkle_offset_ = 0;
    double neutral_phase_[3] = {0, 0, 0};
    std::vector<std::array<double, 2>> anchors_;
    std::vector<double> wrinkle_phase_;
    // seed trajectories
    std::vector<int> f1_, f2_;
    std::vector<double> psi_, chi_, theta0_;
    Vec3 pose_axis_;
    int pose_freq_ = 1;
    double pose_phase_ = 0;
    int trans_freq_[3] = {1, 1, 1};
    double trans_phase_[3] = {0, 0, 0};
};

inline Dataset generate_dataset(const StageConfig& cfg) { return StageModel(cfg).generate(); }

}  // namespace facet::stage
