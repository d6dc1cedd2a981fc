#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "facet/core/error.hpp"
#include "facet/core/rng.hpp"
#include "facet/core/tensor.hpp"
#include "facet/io/dataset.hpp"
#include "facet/train/train.hpp"
#include "facet/infer/infer.hpp"

namespace facet::eval {

// ---- scalar statistics ------------------------------------------------

inline double rmse(const Tensor<float>& a, const Tensor<float>& b) {
    if (!a.same_shape(b)) throw Error(errc::shape_mismatch, "rmse shape mismatch");
    double s = 0;
    for (long long i = 0; i < a.numel(); ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(a.numel()));
}

inline double bbox_diag(const Tensor<float>& geom) {
    if (geom.ndim() != 3 || geom.dim(0) != 3)
        throw Error(errc::shape_mismatch, "bbox_diag expects {3,H,W}");
    long long hw = static_cast<long long>(geom.dim(1)) * geom.dim(2);
    double d2 = 0;
    for (int c = 0; c < 3; ++c) {
        float lo = geom[c * hw], hi = lo;
        for (long long i = 0; i < hw; ++i) {
            lo = std::min(lo, geom[c * hw + i]);
            hi = std::max(hi, geom[c * hw + i]);
        }
        d2 += static_cast<double>(hi - lo) * (hi - lo);
    }
    return std::sqrt(d2);
}

// Mean per-pixel total variation (|dx|+|dy| averaged over channels and
// interior pixels); a plain sharpness score for wrinkle checks.
inline double total_variation(const Tensor<float>& img) {
    if (img.ndim() != 3) throw Error(errc::shape_mismatch, "total_variation expects {C,H,W}");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h < 2 || w < 2) throw Error(errc::bad_args, "total_variation needs >= 2x2");
    double s = 0;
    long long n = 0;
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y + 1 < h; ++y)
            for (int x = 0; x + 1 < w; ++x) {
                double v = img.at(ch, y, x);
                s += std::abs(img.at(ch, y, x + 1) - v) + std::abs(img.at(ch, y + 1, x) - v);
                ++n;
            }
    return s / static_cast<double>(n);
}

inline double pearson_r(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw Error(errc::bad_args, "pearson_r needs two equal series of length >= 2");
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) { ma += a[i]; mb += b[i]; }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(a.size());
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0 || sbb <= 0) return 0;
    return sab / std::sqrt(saa * sbb);
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw Error(errc::bad_args, "median of empty series");
    std::sort(v.begin(), v.end());
    size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// ---- linear probes ----------------------------------------------------

// Ridge regression with bias, normal equations via LDLT. Rows of X are
// feature vectors; rows of Y the targets.
struct LinearProbe {
    Eigen::MatrixXd weights;  // (d+1) x k, last row is the bias

    static LinearProbe fit(const std::vector<std::vector<float>>& x,
                           const std::vector<std::vector<float>>& y, double lambda = 1e-3) {
        if (x.empty() || x.size() != y.size())
            throw Error(errc::bad_args, "probe fit needs matching nonempty samples");
        int n = static_cast<int>(x.size());
        int d = static_cast<int>(x[0].size());
        int k = static_cast<int>(y[0].size());
        Eigen::MatrixXd X(n, d + 1), Y(n, k);
        for (int i = 0; i < n; ++i) {
            if (static_cast<int>(x[i].size()) != d || static_cast<int>(y[i].size()) != k)
                throw Error(errc::dim_mismatch, "probe fit: ragged samples");
            for (int j = 0; j < d; ++j) X(i, j) = x[i][j];
            X(i, d) = 1.0;
            for (int j = 0; j < k; ++j) Y(i, j) = y[i][j];
        }
        Eigen::MatrixXd reg = lambda * Eigen::MatrixXd::Identity(d + 1, d + 1);
        reg(d, d) = 0;  // bias not penalized
        LinearProbe p;
        p.weights = (X.transpose() * X + reg).ldlt().solve(X.transpose() * Y);
        return p;
    }

    std::vector<double> predict(const std::vector<float>& x) const {
        int d = static_cast<int>(weights.rows()) - 1;
        if (static_cast<int>(x.size()) != d)
            throw Error(errc::dim_mismatch, "probe predict: feature size mismatch");
        Eigen::RowVectorXd v(d + 1);
        for (int j = 0; j < d; ++j) v(j) = x[j];
        v(d) = 1.0;
        Eigen::RowVectorXd y = v * weights;
        return std::vector<double>(y.data(), y.data() + y.size());
    }
};

// 1 - SSres/SStot, averaged over target dimensions.
inline double r_squared(const LinearProbe& probe, const std::vector<std::vector<float>>& x,
                        const std::vector<std::vector<float>>& y) {
    if (x.empty() || x.size() != y.size())
        throw Error(errc::bad_args, "r_squared needs matching nonempty samples");
    int n = static_cast<int>(x.size());
    int k = static_cast<int>(y[0].size());
    std::vector<double> mean(k, 0);
    for (const auto& row : y)
        for (int j = 0; j < k; ++j) mean[j] += row[j];
    for (auto& m : mean) m /= n;
    std::vector<double> ss_res(k, 0), ss_tot(k, 0);
    for (int i = 0; i < n; ++i) {
        auto pred = probe.predict(x[i]);
        for (int j = 0; j < k; ++j) {
            ss_res[j] += (pred[j] - y[i][j]) * (pred[j] - y[i][j]);
            ss_tot[j] += (y[i][j] - mean[j]) * (y[i][j] - mean[j]);
        }
    }
    double acc = 0;
    for (int j = 0; j < k; ++j) acc += ss_tot[j] > 0 ? 1.0 - ss_res[j] / ss_tot[j] : 0.0;
    return acc / k;
}

// One-hot least-squares classifier accuracy (argmax of the regression).
inline double classify_accuracy(const LinearProbe& probe,
                                const std::vector<std::vector<float>>& x,
                                const std::vector<int>& labels) {
    if (x.empty() || x.size() != labels.size())
        throw Error(errc::bad_args, "classify_accuracy needs matching nonempty samples");
    int hits = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        auto pred = probe.predict(x[i]);
        int arg = static_cast<int>(std::max_element(pred.begin(), pred.end()) - pred.begin());
        if (arg == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(x.size());
}

inline std::vector<std::vector<float>> one_hot(const std::vector<int>& labels, int classes) {
    std::vector<std::vector<float>> out(labels.size(), std::vector<float>(classes, 0.0f));
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes)
            throw Error(errc::bounds, "one_hot label out of range");
        out[i][labels[i]] = 1.0f;
    }
    return out;
}

// ---- region masks -----------------------------------------------------

// Fixed UV rectangles over the face atlas; coarse on purpose, used only to
// weight error reporting by region. v runs bottom-up.
inline Tensor<float> region_mask(const std::string& name, int res) {
    struct Rect { double u0, u1, v0, v1; };
    std::vector<Rect> rects;
    if (name == "eyes")
        rects = {{0.22, 0.46, 0.50, 0.66}, {0.54, 0.78, 0.50, 0.66}};
    else if (name == "mouth")
        rects = {{0.30, 0.70, 0.20, 0.36}};
    else if (name == "full")
        rects = {{0.0, 1.0, 0.0, 1.0}};
    else
        throw Error(errc::bad_args, "unknown region '" + name + "'");
    Tensor<float> m = Tensor<float>::zeros({1, res, res});
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            double u = (x + 0.5) / res, v = 1.0 - (y + 0.5) / res;
            for (const auto& r : rects)
                if (u >= r.u0 && u < r.u1 && v >= r.v0 && v < r.v1) m.at(0, y, x) = 1.0f;
        }
    return m;
}

inline double masked_mean_l1(const Tensor<float>& a, const Tensor<float>& b,
                             const Tensor<float>& mask) {
    if (!a.same_shape(b)) throw Error(errc::shape_mismatch, "masked_mean_l1 shape mismatch");
    if (mask.ndim() != 3 || mask.dim(0) != 1 || mask.dim(1) != a.dim(1) ||
        mask.dim(2) != a.dim(2))
        throw Error(errc::shape_mismatch, "masked_mean_l1 mask mismatch");
    long long hw = static_cast<long long>(a.dim(1)) * a.dim(2);
    double s = 0, area = 0;
    for (long long i = 0; i < hw; ++i) area += mask[i];
    if (area == 0) return 0;
    for (int c = 0; c < a.dim(0); ++c)
        for (long long i = 0; i < hw; ++i)
            s += mask[i] * std::abs(static_cast<double>(a[c * hw + i]) - b[c * hw + i]);
    return s / (area * a.dim(0));
}

// ---- pipeline metrics -------------------------------------------------

struct DisentanglementReport {
    double cross_view_ratio = 0;  // same-frame view spread / cross-frame spread
    double expr_probe_r2 = 0;
    double view_probe_accuracy = 0;
    double view_chance = 0;
};

struct PoseInvarianceReport {
    double decode_spread_ratio = 0;  // pose-free decode spread / input spread
    double input_pairwise_rmse = 0;
};

struct ReconstructionReport {
    double geometry_rmse_mm = 0;
    double geometry_rmse_median_mm = 0;
    double bbox_diag_mm = 0;
    double texture_l1 = 0;
    double texture_l1_eyes = 0;
    double texture_l1_mouth = 0;
    double view_consistency_rmse_mm = 0;
};

struct WrinkleReport {
    double tv_composed = 0;
    double tv_reference = 0;
    double diffuse_l1 = 0;
};

struct MetricsReport {
    DisentanglementReport disentangle;
    PoseInvarianceReport pose;
    ReconstructionReport recon;
    WrinkleReport wrinkle;
    int test_frames = 0;
    int views = 0;

    nlohmann::json to_json() const {
        return {
            {"disentanglement",
             {{"cross_view_ratio", disentangle.cross_view_ratio},
              {"expr_probe_r2", disentangle.expr_probe_r2},
              {"view_probe_accuracy", disentangle.view_probe_accuracy},
              {"view_chance", disentangle.view_chance}}},
            {"pose_invariance",
             {{"decode_spread_ratio", pose.decode_spread_ratio},
              {"input_pairwise_rmse", pose.input_pairwise_rmse}}},
            {"reconstruction",
             {{"geometry_rmse_mm", recon.geometry_rmse_mm},
              {"geometry_rmse_median_mm", recon.geometry_rmse_median_mm},
              {"bbox_diag_mm", recon.bbox_diag_mm},
              {"texture_l1", recon.texture_l1},
              {"texture_l1_eyes", recon.texture_l1_eyes},
              {"texture_l1_mouth", recon.texture_l1_mouth},
              {"view_consistency_rmse_mm", recon.view_consistency_rmse_mm}}},
            {"wrinkle",
             {{"tv_composed", wrinkle.tv_composed},
              {"tv_reference", wrinkle.tv_reference},
              {"diffuse_l1", wrinkle.diffuse_l1}}},
            {"test_frames", test_frames},
            {"views", views}};
    }
};

namespace detail {

inline std::vector<float> to_vec(const Tensor<float>& t) {
    return std::vector<float>(t.data(), t.data() + t.numel());
}

inline double l2(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i)
        s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
    return std::sqrt(s);
}

}  // namespace detail

// Expression-latent geometry across frames and views, plus linear probes
// against the generator's exact factors.
inline DisentanglementReport eval_disentanglement(train::Bundle& b, const Dataset& ds) {
    auto train_t = ds.split_indices(false);
    auto test_t = ds.split_indices(true);
    if (train_t.empty() || test_t.empty())
        throw Error(errc::bad_args, "disentanglement eval needs both splits");
    int views = ds.num_views;

    auto codes_of = [&](const std::vector<int>& idx) {
        std::vector<std::vector<float>> z;  // frame-major, view minor
        for (int t : idx)
            for (int v = 0; v < views; ++v) {
                auto [ze, zv] = vae::expr_codes(*b.expr, ds.frames[t].images[v]);
                (void)zv;
                z.push_back(detail::to_vec(ze));
            }
        return z;
    };
    auto z_train = codes_of(train_t), z_test = codes_of(test_t);

    // Spread of a frame's codes across views vs spread across frames (view 0).
    double within = 0;
    long long nw = 0;
    for (size_t f = 0; f < test_t.size(); ++f)
        for (int v1 = 0; v1 < views; ++v1)
            for (int v2 = v1 + 1; v2 < views; ++v2) {
                within += detail::l2(z_test[f * views + v1], z_test[f * views + v2]);
                ++nw;
            }
    double across = 0;
    long long na = 0;
    for (size_t f1 = 0; f1 < test_t.size(); ++f1)
        for (size_t f2 = f1 + 1; f2 < test_t.size(); ++f2) {
            across += detail::l2(z_test[f1 * views], z_test[f2 * views]);
            ++na;
        }
    DisentanglementReport r;
    r.cross_view_ratio = (nw && na && across > 0) ? (within / nw) / (across / na) : 1.0;

    auto factors_of = [&](const std::vector<int>& idx) {
        std::vector<std::vector<float>> y;
        for (int t : idx) {
            const auto& e = ground_truth(ds, t).expr;
            for (int v = 0; v < views; ++v) y.push_back(e);
        }
        return y;
    };
    auto probe = LinearProbe::fit(z_train, factors_of(train_t));
    r.expr_probe_r2 = r_squared(probe, z_test, factors_of(test_t));

    auto labels_of = [&](const std::vector<int>& idx) {
        std::vector<int> l;
        for (size_t f = 0; f < idx.size(); ++f)
            for (int v = 0; v < views; ++v) l.push_back(v);
        return l;
    };
    auto vprobe = LinearProbe::fit(z_train, one_hot(labels_of(train_t), views));
    r.view_probe_accuracy = classify_accuracy(vprobe, z_test, labels_of(test_t));
    r.view_chance = 1.0 / views;
    return r;
}

// Re-pose test geometry N ways, decode each pose-free, and compare the
// spread of the decodes to the spread of the inputs.
inline PoseInvarianceReport eval_pose_invariance(train::Bundle& b, const Dataset& ds,
                                                 int augmentations = 8, int max_frames = 4) {
    auto test_t = ds.split_indices(true);
    if (test_t.empty()) throw Error(errc::bad_args, "pose eval needs test frames");
    Rng rng = Rng::stream(b.cfg.seed, "pose_eval");
    const auto& gc = b.cfg.geom;

    double ratio_acc = 0, input_acc = 0;
    int frames = 0;
    for (size_t k = 0; k < test_t.size() && frames < max_frames; ++k, ++frames) {
        const auto& g = ds.frames[test_t[k]].geometry;
        std::vector<Tensor<float>> inputs, decodes;
        for (int a = 0; a < augmentations; ++a) {
            auto aug = vae::augment_geometry(g, rng, gc.aug_angle_deg, gc.aug_trans_mm);
            inputs.push_back(aug.map);
            auto [zg, zp] = vae::geom_codes(*b.geom, aug.map, gc);
            (void)zp;
            decodes.push_back(vae::decode_geometry(*b.geom, zg, gc));
        }
        double din = 0, dout = 0;
        long long n = 0;
        for (int i = 0; i < augmentations; ++i)
            for (int j = i + 1; j < augmentations; ++j) {
                din += rmse(inputs[i], inputs[j]);
                dout += rmse(decodes[i], decodes[j]);
                ++n;
            }
        din /= n;
        dout /= n;
        ratio_acc += din > 0 ? dout / din : 0.0;
        input_acc += din;
    }
    PoseInvarianceReport r;
    r.decode_spread_ratio = ratio_acc / frames;
    r.input_pairwise_rmse = input_acc / frames;
    return r;
}

// Drive the full image -> asset chain on the test split and score it
// against the generator's unposed geometry and clean textures.
inline ReconstructionReport eval_reconstruction(train::Bundle& b, const Dataset& ds) {
    infer::require_ready(b);
    auto test_t = ds.split_indices(true);
    if (test_t.empty()) throw Error(errc::bad_args, "reconstruction eval needs test frames");
    infer::CharacterPack pack{ds.performer_id, ds.neutral_diffuse, ds.neutral_specular,
                              ds.neutral_normal, ds.neutral_geometry};
    int res = ds.neutral_diffuse.dim(1);
    Tensor<float> eyes = region_mask("eyes", res), mouth = region_mask("mouth", res);

    std::vector<double> geo_rmse;
    double tex_l1 = 0, tex_eyes = 0, tex_mouth = 0, view_rmse = 0;
    long long nview = 0;
    for (int t : test_t) {
        const auto& f = ds.frames[t];
        Tensor<float> gt_posefree = vae::rigid_apply_map(f.geometry, f.gt.pose.inverse());
        std::vector<Tensor<float>> per_view;
        for (int v = 0; v < ds.num_views; ++v) {
            auto asset = infer::drive(b, f.images[v], pack);
            per_view.push_back(asset.geometry);
            if (v == 0) {
                geo_rmse.push_back(rmse(asset.geometry, gt_posefree));
                tex_l1 += mean_abs_diff(asset.textures.diffuse, f.diffuse);
                tex_eyes += masked_mean_l1(asset.textures.diffuse, f.diffuse, eyes);
                tex_mouth += masked_mean_l1(asset.textures.diffuse, f.diffuse, mouth);
            }
        }
        for (size_t i = 0; i < per_view.size(); ++i)
            for (size_t j = i + 1; j < per_view.size(); ++j) {
                view_rmse += rmse(per_view[i], per_view[j]);
                ++nview;
            }
    }
    ReconstructionReport r;
    double acc = 0;
    for (double v : geo_rmse) acc += v;
    r.geometry_rmse_mm = acc / geo_rmse.size();
    r.geometry_rmse_median_mm = median(geo_rmse);
    r.bbox_diag_mm = bbox_diag(ds.neutral_geometry);
    r.texture_l1 = tex_l1 / test_t.size();
    r.texture_l1_eyes = tex_eyes / test_t.size();
    r.texture_l1_mouth = tex_mouth / test_t.size();
    r.view_consistency_rmse_mm = nview ? view_rmse / nview : 0.0;
    return r;
}

// Sharpness of composed full-res diffuse vs the captured reference.
inline WrinkleReport eval_wrinkle(train::Bundle& b, const Dataset& ds) {
    infer::require_ready(b);
    auto test_t = ds.split_indices(true);
    if (test_t.empty()) throw Error(errc::bad_args, "wrinkle eval needs test frames");
    infer::CharacterPack pack{ds.performer_id, ds.neutral_diffuse, ds.neutral_specular,
                              ds.neutral_normal, ds.neutral_geometry};
    WrinkleReport r;
    for (int t : test_t) {
        const auto& f = ds.frames[t];
        auto asset = infer::drive(b, f.images[0], pack);
        r.tv_composed += total_variation(asset.textures.diffuse);
        r.tv_reference += total_variation(f.diffuse);
        r.diffuse_l1 += mean_abs_diff(asset.textures.diffuse, f.diffuse);
    }
    r.tv_composed /= test_t.size();
    r.tv_reference /= test_t.size();
    r.diffuse_l1 /= test_t.size();
    return r;
}

inline MetricsReport evaluate(train::Bundle& b, const Dataset& ds) {
    MetricsReport m;
    m.disentangle = eval_disentanglement(b, ds);
    m.pose = eval_pose_invariance(b, ds);
    m.recon = eval_reconstruction(b, ds);
    m.wrinkle = eval_wrinkle(b, ds);
    m.test_frames = static_cast<int>(ds.split_indices(true).size());
    m.views = ds.num_views;
    return m;
}

}  // namespace facet::eval
