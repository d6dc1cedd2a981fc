// Single entry point for the pipeline: data generation, stabilization,
// staged training, retargeting, inference, editing transfer, eval, export.
//
// Conventions shared by every subcommand:
//   * settings come from an optional --config JSON file; explicit flags win
//   * the effective config is echoed to <out>/config.echo.json
//   * training logs are line-delimited JSON in <out>/train.log.jsonl
//   * failures print one machine-readable JSON object on stderr and exit 1

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "facet/facet.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;
using namespace facet;

std::string now_iso() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json load_cfg_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream f(path);
    if (!f) throw Error(errc::io_error, "cannot read config file " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw Error(errc::bad_args, std::string("config file is not valid JSON: ") + e.what());
    }
}

void echo_config(const std::string& dir, const std::string& command, const json& cfg,
                 const std::string& device) {
    fs::create_directories(dir);
    json j = {{"command", command}, {"device", device}, {"config", cfg}};
    std::ofstream f(dir + "/config.echo.json");
    f << j.dump(2) << "\n";
    if (!f) throw Error(errc::io_error, "cannot write config echo in " + dir);
}

struct TrainLog {
    std::ofstream f;
    explicit TrainLog(const std::string& out) {
        fs::create_directories(out);
        f.open(out + "/train.log.jsonl", std::ios::app);
        if (!f) throw Error(errc::io_error, "cannot open training log in " + out);
    }
    void event(const std::string& name, json extra = json::object()) {
        extra["event"] = name;
        extra["ts"] = now_iso();
        f << extra.dump() << "\n";
        f.flush();
    }
};

void done(json j) {
    j["event"] = "done";
    std::cout << j.dump() << "\n";
}

// Flattens numeric leaves to "a.b.c,value" rows next to a JSON report.
void write_csv_twin(const std::string& json_path, const json& j) {
    fs::path p(json_path);
    p.replace_extension(".csv");
    std::ofstream f(p);
    f << "metric,value\n";
    std::function<void(const json&, const std::string&)> walk = [&](const json& node,
                                                                    const std::string& prefix) {
        if (node.is_object()) {
            for (auto it = node.begin(); it != node.end(); ++it)
                walk(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key());
        } else if (node.is_number()) {
            f << prefix << "," << node.dump() << "\n";
        }
    };
    walk(j, "");
    if (!f) throw Error(errc::io_error, "cannot write " + p.string());
}

// ---- subcommand registrations ------------------------------------------

void add_gen_data(CLI::App& app) {
    struct O {
        uint64_t seed = 7;
        std::string out, config, device, performer = "alpha";
        int frames = 600, views = 4, image_res = 64, geom_res = 32, tex_res = 128, expr_dims = 6;
        double jitter = 1.5, split = 0.2;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("gen-data", "Generate a synthetic capture dataset");
    c->add_option("--seed", o->seed, "generator seed")->required();
    c->add_option("--out", o->out, "dataset root (writes <out>/<performer>/)")->required();
    c->add_option("--config", o->config, "JSON config file");
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->add_option("--performer", o->performer, "performer id")->capture_default_str();
    c->add_option("--frames", o->frames, "frame count T")->capture_default_str();
    c->add_option("--views", o->views, "view count V")->capture_default_str();
    c->add_option("--image-res", o->image_res, "camera image resolution")->capture_default_str();
    c->add_option("--geom-res", o->geom_res, "geometry map resolution")->capture_default_str();
    c->add_option("--tex-res", o->tex_res, "texture resolution")->capture_default_str();
    c->add_option("--expr-dims", o->expr_dims, "expression factor count K")->capture_default_str();
    c->add_option("--jitter", o->jitter, "texture jitter sigma, px")->capture_default_str();
    c->add_option("--split", o->split, "test split fraction")->capture_default_str();
    c->callback([o, c] {
        json eff = stage::StageConfig{}.to_json();
        eff.merge_patch(load_cfg_file(o->config));
        if (c->count("--seed")) eff["seed"] = o->seed;
        if (c->count("--performer")) eff["performer_id"] = o->performer;
        if (c->count("--frames")) eff["num_frames"] = o->frames;
        if (c->count("--views")) eff["num_views"] = o->views;
        if (c->count("--image-res")) eff["image_res"] = o->image_res;
        if (c->count("--geom-res")) eff["geom_res"] = o->geom_res;
        if (c->count("--tex-res")) eff["tex_res"] = o->tex_res;
        if (c->count("--expr-dims")) eff["expr_dims"] = o->expr_dims;
        if (c->count("--jitter")) eff["jitter_amplitude"] = o->jitter;
        if (c->count("--split")) eff["split_fraction"] = o->split;
        auto cfg = stage::StageConfig::from_json(eff);
        Dataset ds = stage::generate_dataset(cfg);
        write_dataset(ds, o->out);
        std::string ddir = o->out + "/" + cfg.performer_id;
        echo_config(ddir, "gen-data", cfg.to_json(), o->device);
        done({{"dataset", ddir},
              {"frames", cfg.num_frames},
              {"views", cfg.num_views}});
    });
}

void add_train_stabilize(CLI::App& app) {
    struct O {
        uint64_t seed = 7;
        std::string dataset, out, config, device;
        int res = 64, epochs = 40, base_ch = 8;
        double lr = 2e-3, w_fid = 1.0, w_tem = 0.5, w_dis = 0.1;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("train-stabilize", "Train the texture stabilization network");
    c->add_option("--dataset", o->dataset, "dataset directory")->required();
    c->add_option("--out", o->out, "model output directory")->required();
    c->add_option("--seed", o->seed, "training seed")->required();
    c->add_option("--config", o->config, "JSON config file");
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->add_option("--res", o->res, "working resolution")->capture_default_str();
    c->add_option("--epochs", o->epochs, "epoch count")->capture_default_str();
    c->add_option("--base-ch", o->base_ch, "base channel width")->capture_default_str();
    c->add_option("--lr", o->lr, "learning rate")->capture_default_str();
    c->add_option("--w-fid", o->w_fid, "fidelity weight")->capture_default_str();
    c->add_option("--w-tem", o->w_tem, "temporal weight")->capture_default_str();
    c->add_option("--w-dis", o->w_dis, "displacement weight")->capture_default_str();
    c->callback([o, c] {
        json eff = stab::StabConfig{}.to_json();
        eff.merge_patch(load_cfg_file(o->config));
        if (c->count("--seed")) eff["seed"] = o->seed;
        if (c->count("--res")) eff["tex_res"] = o->res;
        if (c->count("--epochs")) eff["epochs"] = o->epochs;
        if (c->count("--base-ch")) eff["base_ch"] = o->base_ch;
        if (c->count("--lr")) eff["lr"] = o->lr;
        if (c->count("--w-fid")) eff["w_fid"] = o->w_fid;
        if (c->count("--w-tem")) eff["w_tem"] = o->w_tem;
        if (c->count("--w-dis")) eff["w_dis"] = o->w_dis;
        auto cfg = stab::StabConfig::from_json(eff);

        Dataset ds = load_dataset(o->dataset);
        echo_config(o->out, "train-stabilize", cfg.to_json(), o->device);
        TrainLog log(o->out);
        log.event("start", {{"command", "train-stabilize"}});
        Rng rng = Rng::stream(cfg.seed, "stab_init");
        stab::StabNet<float> net(cfg.base_ch, rng);
        stab::train_stabilizer(net, ds, cfg, &log.f);
        stab::save_stabilizer(o->out, net, cfg);
        log.event("end");
        done({{"model", o->out}, {"epochs", cfg.epochs}});
    });
}

void add_stabilize(CLI::App& app) {
    struct O {
        std::string dataset, model, out, device;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("stabilize", "Rewrite a dataset's textures through the model");
    c->add_option("--dataset", o->dataset, "input dataset directory")->required();
    c->add_option("--model", o->model, "stabilizer checkpoint directory")->required();
    c->add_option("--out", o->out, "output dataset root")->required();
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->callback([o] {
        Dataset ds = load_dataset(o->dataset);
        nlohmann::json meta = load_meta(o->model);
        auto cfg = stab::StabConfig::from_json(meta.at("config"));
        Rng rng = Rng::stream(cfg.seed, "stab_init");
        stab::StabNet<float> net(cfg.base_ch, rng);
        stab::load_stabilizer(o->model, net);

        for (auto& f : ds.frames) {
            auto s = stab::stabilize_frame(net, f, ds.neutral_diffuse, cfg.tex_res);
            f.diffuse = std::move(s.diffuse);
            f.specular = std::move(s.specular);
            f.normal = std::move(s.normal);
        }
        write_dataset(ds, o->out);
        std::string ddir = o->out + "/" + ds.performer_id;
        echo_config(ddir, "stabilize", {{"model", o->model}, {"source", o->dataset}},
                    o->device);
        done({{"dataset", ddir}, {"frames", ds.frames.size()}});
    });
}

void add_eval_stability(CLI::App& app) {
    struct O {
        std::string dataset, csv;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("eval-stability",
                                 "Write the consecutive-frame texture difference curve");
    c->add_option("--dataset", o->dataset, "dataset directory")->required();
    c->add_option("--csv", o->csv, "output CSV path")->required();
    c->callback([o] {
        Dataset ds = load_dataset(o->dataset);
        auto curve = stab::consecutive_diff_curve(ds);
        std::ofstream f(o->csv);
        f << "step,mean_l1_diffuse\n";
        double sum = 0;
        for (size_t i = 0; i < curve.size(); ++i) {
            f << i << "," << curve[i] << "\n";
            sum += curve[i];
        }
        if (!f) throw Error(errc::io_error, "cannot write " + o->csv);
        done({{"csv", o->csv},
              {"steps", curve.size()},
              {"mean", sum / static_cast<double>(curve.size())}});
    });
}

void add_train_expression(CLI::App& app) {
    struct O {
        uint64_t seed = 7;
        std::string dataset, out, config, device;
        int de = 32, dv = 8, epochs = 200, base_ch = 8;
        double lr = 1e-3, beta = 1e-3;
        bool no_disentangle = false;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("train-expression", "Train the expression/viewpoint model");
    c->add_option("--dataset", o->dataset, "dataset directory")->required();
    c->add_option("--out", o->out, "model output directory")->required();
    c->add_option("--seed", o->seed, "training seed")->required();
    c->add_option("--config", o->config, "JSON config file");
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->add_option("--de", o->de, "expression latent size")->capture_default_str();
    c->add_option("--dv", o->dv, "viewpoint latent size")->capture_default_str();
    c->add_option("--epochs", o->epochs, "epoch count")->capture_default_str();
    c->add_option("--base-ch", o->base_ch, "base channel width")->capture_default_str();
    c->add_option("--lr", o->lr, "learning rate")->capture_default_str();
    c->add_option("--beta", o->beta, "KL weight")->capture_default_str();
    c->add_flag("--no-disentanglement", o->no_disentangle,
                "drop the cross-view attraction and swap terms");
    c->callback([o, c] {
        Dataset ds = load_dataset(o->dataset);
        json eff = vae::ExprConfig{}.to_json();
        eff["image_res"] = ds.frames.front().images.front().dim(1);
        eff.merge_patch(load_cfg_file(o->config));
        if (c->count("--seed")) eff["seed"] = o->seed;
        if (c->count("--de")) eff["d_expr"] = o->de;
        if (c->count("--dv")) eff["d_view"] = o->dv;
        if (c->count("--epochs")) eff["epochs"] = o->epochs;
        if (c->count("--base-ch")) eff["base_ch"] = o->base_ch;
        if (c->count("--lr")) eff["lr"] = o->lr;
        if (c->count("--beta")) eff["beta"] = o->beta;
        if (o->no_disentangle) eff["disentangle"] = false;
        auto cfg = vae::ExprConfig::from_json(eff);

        echo_config(o->out, "train-expression", cfg.to_json(), o->device);
        TrainLog log(o->out);
        log.event("start", {{"command", "train-expression"}});
        Rng rng = Rng::stream(cfg.seed, "init_expr");
        vae::ExpressionVae<float> net(cfg, rng);
        vae::train_expression(net, ds, cfg, &log.f);
        vae::save_expression(o->out, net, cfg, train::kStageVaes);
        log.event("end");
        done({{"model", o->out}, {"epochs", cfg.epochs}});
    });
}

void add_train_geometry(CLI::App& app) {
    struct O {
        uint64_t seed = 7;
        std::string dataset, out, config, device;
        int dg = 32, dp = 8, epochs = 200, base_ch = 8, window = 12;
        double lr = 1e-3;
        bool no_pose = false;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("train-geometry", "Train the geometry/pose model");
    c->add_option("--dataset", o->dataset, "dataset directory")->required();
    c->add_option("--out", o->out, "model output directory")->required();
    c->add_option("--seed", o->seed, "training seed")->required();
    c->add_option("--config", o->config, "JSON config file");
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->add_option("--dg", o->dg, "shape latent size")->capture_default_str();
    c->add_option("--dp", o->dp, "pose latent size")->capture_default_str();
    c->add_option("--epochs", o->epochs, "epoch count")->capture_default_str();
    c->add_option("--base-ch", o->base_ch, "base channel width")->capture_default_str();
    c->add_option("--window", o->window, "triplet temporal window, frames")->capture_default_str();
    c->add_option("--lr", o->lr, "learning rate")->capture_default_str();
    c->add_flag("--no-pose", o->no_pose, "disable the rigid pose split");
    c->callback([o, c] {
        Dataset ds = load_dataset(o->dataset);
        json eff = vae::GeomConfig{}.to_json();
        eff["geom_res"] = ds.frames.front().geometry.dim(1);
        eff.merge_patch(load_cfg_file(o->config));
        if (c->count("--seed")) eff["seed"] = o->seed;
        if (c->count("--dg")) eff["d_geom"] = o->dg;
        if (c->count("--dp")) eff["d_pose"] = o->dp;
        if (c->count("--epochs")) eff["epochs"] = o->epochs;
        if (c->count("--base-ch")) eff["base_ch"] = o->base_ch;
        if (c->count("--window")) eff["temporal_window"] = o->window;
        if (c->count("--lr")) eff["lr"] = o->lr;
        if (o->no_pose) eff["pose_split"] = false;
        auto cfg = vae::GeomConfig::from_json(eff);

        echo_config(o->out, "train-geometry", cfg.to_json(), o->device);
        TrainLog log(o->out);
        log.event("start", {{"command", "train-geometry"}});
        Rng rng = Rng::stream(cfg.seed, "init_geom");
        vae::GeometryVae<float> net(cfg, rng);
        vae::train_geometry(net, ds, cfg, &log.f);
        vae::save_geometry(o->out, net, cfg, train::kStageVaes);
        log.event("end");
        done({{"model", o->out}, {"epochs", cfg.epochs}});
    });
}

void add_train_texture(CLI::App& app) {
    struct O {
        uint64_t seed = 7;
        std::string dataset, out, config, device;
        int dtex = 32, res = 64, epochs = 200, base_ch = 8;
        double lr = 1e-3;
        bool no_wrinkle = false;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("train-texture", "Train the texture model");
    c->add_option("--dataset", o->dataset, "dataset directory")->required();
    c->add_option("--out", o->out, "model output directory")->required();
    c->add_option("--seed", o->seed, "training seed")->required();
    c->add_option("--config", o->config, "JSON config file");
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->add_option("--dtex", o->dtex, "texture latent size")->capture_default_str();
    c->add_option("--res", o->res, "working resolution")->capture_default_str();
    c->add_option("--epochs", o->epochs, "epoch count")->capture_default_str();
    c->add_option("--base-ch", o->base_ch, "base channel width")->capture_default_str();
    c->add_option("--lr", o->lr, "learning rate")->capture_default_str();
    c->add_flag("--no-wrinkle", o->no_wrinkle,
                "decode absolute textures instead of wrinkle deltas");
    c->callback([o, c] {
        Dataset ds = load_dataset(o->dataset);
        json eff = vae::TexConfig{}.to_json();
        eff.merge_patch(load_cfg_file(o->config));
        if (c->count("--seed")) eff["seed"] = o->seed;
        if (c->count("--dtex")) eff["d_tex"] = o->dtex;
        if (c->count("--res")) eff["work_res"] = o->res;
        if (c->count("--epochs")) eff["epochs"] = o->epochs;
        if (c->count("--base-ch")) eff["base_ch"] = o->base_ch;
        if (c->count("--lr")) eff["lr"] = o->lr;
        if (o->no_wrinkle) eff["wrinkle_deltas"] = false;
        auto cfg = vae::TexConfig::from_json(eff);

        echo_config(o->out, "train-texture", cfg.to_json(), o->device);
        TrainLog log(o->out);
        log.event("start", {{"command", "train-texture"}});
        Rng rng = Rng::stream(cfg.seed, "init_tex");
        vae::TextureVae<float> net(cfg, rng);
        vae::train_texture(net, ds, cfg, &log.f);
        vae::save_texture(o->out, net, cfg, train::kStageVaes);
        log.event("end");
        done({{"model", o->out}, {"epochs", cfg.epochs}});
    });
}

void add_train(CLI::App& app) {
    struct O {
        uint64_t seed = 7;
        std::string dataset, out, config, device, stage = "all";
        bool resume = false, no_disentangle = false, no_pose = false, no_wrinkle = false;
        int expr_epochs = -1, geom_epochs = -1, tex_epochs = -1, map_epochs = -1,
            joint_epochs = -1;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("train", "Run the staged training pipeline");
    c->add_option("--dataset", o->dataset, "dataset directory")->required();
    c->add_option("--out", o->out, "bundle output directory")->required();
    c->add_option("--seed", o->seed, "training seed (required unless --resume)");
    c->add_option("--stage", o->stage, "all | A | B | C")
        ->check(CLI::IsMember({"all", "A", "B", "C"}))
        ->capture_default_str();
    c->add_flag("--resume", o->resume, "continue from the bundle saved in --out");
    c->add_option("--config", o->config, "JSON config file (ignored with --resume)");
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->add_flag("--no-disentanglement", o->no_disentangle,
                "expression model: drop attraction/swap terms");
    c->add_flag("--no-pose", o->no_pose, "geometry model: disable the rigid pose split");
    c->add_flag("--no-wrinkle", o->no_wrinkle, "texture model: decode absolute textures");
    c->add_option("--expr-epochs", o->expr_epochs, "override expression epochs");
    c->add_option("--geom-epochs", o->geom_epochs, "override geometry epochs");
    c->add_option("--tex-epochs", o->tex_epochs, "override texture epochs");
    c->add_option("--map-epochs", o->map_epochs, "override mapping epochs");
    c->add_option("--joint-epochs", o->joint_epochs, "override joint epochs");
    c->callback([o, c] {
        Dataset ds = load_dataset(o->dataset);
        train::Bundle b;
        if (o->resume) {
            b = train::load_bundle(o->out);
            if (c->count("--seed")) {
                b.cfg.seed = o->seed;
                b.cfg.finalize();
            }
        } else {
            if (!c->count("--seed"))
                throw Error(errc::bad_args, "--seed is required when starting a new run");
            json eff = train::TrainConfig{}.to_json();
            eff["expr"]["image_res"] = ds.frames.front().images.front().dim(1);
            eff["geom"]["geom_res"] = ds.frames.front().geometry.dim(1);
            eff.merge_patch(load_cfg_file(o->config));
            eff["seed"] = o->seed;
            if (o->no_disentangle) eff["expr"]["disentangle"] = false;
            if (o->no_pose) eff["geom"]["pose_split"] = false;
            if (o->no_wrinkle) eff["tex"]["wrinkle_deltas"] = false;
            b = train::make_bundle(train::TrainConfig::from_json(eff));
        }
        if (o->expr_epochs >= 0) b.cfg.expr.epochs = o->expr_epochs;
        if (o->geom_epochs >= 0) b.cfg.geom.epochs = o->geom_epochs;
        if (o->tex_epochs >= 0) b.cfg.tex.epochs = o->tex_epochs;
        if (o->map_epochs >= 0) b.cfg.map.epochs = o->map_epochs;
        if (o->joint_epochs >= 0) b.cfg.joint_epochs = o->joint_epochs;

        json echoed = b.cfg.to_json();
        echoed["stage_request"] = o->stage;
        echoed["resume"] = o->resume;
        echo_config(o->out, "train", echoed, o->device);
        TrainLog log(o->out);
        log.event("start", {{"command", "train"}, {"stage", o->stage}});
        train::run_training(b, ds, o->stage, o->out, &log.f);
        log.event("end", {{"stage", b.stage}});
        done({{"bundle", o->out}, {"stage", b.stage}});
    });
}

void add_retarget(CLI::App& app) {
    struct O {
        uint64_t seed = 7;
        std::string bundle, clips, dataset, out, config, device;
        double lambda_rev = 1.0, lr = 1e-4, clip_seconds = 30.0, w_adv = 1.0;
        int phase1 = 60, phase2 = 40;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("retarget", "Adapt a bundle to new performers from clips");
    c->add_option("--bundle", o->bundle, "trained bundle directory")->required();
    c->add_option("--clips", o->clips, "clip root directory")->required();
    c->add_option("--dataset", o->dataset, "stage dataset directory")->required();
    c->add_option("--out", o->out, "adapted bundle output directory")->required();
    c->add_option("--seed", o->seed, "adaptation seed")->required();
    c->add_option("--config", o->config, "JSON config file");
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->add_option("--lambda-rev", o->lambda_rev, "gradient reversal strength")
        ->capture_default_str();
    c->add_option("--lr", o->lr, "learning rate")->capture_default_str();
    c->add_option("--clip-seconds", o->clip_seconds, "per-clip length budget")
        ->capture_default_str();
    c->add_option("--w-adv", o->w_adv, "adversarial weight")->capture_default_str();
    c->add_option("--phase1-epochs", o->phase1, "expression adaptation epochs")
        ->capture_default_str();
    c->add_option("--phase2-epochs", o->phase2, "joint refresh epochs")->capture_default_str();
    c->callback([o, c] {
        json eff = retarget::RetargetConfig{}.to_json();
        eff.merge_patch(load_cfg_file(o->config));
        if (c->count("--seed")) eff["seed"] = o->seed;
        if (c->count("--lambda-rev")) eff["lambda_rev"] = o->lambda_rev;
        if (c->count("--lr")) eff["lr"] = o->lr;
        if (c->count("--clip-seconds")) eff["clip_seconds"] = o->clip_seconds;
        if (c->count("--w-adv")) eff["w_adv"] = o->w_adv;
        if (c->count("--phase1-epochs")) eff["phase1_epochs"] = o->phase1;
        if (c->count("--phase2-epochs")) eff["phase2_epochs"] = o->phase2;
        auto cfg = retarget::RetargetConfig::from_json(eff);

        Dataset ds = load_dataset(o->dataset);
        train::Bundle b = train::load_bundle(o->bundle);
        echo_config(o->out, "retarget", cfg.to_json(), o->device);
        TrainLog log(o->out);
        log.event("start", {{"command", "retarget"}});
        auto rd = retarget::run_retargeting(b, ds, o->clips, cfg, o->out, &log.f);
        log.event("end");
        done({{"bundle", o->out},
              {"subjects", rd.subject_names},
              {"clip_frames", rd.clips.size()}});
    });
}

infer::EditOffsets load_offsets(const std::string& geom_path, const std::string& tex_path) {
    infer::EditOffsets ed;
    if (!geom_path.empty()) ed.geometry = read_blob(geom_path);
    if (!tex_path.empty()) ed.diffuse = read_blob(tex_path);
    return ed;
}

void add_infer(CLI::App& app) {
    struct O {
        std::string bundle, image, character, out, geom_offset, tex_offset, device;
        bool mesh = false;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("infer", "Drive facial assets from one image");
    c->add_option("--bundle", o->bundle, "trained bundle directory")->required();
    c->add_option("--image", o->image, "driver image (16-bit PNG)")->required();
    c->add_option("--character", o->character, "character pack directory")->required();
    c->add_option("--out", o->out, "asset output directory")->required();
    c->add_option("--geom-offset", o->geom_offset, "edit offset blob added to the geometry");
    c->add_option("--tex-offset", o->tex_offset, "edit offset blob added to the diffuse");
    c->add_flag("--mesh", o->mesh, "also export mesh.obj");
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->callback([o] {
        train::Bundle b = train::load_bundle(o->bundle);
        auto pack = infer::load_character_pack(o->character);
        Tensor<float> img = read_png16(o->image);
        auto ed = load_offsets(o->geom_offset, o->tex_offset);
        bool edited = ed.geometry.numel() || ed.diffuse.numel();
        auto asset = infer::drive(b, img, pack, edited ? &ed : nullptr);
        infer::save_asset(o->out, asset);
        if (o->mesh) infer::export_mesh_obj(asset.geometry, o->out + "/mesh.obj");
        echo_config(o->out, "infer",
                    {{"bundle", o->bundle},
                     {"image", o->image},
                     {"character", o->character},
                     {"geom_offset", o->geom_offset},
                     {"tex_offset", o->tex_offset}},
                    o->device);
        done({{"asset", o->out}, {"stage", b.stage}});
    });
}

void add_infer_clip(CLI::App& app) {
    struct O {
        std::string bundle, clip, character, out, geom_offset, tex_offset, device;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("infer-clip", "Drive assets for every numbered frame of a clip");
    c->add_option("--bundle", o->bundle, "trained bundle directory")->required();
    c->add_option("--clip", o->clip, "clip directory with 0.png, 1.png, ...")->required();
    c->add_option("--character", o->character, "character pack directory")->required();
    c->add_option("--out", o->out, "output root; one subdirectory per frame")->required();
    c->add_option("--geom-offset", o->geom_offset, "edit offset blob applied to every frame");
    c->add_option("--tex-offset", o->tex_offset, "edit offset blob applied to every frame");
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->callback([o] {
        train::Bundle b = train::load_bundle(o->bundle);
        auto pack = infer::load_character_pack(o->character);
        auto ed = load_offsets(o->geom_offset, o->tex_offset);
        bool edited = ed.geometry.numel() || ed.diffuse.numel();

        json items = json::array();
        int n = 0;
        for (;; ++n) {
            std::string path = o->clip + "/" + std::to_string(n) + ".png";
            if (!fs::exists(path)) break;
            Tensor<float> img = read_png16(path);
            auto asset = infer::drive(b, img, pack, edited ? &ed : nullptr);
            std::string fdir = o->out + "/frame_" + std::to_string(n);
            infer::save_asset(fdir, asset);
            items.push_back({{"frame", n},
                             {"dir", fdir},
                             {"z_expr", std::vector<float>(
                                            asset.z_expr.data(),
                                            asset.z_expr.data() + asset.z_expr.numel())}});
        }
        if (n == 0) throw Error(errc::bad_args, "no numbered frames in " + o->clip);
        json report = {{"frames", n}, {"items", items}, {"bundle_stage", b.stage}};
        std::ofstream f(o->out + "/clip_report.json");
        f << report.dump(2) << "\n";
        if (!f) throw Error(errc::io_error, "cannot write clip report in " + o->out);
        echo_config(o->out, "infer-clip",
                    {{"bundle", o->bundle}, {"clip", o->clip}, {"character", o->character}},
                    o->device);
        done({{"out", o->out}, {"frames", n}});
    });
}

void add_export_mesh(CLI::App& app) {
    struct O {
        std::string geom, out;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("export-mesh", "Convert a position-map blob to an OBJ mesh");
    c->add_option("--geom", o->geom, "geometry blob path")->required();
    c->add_option("--out", o->out, "output OBJ path")->required();
    c->callback([o] {
        infer::export_mesh_obj(read_blob(o->geom), o->out);
        done({{"mesh", o->out}});
    });
}

void add_compose(CLI::App& app) {
    struct O {
        std::string wrinkle, neutral_dir, out_dir, device;
        int scale = 4;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("compose",
                                 "Apply a decoded wrinkle field to neutral full-res textures");
    c->add_option("--wrinkle", o->wrinkle, "wrinkle delta blob ({7,S,S})")->required();
    c->add_option("--neutral-dir", o->neutral_dir, "character pack directory")->required();
    c->add_option("--out-dir", o->out_dir, "output directory")->required();
    c->add_option("--scale", o->scale, "upsampling factor to full resolution")
        ->capture_default_str();
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->callback([o] {
        Tensor<float> deltas = read_blob(o->wrinkle);
        auto pack = infer::load_character_pack(o->neutral_dir);
        if (deltas.ndim() != 3 || deltas.dim(0) != 7)
            throw Error(errc::shape_mismatch, "wrinkle blob must be {7,S,S}");
        if (pack.diffuse.dim(1) != deltas.dim(1) * o->scale)
            throw Error(errc::bad_args,
                        "--scale does not bridge the wrinkle and neutral resolutions");
        auto tex = vae::compose_texture({pack.diffuse, pack.specular, pack.normal}, deltas);
        fs::create_directories(o->out_dir);
        write_blob(o->out_dir + "/diffuse.blob", tex.diffuse, "rgb", "unit");
        write_blob(o->out_dir + "/specular.blob", tex.specular, "intensity", "unit");
        write_blob(o->out_dir + "/normal.blob", tex.normal, "xyz_encoded", "unit");
        write_png16(o->out_dir + "/diffuse.png", tex.diffuse);
        write_png16(o->out_dir + "/specular.png", tex.specular);
        write_png16(o->out_dir + "/normal.png", tex.normal);
        echo_config(o->out_dir, "compose",
                    {{"wrinkle", o->wrinkle},
                     {"neutral_dir", o->neutral_dir},
                     {"scale", o->scale}},
                    o->device);
        done({{"out", o->out_dir}});
    });
}

void add_eval(CLI::App& app) {
    struct O {
        std::string bundle, dataset, report, ablation, device;
    };
    auto o = std::make_shared<O>();
    auto* c = app.add_subcommand("eval", "Score a bundle against a dataset");
    c->add_option("--bundle", o->bundle, "trained bundle directory")->required();
    c->add_option("--dataset", o->dataset, "dataset directory")->required();
    c->add_option("--report", o->report, "output JSON path (CSV twin written beside it)")
        ->required();
    c->add_option("--ablation", o->ablation, "label recorded in the report")
        ->check(CLI::IsMember(
            {"no-disentanglement", "no-pose", "no-wrinkle", "no-stabilization"}));
    c->add_option("--device", o->device, "compute backend hint (opaque)");
    c->callback([o] {
        train::Bundle b = train::load_bundle(o->bundle);
        Dataset ds = load_dataset(o->dataset);
        auto report = eval::evaluate(b, ds);
        json j = report.to_json();
        j["bundle_stage"] = b.stage;
        j["ablation"] = o->ablation;
        j["inference_view"] = 0;  // frontal view drives the reconstruction rows
        j["config"] = b.cfg.to_json();
        if (auto dir = fs::path(o->report).parent_path(); !dir.empty())
            fs::create_directories(dir);
        std::ofstream f(o->report);
        f << j.dump(2) << "\n";
        if (!f) throw Error(errc::io_error, "cannot write " + o->report);
        write_csv_twin(o->report, j);
        done({{"report", o->report}});
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"video-driven facial asset pipeline"};
    app.require_subcommand(1);
    add_gen_data(app);
    add_train_stabilize(app);
    add_stabilize(app);
    add_eval_stability(app);
    add_train_expression(app);
    add_train_geometry(app);
    add_train_texture(app);
    add_train(app);
    add_retarget(app);
    add_infer(app);
    add_infer_clip(app);
    add_export_mesh(app);
    add_compose(app);
    add_eval(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        json err = {{"error", "BAD_ARGS"}, {"message", e.what()}};
        std::cerr << err.dump() << std::endl;
        return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
    } catch (const facet::Error& e) {
        json err = {{"error", e.code()}, {"message", e.what()}};
        std::cerr << err.dump() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        json err = {{"error", "INTERNAL"}, {"message", e.what()}};
        std::cerr << err.dump() << std::endl;
        return 1;
    }
    return 0;
}
