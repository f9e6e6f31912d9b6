#include "ava/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

int verbosity() {
    const char* v = std::getenv("AVATAR_LOG");
    return v ? std::atoi(v) : 1;
}

void info(const std::string& msg) {
    if (verbosity() >= 1) std::cerr << msg << "\n";
}

ava::TrainConfig load_train_config(const std::string& config_path,
                                   const std::vector<std::string>& overrides) {
    ava::TrainConfig cfg;
    std::map<std::string, std::string> kv;
    if (!config_path.empty()) kv = ava::parse_flat_config(config_path);
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ava::ValidationError("--set expects key=value, got '" + ov + "'");
        kv[ov.substr(0, eq)] = ov.substr(eq + 1);
    }
    ava::apply_config(cfg, kv);
    return cfg;
}

int run(int argc, char** argv) {
    CLI::App app{"Articulated Gaussian avatar toolkit"};
    app.require_subcommand(1);

    // ---- fit ----
    auto* fit = app.add_subcommand("fit", "Fit body poses to per-frame detections");
    std::string fit_model, fit_detections, fit_out;
    fit->add_option("--model", fit_model, "Body model JSON")->required();
    fit->add_option("--detections", fit_detections, "Directory of per-frame detection JSONs")
        ->required();
    fit->add_option("--out", fit_out, "Output directory for pose JSONs")->required();

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "Optimize an avatar on a dataset");
    std::string tr_model, tr_data, tr_out, tr_config;
    std::vector<std::string> tr_set;
    train_cmd->add_option("--model", tr_model, "Body model JSON")->required();
    train_cmd->add_option("--data", tr_data, "Training dataset root")->required();
    train_cmd->add_option("--out", tr_out, "Output directory")->required();
    train_cmd->add_option("--config", tr_config, "Flat key=value config file");
    train_cmd->add_option("--set", tr_set, "Config override key=value (repeatable)");

    // ---- render ----
    auto* render_cmd = app.add_subcommand("render", "Render an avatar in a given pose");
    std::string re_model, re_avatar, re_pose, re_camera, re_out;
    render_cmd->add_option("--model", re_model, "Body model JSON")->required();
    render_cmd->add_option("--avatar", re_avatar, "Avatar archive directory")->required();
    render_cmd->add_option("--pose", re_pose, "Pose JSON")->required();
    render_cmd->add_option("--camera", re_camera, "Camera JSON")->required();
    render_cmd->add_option("--out", re_out, "Output prefix")->required();

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate an avatar on a test split");
    std::string ev_model, ev_avatar, ev_data, ev_out;
    eval_cmd->add_option("--model", ev_model, "Body model JSON")->required();
    eval_cmd->add_option("--avatar", ev_avatar, "Avatar archive directory")->required();
    eval_cmd->add_option("--data", ev_data, "Test dataset root")->required();
    eval_cmd->add_option("--out", ev_out, "Metrics CSV path")->required();

    // ---- synth ----
    auto* synth_cmd = app.add_subcommand("synth", "Emit the synthetic fixture");
    std::string sy_out;
    int sy_size = 128, sy_train = 24, sy_test = 8;
    uint64_t sy_seed = 11;
    synth_cmd->add_option("--out", sy_out, "Fixture root directory")->required();
    synth_cmd->add_option("--size", sy_size, "Image size in pixels");
    synth_cmd->add_option("--train-frames", sy_train, "Training frame count");
    synth_cmd->add_option("--test-frames", sy_test, "Test frame count");
    synth_cmd->add_option("--seed", sy_seed, "Fixture seed");

    CLI11_PARSE(app, argc, argv);

    if (*fit) {
        ava::BodyModelAsset asset = ava::load_model(fit_model);
        std::vector<std::string> names;
        for (const auto& e : std::filesystem::directory_iterator(fit_detections))
            if (e.path().extension() == ".json") names.push_back(e.path().stem().string());
        std::sort(names.begin(), names.end());
        if (names.empty())
            throw ava::ValidationError("fit: no detection files in " + fit_detections);
        std::vector<ava::FrameDetections> dets;
        for (const auto& n : names) {
            std::ifstream in(std::filesystem::path(fit_detections) / (n + ".json"));
            nlohmann::json j;
            in >> j;
            dets.push_back(ava::detections_from_json(j));
        }
        ava::FitConfig cfg;
        int body_joints = 0;
        auto parts = ava::joint_parts(asset);
        for (int k = 0; k < asset.joint_count(); ++k)
            if (asset.parents[k] != ava::kNoParent && parts[k] == ava::Part::Body) ++body_joints;
        ava::PriorDecoder prior = ava::make_linear_prior(body_joints, cfg.embedding_dim);
        info("fit: " + std::to_string(dets.size()) + " frames");
        ava::FitResult res = ava::fit_sequence(dets, asset, cfg, prior);
        std::filesystem::create_directories(fit_out);
        for (size_t f = 0; f < res.frames.size(); ++f) {
            if (res.frames[f].skipped) {
                info("fit: frame " + names[f] + " skipped (no detections)");
                continue;
            }
            std::ofstream(std::filesystem::path(fit_out) / (names[f] + ".json"))
                << ava::pose_to_json(res.frames[f].theta, res.beta, res.psi,
                                     res.frames[f].translation)
                       .dump();
        }
        if (res.report.behind_camera_warnings > 0)
            info("fit: " + std::to_string(res.report.behind_camera_warnings) +
                 " behind-camera joint exclusions");
        return 0;
    }

    if (*train_cmd) {
        ava::BodyModelAsset asset = ava::load_model(tr_model);
        ava::Dataset data = ava::load_dataset(tr_data);
        ava::TrainConfig cfg = load_train_config(tr_config, tr_set);
        info("train: " + std::to_string(data.frames.size()) + " frames, " +
             std::to_string(cfg.total_iterations) + " iterations");
        ava::TrainResult res = ava::train(data, asset, cfg);
        std::filesystem::create_directories(tr_out);
        ava::save_avatar_archive(res.avatar, std::filesystem::path(tr_out) / "avatar", tr_model);
        ava::write_train_log(res.log, std::filesystem::path(tr_out) / "train_log.csv");
        ava::write_densify_log(res.densify_events,
                               std::filesystem::path(tr_out) / "densify_log.csv");
        info("train: done, " + std::to_string(res.avatar.size()) + " gaussians");
        return 0;
    }

    if (*render_cmd) {
        ava::BodyModelAsset asset = ava::load_model(re_model);
        ava::GaussianAvatar av = ava::load_avatar_archive(re_avatar);
        av.refresh_base_weights(asset);
        ava::FramePose pose;
        {
            std::ifstream in(re_pose);
            if (!in.good()) throw ava::ValidationError("render: cannot open " + re_pose);
            nlohmann::json j;
            in >> j;
            ava::pose_from_json(j, pose.theta, pose.beta, pose.psi, pose.translation);
        }
        ava::Camera cam;
        {
            std::ifstream in(re_camera);
            if (!in.good()) throw ava::ValidationError("render: cannot open " + re_camera);
            nlohmann::json j;
            in >> j;
            cam = ava::camera_from_json(j);
        }
        ava::RenderOutput out = ava::render_pose(av, asset, pose, cam);
        ava::write_png(out.color, re_out + "_color.png");
        ava::write_png(out.alpha, re_out + "_alpha.png");
        ava::write_depth(out.depth, re_out + "_depth.bin");
        return 0;
    }

    if (*eval_cmd) {
        ava::BodyModelAsset asset = ava::load_model(ev_model);
        ava::GaussianAvatar av = ava::load_avatar_archive(ev_avatar);
        av.refresh_base_weights(asset);
        ava::Dataset data = ava::load_dataset(ev_data);
        ava::MetricTable table = ava::evaluate(av, asset, data);
        ava::write_metric_csv(table, ev_out);
        char buf[128];
        std::snprintf(buf, sizeof buf, "eval: full psnr %.3f ssim %.5f",
                      table.mean("full", &ava::MetricRow::psnr),
                      table.mean("full", &ava::MetricRow::ssim));
        info(buf);
        return 0;
    }

    if (*synth_cmd) {
        ava::SynthOptions opt;
        opt.image_size = sy_size;
        opt.train_frames = sy_train;
        opt.test_frames = sy_test;
        opt.seed = sy_seed;
        ava::emit_fixture(sy_out, opt);
        info("synth: fixture written to " + sy_out);
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ava::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ava::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 2;
    }
}
