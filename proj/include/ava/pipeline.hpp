#pragma once

#include "ava/align.hpp"
#include "ava/body_model.hpp"
#include "ava/densify.hpp"
#include "ava/gaussian_avatar.hpp"
#include "ava/image_io.hpp"
#include "ava/objectives.hpp"
#include "ava/rasterizer.hpp"
#include "ava/synthetic.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace ava {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Camera JSON

inline nlohmann::json camera_to_json(const Camera& cam) {
    return {{"fx", cam.fx},       {"fy", cam.fy},           {"cx", cam.cx},
            {"cy", cam.cy},       {"width", cam.width},     {"height", cam.height},
            {"near", cam.near_plane}, {"far", cam.far_plane}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
    Camera cam;
    cam.fx = j["fx"].get<double>();
    cam.fy = j["fy"].get<double>();
    cam.cx = j["cx"].get<double>();
    cam.cy = j["cy"].get<double>();
    cam.width = j["width"].get<int>();
    cam.height = j["height"].get<int>();
    if (j.contains("near")) cam.near_plane = j["near"].get<double>();
    if (j.contains("far")) cam.far_plane = j["far"].get<double>();
    cam.validate();
    return cam;
}

// ---------------------------------------------------------------------------
// Dataset

struct DatasetFrame {
    std::string name;
    fs::path image_path, mask_path, pose_path;
    Image image;  // H x W x 3
    Image mask;   // H x W
    FramePose pose;
};

struct Dataset {
    std::vector<DatasetFrame> frames;
    Camera camera;
    std::string identity;
    std::string split;
};

// Layout: root/{images,masks,poses}/<name>.{png,png,json} + camera.json.
// Frames are ordered by sorted image name; any inconsistency produces an
// itemized hard failure.
inline Dataset load_dataset(const fs::path& root) {
    std::vector<std::string> problems;
    for (const char* sub : {"images", "masks", "poses"})
        if (!fs::is_directory(root / sub)) problems.push_back("missing directory: " + (root / sub).string());
    if (!fs::is_regular_file(root / "camera.json"))
        problems.push_back("missing file: " + (root / "camera.json").string());
    if (!problems.empty()) {
        std::string msg = "dataset load failed:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ValidationError(msg);
    }

    Dataset ds;
    ds.split = root.filename().string();
    ds.identity = root.parent_path().filename().string();
    {
        std::ifstream in(root / "camera.json");
        nlohmann::json j;
        in >> j;
        ds.camera = camera_from_json(j);
    }

    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(root / "images"))
        if (e.path().extension() == ".png") names.push_back(e.path().stem().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) problems.push_back("no images in " + (root / "images").string());

    for (const auto& name : names) {
        DatasetFrame f;
        f.name = name;
        f.image_path = root / "images" / (name + ".png");
        f.mask_path = root / "masks" / (name + ".png");
        f.pose_path = root / "poses" / (name + ".json");
        if (!fs::is_regular_file(f.mask_path)) {
            problems.push_back("missing mask file: " + f.mask_path.string());
            continue;
        }
        if (!fs::is_regular_file(f.pose_path)) {
            problems.push_back("missing pose file: " + f.pose_path.string());
            continue;
        }
        ds.frames.push_back(std::move(f));
    }
    if (!problems.empty()) {
        std::string msg = "dataset load failed:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ValidationError(msg);
    }

    for (auto& f : ds.frames) {
        f.image = read_png(f.image_path.string());
        require(f.image.channels >= 3, "dataset: image must be RGB: " + f.image_path.string());
        if (f.image.channels > 3) {
            Image rgb(f.image.height, f.image.width, 3);
            for (int y = 0; y < f.image.height; ++y)
                for (int x = 0; x < f.image.width; ++x)
                    for (int c = 0; c < 3; ++c) rgb.at(y, x, c) = f.image.at(y, x, c);
            f.image = std::move(rgb);
        }
        Image m = read_png(f.mask_path.string());
        Image mask1(m.height, m.width, 1);
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x) mask1.at(y, x) = m.at(y, x, 0);
        f.mask = std::move(mask1);
        require(f.image.height == ds.camera.height && f.image.width == ds.camera.width,
                "dataset: resolution of " + f.image_path.string() + " disagrees with camera");
        require(f.mask.height == f.image.height && f.mask.width == f.image.width,
                "dataset: mask resolution mismatch for " + f.mask_path.string());
        std::ifstream in(f.pose_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("dataset: bad pose file " + f.pose_path.string() + ": " + e.what());
        }
        pose_from_json(j, f.pose.theta, f.pose.beta, f.pose.psi, f.pose.translation);
    }
    return ds;
}

inline void check_dataset_against_model(const Dataset& ds, const BodyModelAsset& asset) {
    for (const auto& f : ds.frames) {
        require(f.pose.theta.rows() == asset.joint_count(),
                "pose " + f.pose_path.string() + ": joint count " +
                    std::to_string(f.pose.theta.rows()) + " != model " +
                    std::to_string(asset.joint_count()));
        require(f.pose.beta.size() == asset.shape_dim(),
                "pose " + f.pose_path.string() + ": shape dim mismatch");
        require(f.pose.psi.size() == asset.expression_dim(),
                "pose " + f.pose_path.string() + ": expression dim mismatch");
    }
}

// ---------------------------------------------------------------------------
// Training configuration

struct LearningRates {
    double position = 1.6e-4;        // scaled by scene extent, decays to position_final
    double position_final = 1.6e-6;
    double scale = 5e-3;
    double rotation = 1e-3;
    double opacity = 5e-2;
    double sh = 2.5e-3;
    double nets = 1e-3;
};

struct TrainConfig {
    int total_iterations = 2000;
    int densify_start = 400;
    int densify_end = 1000;
    LearningRates lr;
    LossWeights loss_weights;
    DensifyConfig densify;
    uint64_t seed = 1;
    int sh_degree = 0;
    int eval_every = 0;  // 0 = off
    Vec3 background = Vec3::Zero();
    AvatarArchitecture architecture;

    void validate() const {
        require(total_iterations >= 0, "train config: negative iteration count");
        require(0 <= densify_start && densify_start < densify_end &&
                    densify_end <= std::max(total_iterations, densify_end),
                "train config: need 0 <= densify_start < densify_end");
        loss_weights.validate();
        densify.validate();
    }
};

// Flat key=value config file; '#' starts a comment. Unknown keys are
// rejected so typos fail loudly.
inline std::map<std::string, std::string> parse_flat_config(const fs::path& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open config file: " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)); };
        line.erase(line.begin(), std::find_if_not(line.begin(), line.end(), is_space));
        while (!line.empty() && is_space(line.back())) line.pop_back();
        if (line.empty()) continue;
        auto eq = line.find('=');
        require(eq != std::string::npos,
                "config line " + std::to_string(lineno) + ": expected key=value");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        while (!key.empty() && is_space(key.back())) key.pop_back();
        val.erase(val.begin(), std::find_if_not(val.begin(), val.end(), is_space));
        kv[key] = val;
    }
    return kv;
}

inline void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, val] : kv) {
        auto d = [&] { return std::stod(val); };
        auto i = [&] { return std::stoi(val); };
        if (key == "total_iterations") cfg.total_iterations = i();
        else if (key == "densify_start") cfg.densify_start = i();
        else if (key == "densify_end") cfg.densify_end = i();
        else if (key == "densify_interval") cfg.densify.interval = i();
        else if (key == "densify_adaptive") cfg.densify.adaptive = i() != 0;
        else if (key == "opacity_prune_threshold") cfg.densify.opacity_prune_threshold = d();
        else if (key == "lr_position") cfg.lr.position = d();
        else if (key == "lr_position_final") cfg.lr.position_final = d();
        else if (key == "lr_scale") cfg.lr.scale = d();
        else if (key == "lr_rotation") cfg.lr.rotation = d();
        else if (key == "lr_opacity") cfg.lr.opacity = d();
        else if (key == "lr_sh") cfg.lr.sh = d();
        else if (key == "lr_nets") cfg.lr.nets = d();
        else if (key == "lambda_mask") cfg.loss_weights.lambda_m = d();
        else if (key == "lambda_ssim") cfg.loss_weights.lambda_s = d();
        else if (key == "lambda_perceptual") cfg.loss_weights.lambda_l = d();
        else if (key == "confidence_mu") cfg.loss_weights.mu = d();
        else if (key == "lambda_conf_reg") cfg.loss_weights.lambda_conf_reg = d();
        else if (key == "seed") cfg.seed = static_cast<uint64_t>(std::stoull(val));
        else if (key == "sh_degree") cfg.sh_degree = i();
        else if (key == "eval_every") cfg.eval_every = i();
        else throw ValidationError("config: unknown key '" + key + "'");
    }
    cfg.validate();
}

// ---------------------------------------------------------------------------
// Adam (first-order adaptive moments) over all trainable groups

namespace train_detail {

struct GaussianMoments {
    Vec3 center_m = Vec3::Zero(), center_v = Vec3::Zero();
    Vec4 rot_m = Vec4::Zero(), rot_v = Vec4::Zero();
    Vec3 scale_m = Vec3::Zero(), scale_v = Vec3::Zero();
    double op_m = 0, op_v = 0;
    MatX sh_m, sh_v;
};

struct NetMoments {
    MlpGrads m, v;
    static NetMoments zeros_like(const Mlp& net) {
        return {MlpGrads::zeros_like(net), MlpGrads::zeros_like(net)};
    }
};

constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

inline double adam_step(double grad, double& m, double& v, double lr, double bc1, double bc2) {
    m = kBeta1 * m + (1 - kBeta1) * grad;
    v = kBeta2 * v + (1 - kBeta2) * grad * grad;
    return -lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps);
}

template <typename Vec>
inline void adam_step_vec(const Vec& grad, Vec& m, Vec& v, Vec& param, double lr, double bc1,
                          double bc2) {
    for (int i = 0; i < grad.size(); ++i)
        param(i) += adam_step(grad(i), m(i), v(i), lr, bc1, bc2);
}

inline void adam_step_net(const MlpGrads& grads, NetMoments& mom, Mlp& net, double lr, double bc1,
                          double bc2) {
    for (size_t l = 0; l < net.layers.size(); ++l) {
        MatX& W = net.layers[l].weight;
        for (int r = 0; r < W.rows(); ++r)
            for (int c = 0; c < W.cols(); ++c)
                W(r, c) += adam_step(grads.dweight[l](r, c), mom.m.dweight[l](r, c),
                                     mom.v.dweight[l](r, c), lr, bc1, bc2);
        VecX& b = net.layers[l].bias;
        for (int i = 0; i < b.size(); ++i)
            b(i) += adam_step(grads.dbias[l](i), mom.m.dbias[l](i), mom.v.dbias[l](i), lr, bc1,
                              bc2);
    }
}

}  // namespace train_detail

// ---------------------------------------------------------------------------
// Training

struct TrainLogRow {
    int step = 0;
    int frame = 0;
    double total = 0, l_confidence = 0, l_mask = 0, ssim_value = 0, l_perceptual = 0;
    double ema = 0;
    int live_gaussians = 0;
};

struct TrainResult {
    GaussianAvatar avatar;
    std::vector<TrainLogRow> log;
    std::vector<std::pair<int, DensifyReport>> densify_events;
};

inline void write_train_log(const std::vector<TrainLogRow>& log, const fs::path& path) {
    std::ofstream out(path);
    out << "step,frame,total,l_confidence,l_mask,ssim,l_perceptual,ema,live_gaussians\n";
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%d\n", r.step,
                      r.frame, r.total, r.l_confidence, r.l_mask, r.ssim_value, r.l_perceptual,
                      r.ema, r.live_gaussians);
        out << buf;
    }
}

inline void write_densify_log(const std::vector<std::pair<int, DensifyReport>>& events,
                              const fs::path& path) {
    std::ofstream out(path);
    out << "step,part,splits,clones,prunes,live_count\n";
    for (const auto& [step, rep] : events)
        for (Part p : {Part::Body, Part::Hand, Part::Face})
            out << step << ',' << part_name(p) << ',' << rep.splits.at(p) << ','
                << rep.clones.at(p) << ',' << rep.prunes.at(p) << ',' << rep.live_count << '\n';
}

// Full optimization loop: sample frame, articulate, rasterize, loss,
// backward, Adam update, gradient bookkeeping, periodic densification.
inline TrainResult train(const Dataset& dataset, const BodyModelAsset& asset,
                         const TrainConfig& cfg, const PerceptualScorer& perceptual = nullptr) {
    cfg.validate();
    require(!dataset.frames.empty(), "train: empty dataset");
    check_dataset_against_model(dataset, asset);
    using namespace train_detail;

    TrainResult result;
    GaussianAvatar& av = result.avatar;
    av = init_from_model(asset, cfg.sh_degree, cfg.seed, cfg.architecture);
    const double scene_extent = asset.bbox_diagonal();

    DensifyState dstate = DensifyState::make(cfg.densify, av.size(), scene_extent, cfg.seed + 3);

    std::vector<GaussianMoments> gmom(av.size());
    for (size_t i = 0; i < av.size(); ++i) {
        gmom[i].sh_m = MatX::Zero(3, av.gaussians[i].sh_coeffs.cols());
        gmom[i].sh_v = MatX::Zero(3, av.gaussians[i].sh_coeffs.cols());
    }
    NetMoments lbs_mom = NetMoments::zeros_like(av.lbs_net);
    NetMoments pose_mom = NetMoments::zeros_like(av.pose_net);
    NetMoments conf_mom = NetMoments::zeros_like(av.conf_net);
    int adam_t = 0;

    std::mt19937_64 rng(cfg.seed);
    double ema = 0.0;
    bool ema_init = false;
    const double ema_alpha = 2.0 / (50.0 + 1.0);

    for (int step = 0; step < cfg.total_iterations; ++step) {
        const int fidx = static_cast<int>(rng() % dataset.frames.size());
        const DatasetFrame& frame = dataset.frames[fidx];

        ArticulateCache acache;
        std::vector<FrameGaussian> fg = articulate(av, asset, frame.pose, acache);
        RasterCache rcache;
        RenderOutput render = rasterize(fg, dataset.camera, cfg.background, rcache);
        LossResult loss = total_loss(av.conf_net, render, frame.image, frame.mask,
                                     cfg.loss_weights, perceptual);
        if (!std::isfinite(loss.total))
            throw NumericalError("train: non-finite loss at step " + std::to_string(step) +
                                 " on frame " + frame.name);

        RasterGrads rg = rasterize_backward(fg, rcache, loss.dcolor, Image(), loss.dalpha);
        AvatarGrads ag = AvatarGrads::zeros_like(av);
        articulate_backward(av, asset, frame.pose, acache, rg.frame, ag);

        // Adam update
        ++adam_t;
        const double bc1 = 1.0 - std::pow(kBeta1, adam_t);
        const double bc2 = 1.0 - std::pow(kBeta2, adam_t);
        const double t_frac = cfg.total_iterations > 1
                                  ? static_cast<double>(step) / (cfg.total_iterations - 1)
                                  : 0.0;
        const double lr_pos = scene_extent * cfg.lr.position *
                              std::pow(cfg.lr.position_final / cfg.lr.position, t_frac);
        for (size_t i = 0; i < av.size(); ++i) {
            Gaussian& g = av.gaussians[i];
            GaussianGrads& gg = ag.gaussians[i];
            GaussianMoments& m = gmom[i];
            adam_step_vec(gg.dcenter, m.center_m, m.center_v, g.center, lr_pos, bc1, bc2);
            adam_step_vec(gg.drotation, m.rot_m, m.rot_v, g.rotation, cfg.lr.rotation, bc1, bc2);
            adam_step_vec(gg.dlog_scale, m.scale_m, m.scale_v, g.log_scale, cfg.lr.scale, bc1,
                          bc2);
            g.opacity_logit += adam_step(gg.dopacity_logit, m.op_m, m.op_v, cfg.lr.opacity, bc1,
                                         bc2);
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < g.sh_coeffs.cols(); ++c)
                    g.sh_coeffs(r, c) += adam_step(gg.dsh(r, c), m.sh_m(r, c), m.sh_v(r, c),
                                                   cfg.lr.sh, bc1, bc2);
            g.rotation /= g.rotation.norm();
        }
        adam_step_net(ag.lbs_net, lbs_mom, av.lbs_net, cfg.lr.nets, bc1, bc2);
        adam_step_net(ag.pose_net, pose_mom, av.pose_net, cfg.lr.nets, bc1, bc2);
        adam_step_net(loss.conf_grads, conf_mom, av.conf_net, cfg.lr.nets, bc1, bc2);

        // center moves invalidate the nearest-vertex weight cache
        av.refresh_base_weights(asset);

        ema = ema_init ? (1 - ema_alpha) * ema + ema_alpha * loss.total : loss.total;
        ema_init = true;
        TrainLogRow row{step, fidx, loss.total, loss.l_confidence, loss.l_mask,
                        loss.ssim_value, loss.l_perceptual, ema, static_cast<int>(av.size())};
        result.log.push_back(row);

        // densification bookkeeping
        if (step >= cfg.densify_start && step < cfg.densify_end) {
            std::vector<double> norms = rg.pos_grad_norm;
            std::vector<Vec3> dirs(av.size());
            for (size_t i = 0; i < av.size(); ++i) dirs[i] = ag.gaussians[i].dcenter;
            record_gradients(dstate, norms, dirs);
            if ((step - cfg.densify_start + 1) % cfg.densify.interval == 0) {
                DensifyReport rep = densify_and_prune(av, dstate, asset);
                // remap optimizer state: survivors keep moments, children start fresh
                std::vector<GaussianMoments> new_mom(av.size());
                for (size_t i = 0; i < av.size(); ++i) {
                    int src = rep.survivor_of[i];
                    if (src >= 0) new_mom[i] = gmom[src];
                    new_mom[i].sh_m = MatX::Zero(3, av.gaussians[i].sh_coeffs.cols());
                    new_mom[i].sh_v = new_mom[i].sh_m;
                    if (src >= 0) {
                        new_mom[i].sh_m = gmom[src].sh_m;
                        new_mom[i].sh_v = gmom[src].sh_v;
                    }
                }
                gmom = std::move(new_mom);
                result.densify_events.emplace_back(step, std::move(rep));
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Avatar archive (directory with manifest)

inline void save_avatar_archive(const GaussianAvatar& av, const fs::path& dir,
                                const std::string& model_ref) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["model"] = model_ref;
    manifest["gaussian_count"] = av.size();
    manifest["files"] = {"avatar.json"};
    std::ofstream(dir / "manifest.json") << manifest.dump(2);
    std::ofstream(dir / "avatar.json") << avatar_to_json(av).dump();
}

inline GaussianAvatar load_avatar_archive(const fs::path& dir, std::string* model_ref = nullptr) {
    std::ifstream mf(dir / "manifest.json");
    require(mf.good(), "avatar archive: missing manifest in " + dir.string());
    nlohmann::json manifest;
    mf >> manifest;
    require(manifest["version"].get<int>() == 1, "avatar archive: unsupported version");
    if (model_ref) *model_ref = manifest["model"].get<std::string>();
    std::ifstream af(dir / "avatar.json");
    require(af.good(), "avatar archive: missing avatar.json in " + dir.string());
    nlohmann::json j;
    af >> j;
    return avatar_from_json(j);
}

// ---------------------------------------------------------------------------
// Rendering and evaluation

inline RenderOutput render_pose(const GaussianAvatar& av, const BodyModelAsset& asset,
                                const FramePose& pose, const Camera& cam,
                                const Vec3& background = Vec3::Zero()) {
    ArticulateCache acache;
    std::vector<FrameGaussian> fg = articulate(av, asset, pose, acache);
    RasterCache rcache;
    return rasterize(fg, cam, background, rcache);
}

struct RegionBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel rectangle
    bool empty = true;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
};

struct RegionBoxes {
    RegionBox full, hand, face;
};

// Projects part-labeled template vertices and takes tight bounds padded by
// 10%, clipped to the image. A part with no on-screen vertex is flagged
// empty.
inline RegionBoxes region_boxes(const BodyModelAsset& asset, const FramePose& pose,
                                const Camera& cam, double padding = 0.10) {
    PoseParams pp;
    pp.joint_rotations = pose.theta;
    pp.global_translation = pose.translation;
    MatX verts = posed_vertices(asset, pose.beta, pose.psi, pp);

    auto box_of = [&](auto pred) {
        double x0 = 1e30, y0 = 1e30, x1 = -1e30, y1 = -1e30;
        bool any = false;
        for (int v = 0; v < verts.rows(); ++v) {
            if (!pred(v)) continue;
            double z = verts(v, 2);
            if (z <= cam.near_plane) continue;
            double u = cam.fx * verts(v, 0) / z + cam.cx;
            double w = cam.fy * verts(v, 1) / z + cam.cy;
            if (u < 0 || u >= cam.width || w < 0 || w >= cam.height) continue;
            any = true;
            x0 = std::min(x0, u);
            x1 = std::max(x1, u);
            y0 = std::min(y0, w);
            y1 = std::max(y1, w);
        }
        RegionBox b;
        if (!any) return b;
        double pw = padding * (x1 - x0), ph = padding * (y1 - y0);
        b.x0 = std::clamp(static_cast<int>(std::floor(x0 - pw)), 0, cam.width - 1);
        b.x1 = std::clamp(static_cast<int>(std::ceil(x1 + pw)) + 1, b.x0 + 1, cam.width);
        b.y0 = std::clamp(static_cast<int>(std::floor(y0 - ph)), 0, cam.height - 1);
        b.y1 = std::clamp(static_cast<int>(std::ceil(y1 + ph)) + 1, b.y0 + 1, cam.height);
        b.empty = false;
        return b;
    };

    RegionBoxes rb;
    rb.full = box_of([&](int) { return true; });
    rb.hand = box_of([&](int v) { return asset.part_labels[v] == Part::Hand; });
    rb.face = box_of([&](int v) { return asset.part_labels[v] == Part::Face; });
    return rb;
}

inline Image crop(const Image& img, const RegionBox& b) {
    Image out(b.height(), b.width(), img.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(b.y0 + y, b.x0 + x, c);
    return out;
}

struct MetricRow {
    std::string frame;
    std::string region;
    double psnr = 0, ssim = 0;
    double perceptual = std::numeric_limits<double>::quiet_NaN();
    bool skipped = false;
};

struct MetricTable {
    std::vector<MetricRow> rows;

    double mean(const std::string& region, double MetricRow::*field) const {
        double acc = 0;
        int n = 0;
        for (const auto& r : rows)
            if (r.region == region && !r.skipped) {
                acc += r.*field;
                ++n;
            }
        return n ? acc / n : std::numeric_limits<double>::quiet_NaN();
    }
};

inline void write_metric_csv(const MetricTable& table, const fs::path& path) {
    std::ofstream out(path);
    out << "frame,region,psnr,ssim,perceptual,skipped\n";
    char buf[256];
    for (const auto& r : table.rows) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.10g,%.10g,%.10g,%d\n", r.frame.c_str(),
                      r.region.c_str(), r.psnr, r.ssim, r.perceptual, r.skipped ? 1 : 0);
        out << buf;
    }
}

// PSNR / SSIM per region over the test frames; empty regions are flagged and
// skipped.
inline MetricTable evaluate(const GaussianAvatar& av, const BodyModelAsset& asset,
                            const Dataset& dataset, const PerceptualScorer& perceptual = nullptr,
                            const Vec3& background = Vec3::Zero()) {
    require(!dataset.frames.empty(), "evaluate: empty test split");
    check_dataset_against_model(dataset, asset);
    MetricTable table;
    for (const auto& frame : dataset.frames) {
        RenderOutput render = render_pose(av, asset, frame.pose, dataset.camera, background);
        RegionBoxes rb = region_boxes(asset, frame.pose, dataset.camera);
        auto add = [&](const std::string& name, const RegionBox& box) {
            MetricRow row;
            row.frame = frame.name;
            row.region = name;
            if (box.empty) {
                row.skipped = true;
            } else {
                Image rc = crop(render.color, box), tc = crop(frame.image, box);
                row.psnr = psnr(rc, tc);
                row.ssim = ssim(rc, tc);
                if (perceptual) row.perceptual = perceptual(rc, tc);
            }
            table.rows.push_back(row);
        };
        add("full", rb.full);
        add("hand", rb.hand);
        add("face", rb.face);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Synthetic fixture emission (the `synth` subcommand)

struct SynthOptions {
    int image_size = 128;
    int train_frames = 24;
    int test_frames = 8;
    uint64_t seed = 11;
    double keypoint_noise_px = 1.0;
    AvatarArchitecture architecture;
};

// Emits model.json, the ground-truth avatar archive, train/ and test/
// datasets rendered from the ground-truth avatar, and per-frame detections
// synthesized from the ground-truth poses.
inline void emit_fixture(const fs::path& root, const SynthOptions& opt = {}) {
    fs::create_directories(root);
    BodyModelAsset asset = make_cylinder_arm_model();
    save_model(asset, (root / "model.json").string());
    GaussianAvatar gt = make_ground_truth_avatar(asset, opt.seed, opt.architecture);
    save_avatar_archive(gt, root / "gt_avatar", "model.json");
    Camera cam = make_fixture_camera(opt.image_size);

    std::mt19937_64 noise_rng(opt.seed + 17);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto parts = joint_parts(asset);

    auto emit_split = [&](const std::string& split, int count, double phase0, double phase_step,
                          bool with_detections) {
        fs::path dir = root / split;
        for (const char* sub : {"images", "masks", "poses"}) fs::create_directories(dir / sub);
        if (with_detections) fs::create_directories(dir / "detections");
        std::ofstream(dir / "camera.json") << camera_to_json(cam).dump(2);
        for (int f = 0; f < count; ++f) {
            char name[16];
            std::snprintf(name, sizeof name, "%06d", f);
            FramePose pose = make_fixture_pose(asset, phase0 + f * phase_step);
            RenderOutput render = render_pose(gt, asset, pose, cam);
            write_png(render.color, (dir / "images" / (std::string(name) + ".png")).string());
            write_png(render.alpha, (dir / "masks" / (std::string(name) + ".png")).string());
            std::ofstream(dir / "poses" / (std::string(name) + ".json"))
                << pose_to_json(pose.theta, pose.beta, pose.psi, pose.translation).dump();

            if (with_detections) {
                PoseParams pp;
                pp.joint_rotations = pose.theta;
                pp.global_translation = pose.translation;
                MatX shaped = shaped_template(asset, pose.beta, pose.psi, pose.theta);
                FkResult fk = forward_kinematics(asset, regress_joints(asset, shaped), pp);
                FrameDetections det;
                det.camera = cam;
                for (int k = 0; k < asset.joint_count(); ++k) {
                    Vec3 P = fk.posed_joints.row(k);
                    Keypoint2d kp;
                    kp.u = cam.fx * P.x() / P.z() + cam.cx + opt.keypoint_noise_px * gauss(noise_rng);
                    kp.v = cam.fy * P.y() / P.z() + cam.cy + opt.keypoint_noise_px * gauss(noise_rng);
                    kp.confidence = 1.0;
                    det.keypoints2d.push_back(kp);
                }
                std::vector<Vec3> body, hand;
                for (int k = 0; k < asset.joint_count(); ++k) {
                    if (asset.parents[k] == kNoParent) continue;
                    if (parts[k] == Part::Body) body.push_back(fk.posed_joints.row(k));
                    if (parts[k] == Part::Hand) hand.push_back(fk.posed_joints.row(k));
                }
                auto to_mat = [](const std::vector<Vec3>& v) {
                    MatX m(v.size(), 3);
                    for (size_t i = 0; i < v.size(); ++i) m.row(i) = v[i].transpose();
                    return m;
                };
                if (!body.empty()) det.body_joints3d = to_mat(body);
                if (!hand.empty()) det.hand_joints3d = to_mat(hand);
                std::ofstream(dir / "detections" / (std::string(name) + ".json"))
                    << detections_to_json(det).dump();
            }
        }
    };

    // phases chosen so the test poses interleave between training poses
    emit_split("train", opt.train_frames, 0.0, 1.0 / opt.train_frames, true);
    emit_split("test", opt.test_frames, 0.5 / opt.train_frames, 1.0 / opt.test_frames, false);
}

}  // namespace ava
