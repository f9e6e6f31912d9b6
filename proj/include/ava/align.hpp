#pragma once

#include "ava/body_model.hpp"
#include "ava/lbfgs.hpp"
#include "ava/rasterizer.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <optional>
#include <random>

namespace ava {

// ---------------------------------------------------------------------------
// Robust penalty

// psi(r) = rho^2 ||r||^2 / (||r||^2 + rho^2); bounded above by rho^2.
inline double geman_mcclure(const VecX& residual, double rho) {
    require(rho > 0, "geman_mcclure: rho must be positive");
    double u = residual.squaredNorm();
    return rho * rho * u / (u + rho * rho);
}

// Gradient of psi w.r.t. the residual.
inline VecX geman_mcclure_grad(const VecX& residual, double rho) {
    double u = residual.squaredNorm();
    double denom = u + rho * rho;
    return (2.0 * std::pow(rho, 4) / (denom * denom)) * residual;
}

// ---------------------------------------------------------------------------
// Inputs

struct Keypoint2d {
    double u = 0, v = 0;
    double confidence = 0;  // omega
};

struct FrameDetections {
    std::vector<Keypoint2d> keypoints2d;  // per joint, length K
    std::optional<MatX> body_joints3d;    // B x 3, camera frame
    std::optional<MatX> hand_joints3d;    // H x 3
    Camera camera;

    bool empty() const {
        bool any_kp = false;
        for (const auto& k : keypoints2d)
            if (k.confidence > 0) any_kp = true;
        return !any_kp && !body_joints3d && !hand_joints3d;
    }
};

inline FrameDetections detections_from_json(const nlohmann::json& j) {
    FrameDetections d;
    for (const auto& kp : j["keypoints2d"]) {
        Keypoint2d k{kp[0].get<double>(), kp[1].get<double>(), kp[2].get<double>()};
        require(k.confidence >= 0.0 && k.confidence <= 1.0,
                "detections: keypoint confidence must lie in [0,1]");
        d.keypoints2d.push_back(k);
    }
    auto read_mat = [](const nlohmann::json& arr) {
        MatX m(arr.size(), 3);
        for (size_t r = 0; r < arr.size(); ++r)
            for (int c = 0; c < 3; ++c) m(r, c) = arr[r][c].get<double>();
        return m;
    };
    if (j.contains("body_joints3d") && !j["body_joints3d"].is_null())
        d.body_joints3d = read_mat(j["body_joints3d"]);
    if (j.contains("hand_joints3d") && !j["hand_joints3d"].is_null())
        d.hand_joints3d = read_mat(j["hand_joints3d"]);
    const auto& cj = j["camera"];
    d.camera.fx = cj["fx"].get<double>();
    d.camera.fy = cj["fy"].get<double>();
    d.camera.cx = cj["cx"].get<double>();
    d.camera.cy = cj["cy"].get<double>();
    if (cj.contains("width")) d.camera.width = cj["width"].get<int>();
    if (cj.contains("height")) d.camera.height = cj["height"].get<int>();
    return d;
}

inline nlohmann::json detections_to_json(const FrameDetections& d) {
    nlohmann::json j;
    nlohmann::json kps = nlohmann::json::array();
    for (const auto& k : d.keypoints2d) kps.push_back({k.u, k.v, k.confidence});
    j["keypoints2d"] = kps;
    auto write_mat = [](const MatX& m) {
        nlohmann::json arr = nlohmann::json::array();
        for (int r = 0; r < m.rows(); ++r) arr.push_back({m(r, 0), m(r, 1), m(r, 2)});
        return arr;
    };
    if (d.body_joints3d) j["body_joints3d"] = write_mat(*d.body_joints3d);
    if (d.hand_joints3d) j["hand_joints3d"] = write_mat(*d.hand_joints3d);
    j["camera"] = {{"fx", d.camera.fx}, {"fy", d.camera.fy}, {"cx", d.camera.cx},
                   {"cy", d.camera.cy}, {"width", d.camera.width}, {"height", d.camera.height}};
    return j;
}

// ---------------------------------------------------------------------------
// Joint partition: a joint belongs to the part of the vertex that carries its
// largest skinning weight.

inline std::vector<Part> joint_parts(const BodyModelAsset& asset) {
    const int K = asset.joint_count();
    std::vector<Part> parts(K, Part::Body);
    for (int k = 0; k < K; ++k) {
        int best_v = 0;
        double best_w = -1;
        for (int v = 0; v < asset.vertex_count(); ++v)
            if (asset.skin_weights(v, k) > best_w) {
                best_w = asset.skin_weights(v, k);
                best_v = v;
            }
        parts[k] = asset.part_labels[best_v];
    }
    return parts;
}

// ---------------------------------------------------------------------------
// Pose prior decoder

// Maps a low-dimensional embedding to axis-angle rotations of the non-root
// body joints. decode(0) must be a rest-like pose.
struct PriorDecoder {
    int embedding_dim = 32;
    std::function<VecX(const VecX&)> decode;      // eta -> 3*B axis-angles
    std::function<MatX(const VecX&)> jacobian;    // (3*B) x |eta|
};

// Deterministic linear decoder with near-orthogonal rows (test / default
// decoder; any external decoder can be plugged in instead).
inline PriorDecoder make_linear_prior(int body_joint_count, int embedding_dim = 32,
                                      uint64_t seed = 99, double scale = 0.2) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    MatX A(3 * body_joint_count, embedding_dim);
    for (int r = 0; r < A.rows(); ++r)
        for (int c = 0; c < A.cols(); ++c) A(r, c) = gauss(rng);
    // orthonormal rows via the QR of A^T, then scaled
    Eigen::HouseholderQR<MatX> qr(A.transpose());
    MatX Q = qr.householderQ() * MatX::Identity(embedding_dim, A.rows());
    MatX D = scale * Q.transpose();
    PriorDecoder p;
    p.embedding_dim = embedding_dim;
    p.decode = [D](const VecX& eta) { return VecX(D * eta); };
    p.jacobian = [D](const VecX&) { return D; };
    return p;
}

// ---------------------------------------------------------------------------
// Config

struct FitStage {
    int iterations = 30;
    double lambda_bp = 1.0;
    double lambda_hp = 0.0;
    double hand_face_gamma_scale = 1.0;  // extra emphasis on fine parts
};

struct FitConfig {
    double rho_2d = 100.0;   // px
    double rho_3d = 0.1;     // model units
    double gamma_body = 1.0;
    double gamma_hand = 2.0;
    double gamma_face = 2.0;
    std::vector<FitStage> stages = {{30, 1.0, 0.0, 1.0}, {40, 0.5, 1.0, 1.0}, {60, 0.2, 1.0, 2.0}};
    int embedding_dim = 32;

    void validate() const {
        require(rho_2d > 0 && rho_3d > 0, "fit config: rho must be positive");
        require(gamma_body >= 0 && gamma_hand >= 0 && gamma_face >= 0,
                "fit config: gamma weights must be >= 0");
        require(stages.size() == 3, "fit config: three stages required");
        for (const auto& s : stages)
            require(s.lambda_bp >= 0 && s.lambda_hp >= 0, "fit config: stage weights must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Term evaluation (shared forward/backward core)

namespace align_detail {

// Variable layout for one identity: [beta | per-frame (orient 3, trans 3,
// eta E, extra 3*n_extra)] where extra are the hand/face joints.
struct Layout {
    int shape_dim = 0;
    int embedding_dim = 0;
    int root_joint = 0;
    std::vector<int> body_joints;   // non-root body joints, decoder order
    std::vector<int> extra_joints;  // hand + face joints, ascending
    int n_frames = 0;

    int per_frame() const {
        return 6 + embedding_dim + 3 * static_cast<int>(extra_joints.size());
    }
    int total() const { return shape_dim + n_frames * per_frame(); }
    int frame_offset(int f) const { return shape_dim + f * per_frame(); }
};

inline Layout make_layout(const BodyModelAsset& asset, const FitConfig& cfg, int n_frames) {
    Layout L;
    L.shape_dim = asset.shape_dim();
    L.embedding_dim = cfg.embedding_dim;
    L.n_frames = n_frames;
    auto parts = joint_parts(asset);
    for (int k = 0; k < asset.joint_count(); ++k) {
        if (asset.parents[k] == kNoParent) {
            L.root_joint = k;
        } else if (parts[k] == Part::Body) {
            L.body_joints.push_back(k);
        } else {
            L.extra_joints.push_back(k);
        }
    }
    return L;
}

struct FrameVars {
    Vec3 orient;
    Vec3 translation;
    VecX eta;
    MatX extra;  // n_extra x 3
};

inline FrameVars unpack_frame(const Layout& L, const VecX& x, int f) {
    FrameVars v;
    int o = L.frame_offset(f);
    v.orient = x.segment<3>(o);
    v.translation = x.segment<3>(o + 3);
    v.eta = x.segment(o + 6, L.embedding_dim);
    v.extra.resize(L.extra_joints.size(), 3);
    for (size_t i = 0; i < L.extra_joints.size(); ++i)
        v.extra.row(i) = x.segment<3>(o + 6 + L.embedding_dim + 3 * static_cast<int>(i)).transpose();
    return v;
}

inline MatX assemble_theta(const BodyModelAsset& asset, const Layout& L, const FrameVars& v,
                           const PriorDecoder& prior) {
    MatX theta = MatX::Zero(asset.joint_count(), 3);
    theta.row(L.root_joint) = v.orient.transpose();
    VecX body = prior.decode(v.eta);
    for (size_t i = 0; i < L.body_joints.size(); ++i)
        theta.row(L.body_joints[i]) = body.segment<3>(3 * static_cast<int>(i)).transpose();
    for (size_t i = 0; i < L.extra_joints.size(); ++i)
        theta.row(L.extra_joints[i]) = v.extra.row(i);
    return theta;
}

}  // namespace align_detail

// Per-joint robust 2D reprojection term (joints behind the camera are
// excluded and counted).
inline double loss_2d(const MatX& posed_joints, const FrameDetections& det,
                      const std::vector<double>& gamma, double rho, MatX* dposed = nullptr,
                      int* behind_count = nullptr) {
    const Camera& cam = det.camera;
    double total = 0.0;
    for (int k = 0; k < posed_joints.rows(); ++k) {
        const Keypoint2d& kp = det.keypoints2d[k];
        double w = gamma[k] * kp.confidence;
        if (w == 0.0) continue;
        Vec3 P = posed_joints.row(k);
        if (P.z() <= cam.near_plane) {
            if (behind_count) ++(*behind_count);
            continue;
        }
        VecX r(2);
        r << cam.fx * P.x() / P.z() + cam.cx - kp.u, cam.fy * P.y() / P.z() + cam.cy - kp.v;
        total += w * geman_mcclure(r, rho);
        if (dposed) {
            VecX dr = w * geman_mcclure_grad(r, rho);
            double z2 = P.z() * P.z();
            (*dposed)(k, 0) += dr(0) * cam.fx / P.z();
            (*dposed)(k, 1) += dr(1) * cam.fy / P.z();
            (*dposed)(k, 2) += -dr(0) * cam.fx * P.x() / z2 - dr(1) * cam.fy * P.y() / z2;
        }
    }
    return total;
}

// Robust 3D body-joint term plus the embedding regularizer.
inline double loss_body_prior(const MatX& posed_joints, const std::vector<int>& body_joints,
                              const MatX& targets, const VecX& eta, double rho,
                              MatX* dposed = nullptr, VecX* deta = nullptr) {
    double total = eta.squaredNorm();
    if (deta) *deta += 2.0 * eta;
    for (size_t i = 0; i < body_joints.size(); ++i) {
        int k = body_joints[i];
        VecX r = (posed_joints.row(k) - targets.row(static_cast<int>(i))).transpose();
        total += geman_mcclure(r, rho);
        if (dposed) dposed->row(k) += geman_mcclure_grad(r, rho).transpose();
    }
    return total;
}

// Robust hand term on z coordinates only.
inline double loss_hand_prior(const MatX& posed_joints, const std::vector<int>& hand_joints,
                              const MatX& targets, double rho, MatX* dposed = nullptr) {
    double total = 0.0;
    for (size_t i = 0; i < hand_joints.size(); ++i) {
        int k = hand_joints[i];
        VecX r(1);
        r << posed_joints(k, 2) - targets(static_cast<int>(i), 2);
        total += geman_mcclure(r, rho);
        if (dposed) (*dposed)(k, 2) += geman_mcclure_grad(r, rho)(0);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Sequence fitting

struct FitFrameResult {
    MatX theta;          // K x 3
    Vec3 translation;
    bool skipped = false;
};

struct FitReport {
    std::vector<int> skipped_frames;
    int behind_camera_warnings = 0;
    std::vector<std::vector<double>> stage_objectives;  // per stage value history
    std::vector<LbfgsStatus> stage_status;
};

struct FitResult {
    VecX beta;  // shared across frames
    VecX psi;   // pass-through, kept at initialization
    std::vector<FitFrameResult> frames;
    FitReport report;
};

// Three-stage robust fit of (theta, beta) to multi-source detections; beta is
// shared across the frames of one identity, pose is per frame.
inline FitResult fit_sequence(const std::vector<FrameDetections>& detections,
                              const BodyModelAsset& asset, const FitConfig& cfg,
                              const PriorDecoder& prior) {
    cfg.validate();
    require(!detections.empty(), "fit_sequence: need at least one frame");
    require(prior.embedding_dim == cfg.embedding_dim,
            "fit_sequence: decoder embedding dim disagrees with config");
    using namespace align_detail;

    std::vector<int> valid;
    FitResult out;
    out.frames.resize(detections.size());
    for (size_t f = 0; f < detections.size(); ++f) {
        if (detections[f].empty()) {
            out.frames[f].skipped = true;
            out.frames[f].theta = MatX::Zero(asset.joint_count(), 3);
            out.frames[f].translation = Vec3::Zero();
            out.report.skipped_frames.push_back(static_cast<int>(f));
        } else {
            require(static_cast<int>(detections[f].keypoints2d.size()) == asset.joint_count(),
                    "fit_sequence: frame " + std::to_string(f) +
                        " keypoint count disagrees with the model joint map");
            valid.push_back(static_cast<int>(f));
        }
    }
    require(!valid.empty(), "fit_sequence: no frame has detections");

    Layout L = make_layout(asset, cfg, static_cast<int>(valid.size()));
    auto parts = joint_parts(asset);
    std::vector<double> base_gamma(asset.joint_count());
    for (int k = 0; k < asset.joint_count(); ++k)
        base_gamma[k] = parts[k] == Part::Body ? cfg.gamma_body
                        : parts[k] == Part::Hand ? cfg.gamma_hand
                                                 : cfg.gamma_face;

    // initial guess: rest pose, subject pushed in front of the camera using
    // the mean detected 3D depth when available
    VecX x = VecX::Zero(L.total());
    for (size_t vf = 0; vf < valid.size(); ++vf) {
        const auto& det = detections[valid[vf]];
        double z0 = 2.0 * asset.bbox_diagonal();
        if (det.body_joints3d) z0 = det.body_joints3d->col(2).mean();
        x(L.frame_offset(static_cast<int>(vf)) + 5) = z0;
    }

    int behind_total = 0;

    for (size_t stage_idx = 0; stage_idx < cfg.stages.size(); ++stage_idx) {
        const FitStage& stage = cfg.stages[stage_idx];
        std::vector<double> gamma = base_gamma;
        for (int k = 0; k < asset.joint_count(); ++k)
            if (parts[k] != Part::Body) gamma[k] *= stage.hand_face_gamma_scale;

        Objective obj = [&](const VecX& vars, VecX& grad) {
            grad = VecX::Zero(vars.size());
            VecX beta = vars.head(L.shape_dim);
            double total = 0.0;
            for (size_t vf = 0; vf < valid.size(); ++vf) {
                const FrameDetections& det = detections[valid[vf]];
                FrameVars fv = unpack_frame(L, vars, static_cast<int>(vf));
                MatX theta = assemble_theta(asset, L, fv, prior);
                MatX shaped = shaped_template(asset, beta, VecX::Zero(asset.expression_dim()),
                                              theta);
                MatX joints = regress_joints(asset, shaped);
                PoseParams pp;
                pp.joint_rotations = theta;
                pp.global_translation = fv.translation;
                FkResult fk = forward_kinematics(asset, joints, pp);

                MatX dposed = MatX::Zero(asset.joint_count(), 3);
                VecX deta = VecX::Zero(L.embedding_dim);
                int behind = 0;
                total += loss_2d(fk.posed_joints, det, gamma, cfg.rho_2d, &dposed, &behind);
                behind_total += behind;
                if (det.body_joints3d && stage.lambda_bp > 0) {
                    MatX dp = MatX::Zero(asset.joint_count(), 3);
                    VecX de = VecX::Zero(L.embedding_dim);
                    total += stage.lambda_bp * loss_body_prior(fk.posed_joints, L.body_joints,
                                                               *det.body_joints3d, fv.eta,
                                                               cfg.rho_3d, &dp, &de);
                    dposed += stage.lambda_bp * dp;
                    deta += stage.lambda_bp * de;
                }
                if (det.hand_joints3d && stage.lambda_hp > 0) {
                    std::vector<int> hand;
                    for (int k : L.extra_joints)
                        if (parts[k] == Part::Hand) hand.push_back(k);
                    MatX dp = MatX::Zero(asset.joint_count(), 3);
                    total += stage.lambda_hp * loss_hand_prior(fk.posed_joints, hand,
                                                               *det.hand_joints3d, cfg.rho_3d,
                                                               &dp);
                    dposed += stage.lambda_hp * dp;
                }

                // FK + blendshape chain
                FkGrads fg = forward_kinematics_backward(asset, joints, pp, fk, {}, dposed);
                MatX dtheta = fg.dtheta;
                MatX dverts = asset.joint_regressor.transpose() * fg.djoints;
                VecX dflat(3 * asset.vertex_count());
                for (int v = 0; v < asset.vertex_count(); ++v)
                    for (int a = 0; a < 3; ++a) dflat(3 * v + a) = dverts(v, a);
                grad.head(L.shape_dim) += asset.shape_basis.transpose() * dflat;
                VecX dfeat = asset.pose_basis.transpose() * dflat;
                pose_feature_backward(asset, theta, dfeat, dtheta);

                // scatter theta gradients into the variable layout
                int o = L.frame_offset(static_cast<int>(vf));
                grad.segment<3>(o) += dtheta.row(L.root_joint).transpose();
                grad.segment<3>(o + 3) += fg.dtranslation;
                VecX dbody(3 * L.body_joints.size());
                for (size_t i = 0; i < L.body_joints.size(); ++i)
                    dbody.segment<3>(3 * static_cast<int>(i)) =
                        dtheta.row(L.body_joints[i]).transpose();
                deta += prior.jacobian(fv.eta).transpose() * dbody;
                grad.segment(o + 6, L.embedding_dim) += deta;
                for (size_t i = 0; i < L.extra_joints.size(); ++i)
                    grad.segment<3>(o + 6 + L.embedding_dim + 3 * static_cast<int>(i)) +=
                        dtheta.row(L.extra_joints[i]).transpose();
            }
            return total;
        };

        LbfgsOptions opt;
        opt.max_iterations = stage.iterations;
        opt.gradient_tolerance = 1e-10;
        LbfgsResult res = lbfgs_minimize(obj, x, opt);
        x = res.x;
        out.report.stage_objectives.push_back(res.value_history);
        out.report.stage_status.push_back(res.status);
    }
    out.report.behind_camera_warnings = behind_total;

    out.beta = x.head(L.shape_dim);
    out.psi = VecX::Zero(asset.expression_dim());
    for (size_t vf = 0; vf < valid.size(); ++vf) {
        FrameVars fv = unpack_frame(L, x, static_cast<int>(vf));
        FitFrameResult& fr = out.frames[valid[vf]];
        fr.theta = assemble_theta(asset, L, fv, prior);
        fr.translation = fv.translation;
    }
    return out;
}

// Per-frame pose JSON consumed by the pipeline.
inline nlohmann::json pose_to_json(const MatX& theta, const VecX& beta, const VecX& psi,
                                   const Vec3& translation) {
    nlohmann::json j;
    nlohmann::json tj = nlohmann::json::array();
    for (int k = 0; k < theta.rows(); ++k) tj.push_back({theta(k, 0), theta(k, 1), theta(k, 2)});
    j["theta"] = tj;
    j["beta"] = std::vector<double>(beta.data(), beta.data() + beta.size());
    j["psi"] = std::vector<double>(psi.data(), psi.data() + psi.size());
    j["translation"] = {translation.x(), translation.y(), translation.z()};
    return j;
}

inline void pose_from_json(const nlohmann::json& j, MatX& theta, VecX& beta, VecX& psi,
                           Vec3& translation) {
    const auto& tj = j["theta"];
    theta.resize(tj.size(), 3);
    for (size_t k = 0; k < tj.size(); ++k)
        for (int a = 0; a < 3; ++a) theta(static_cast<int>(k), a) = tj[k][a].get<double>();
    const auto& bj = j["beta"];
    beta.resize(bj.size());
    for (size_t i = 0; i < bj.size(); ++i) beta(i) = bj[i].get<double>();
    const auto& pj = j["psi"];
    psi.resize(pj.size());
    for (size_t i = 0; i < pj.size(); ++i) psi(i) = pj[i].get<double>();
    translation = Vec3(j["translation"][0], j["translation"][1], j["translation"][2]);
}

}  // namespace ava
