#pragma once

#include "ava/body_model.hpp"
#include "ava/mlp.hpp"

#include <nlohmann/json.hpp>

#include <limits>

namespace ava {

// ---------------------------------------------------------------------------
// Spherical harmonics (evaluated at a fixed per-Gaussian view direction)

namespace sh {
constexpr double C0 = 0.28209479177387814;
constexpr double C1 = 0.4886025119029199;
constexpr double C2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                          -1.0925484305920792, 0.5462742152960396};
constexpr double C3[7] = {-0.5900435899266435, 2.890611442640554,  -0.4570457994644658,
                          0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                          -0.5900435899266435};

inline int coeff_count(int degree) { return (degree + 1) * (degree + 1); }

// Per-basis-function scalar weights for direction d; length (deg+1)^2.
inline VecX basis(int degree, const Vec3& d) {
    VecX b(coeff_count(degree));
    b(0) = C0;
    if (degree >= 1) {
        b(1) = -C1 * d.y();
        b(2) = C1 * d.z();
        b(3) = -C1 * d.x();
    }
    if (degree >= 2) {
        double xx = d.x() * d.x(), yy = d.y() * d.y(), zz = d.z() * d.z();
        double xy = d.x() * d.y(), yz = d.y() * d.z(), xz = d.x() * d.z();
        b(4) = C2[0] * xy;
        b(5) = C2[1] * yz;
        b(6) = C2[2] * (2.0 * zz - xx - yy);
        b(7) = C2[3] * xz;
        b(8) = C2[4] * (xx - yy);
        if (degree >= 3) {
            b(9) = C3[0] * d.y() * (3.0 * xx - yy);
            b(10) = C3[1] * xy * d.z();
            b(11) = C3[2] * d.y() * (4.0 * zz - xx - yy);
            b(12) = C3[3] * d.z() * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b(13) = C3[4] * d.x() * (4.0 * zz - xx - yy);
            b(14) = C3[5] * d.z() * (xx - yy);
            b(15) = C3[6] * d.x() * (xx - 3.0 * yy);
        }
    }
    return b;
}
}  // namespace sh

// ---------------------------------------------------------------------------
// Gaussian primitive

struct Gaussian {
    Vec3 center = Vec3::Zero();          // canonical space
    Vec4 rotation = Vec4(1, 0, 0, 0);    // quaternion (w, x, y, z), kept near unit
    Vec3 log_scale = Vec3::Zero();
    double opacity_logit = 0.0;          // alpha = sigmoid(opacity_logit)
    MatX sh_coeffs;                      // 3 x (deg+1)^2
    Part part = Part::Body;
};

inline Mat3 quat_to_matrix(const Vec4& q) {
    double w = q(0), x = q(1), y = q(2), z = q(3);
    Mat3 R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return R;
}

// Gradient on the (unit) quaternion from a gradient on R.
inline Vec4 quat_to_matrix_backward(const Vec4& q, const Mat3& dR) {
    double w = q(0), x = q(1), y = q(2), z = q(3);
    Mat3 dRw, dRx, dRy, dRz;
    dRw << 0, -z, y, z, 0, -x, -y, x, 0;
    dRx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dRy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dRz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    Vec4 g;
    g(0) = 2.0 * dRw.cwiseProduct(dR).sum();
    g(1) = 2.0 * dRx.cwiseProduct(dR).sum();
    g(2) = 2.0 * dRy.cwiseProduct(dR).sum();
    g(3) = 2.0 * dRz.cwiseProduct(dR).sum();
    return g;
}

// Chains a unit-quaternion gradient through normalization to the raw vector.
inline Vec4 quat_normalize_backward(const Vec4& raw, const Vec4& dunit) {
    double n = raw.norm();
    Vec4 u = raw / n;
    return (dunit - u * dunit.dot(u)) / n;
}

// Sigma^c = R diag(exp(2 s)) R^T.
inline Mat3 canonical_covariance(const Vec4& unit_q, const Vec3& log_scale) {
    Mat3 R = quat_to_matrix(unit_q);
    Vec3 d = (2.0 * log_scale).array().exp();
    return R * d.asDiagonal() * R.transpose();
}

// ---------------------------------------------------------------------------
// Avatar

struct FramePose {
    MatX theta;                      // K x 3 input pose (pre-refinement)
    VecX beta;
    VecX psi;
    Vec3 translation = Vec3::Zero();
};

struct GaussianAvatar {
    std::vector<Gaussian> gaussians;
    Mlp lbs_net;        // positional-encoded center -> K weight offsets
    Mlp pose_net;       // flattened pose -> log of the pointwise scaling
    Mlp conf_net;       // per-pixel (r,g,b,depth) -> confidence logit
    PosEncoding encoding{4, true};
    MatX base_weights;  // per-Gaussian row of nearest template vertex weights
    double epsilon = 1e-8;
    int sh_degree = 0;

    size_t size() const { return gaussians.size(); }

    // Nearest-template-vertex weight rows; call after any center change or
    // densification event. Brute force (fine at this scale).
    void refresh_base_weights(const BodyModelAsset& asset) {
        const int M = static_cast<int>(gaussians.size());
        base_weights.resize(M, asset.joint_count());
        for (int i = 0; i < M; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int v = 0; v < asset.vertex_count(); ++v) {
                double d = (Vec3(asset.template_vertices.row(v)) - gaussians[i].center).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = v;
                }
            }
            base_weights.row(i) = asset.skin_weights.row(best);
        }
    }
};

struct AvatarArchitecture {
    std::vector<int> lbs_hidden{128, 128, 128};
    std::vector<int> pose_hidden{64};
    std::vector<int> conf_hidden{32, 32};
    int pos_enc_frequencies = 4;
};

inline GaussianAvatar init_from_model(const BodyModelAsset& asset, int sh_degree,
                                      uint64_t seed = 7,
                                      const AvatarArchitecture& arch = {}) {
    GaussianAvatar av;
    av.sh_degree = sh_degree;
    av.encoding = PosEncoding{arch.pos_enc_frequencies, true};
    const int N = asset.vertex_count();
    const int K = asset.joint_count();
    av.gaussians.reserve(N);
    for (int v = 0; v < N; ++v) {
        Gaussian g;
        g.center = asset.template_vertices.row(v);
        // isotropic scale from mean distance to the 3 nearest other vertices
        std::vector<double> d2;
        d2.reserve(N - 1);
        for (int u = 0; u < N; ++u) {
            if (u == v) continue;
            d2.push_back((asset.template_vertices.row(u) - asset.template_vertices.row(v))
                             .squaredNorm());
        }
        std::partial_sort(d2.begin(), d2.begin() + std::min<size_t>(3, d2.size()), d2.end());
        double mean_d = 0.0;
        int cnt = static_cast<int>(std::min<size_t>(3, d2.size()));
        for (int i = 0; i < cnt; ++i) mean_d += std::sqrt(d2[i]);
        mean_d = cnt ? mean_d / cnt : 1e-4;
        mean_d = std::max(mean_d, 1e-4);  // duplicate-vertex floor
        g.log_scale = Vec3::Constant(std::log(mean_d));
        g.opacity_logit = logit(0.1);
        g.sh_coeffs = MatX::Zero(3, sh::coeff_count(sh_degree));  // mid-gray
        g.part = asset.part_labels[v];
        av.gaussians.push_back(std::move(g));
    }
    const int enc_dim = av.encoding.output_dim(3);
    std::vector<int> lbs_widths{enc_dim};
    for (int w : arch.lbs_hidden) lbs_widths.push_back(w);
    lbs_widths.push_back(K);
    av.lbs_net = Mlp::make(lbs_widths, Activation::Relu, seed, /*zero_init_last=*/true);

    std::vector<int> pose_widths{3 * K};
    for (int w : arch.pose_hidden) pose_widths.push_back(w);
    pose_widths.push_back(3 * K);
    av.pose_net = Mlp::make(pose_widths, Activation::Tanh, seed + 1, /*zero_init_last=*/true);

    std::vector<int> conf_widths{4};
    for (int w : arch.conf_hidden) conf_widths.push_back(w);
    conf_widths.push_back(1);
    av.conf_net = Mlp::make(conf_widths, Activation::Relu, seed + 2, /*zero_init_last=*/true);

    av.refresh_base_weights(asset);
    return av;
}

// theta = theta_in (pointwise*) exp(pose_net(theta_in)), flattened row-major.
inline MatX refine_pose(const GaussianAvatar& av, const MatX& theta_in,
                        MlpCache* cache = nullptr, VecX* scale_out = nullptr) {
    VecX flat(theta_in.size());
    const int K = static_cast<int>(theta_in.rows());
    for (int k = 0; k < K; ++k)
        for (int a = 0; a < 3; ++a) flat(3 * k + a) = theta_in(k, a);
    VecX u = mlp_forward(av.pose_net, flat, cache);
    VecX s = u.array().exp();
    if (scale_out) *scale_out = s;
    MatX out(K, 3);
    for (int k = 0; k < K; ++k)
        for (int a = 0; a < 3; ++a) out(k, a) = theta_in(k, a) * s(3 * k + a);
    return out;
}

// Softmax of log(base + eps) + offsets; rows land exactly on the simplex.
inline VecX blend_weight_row(const VecX& base, const VecX& offsets, double eps) {
    VecX a = (base.array() + eps).log().matrix() + offsets;
    double m = a.maxCoeff();
    VecX e = (a.array() - m).exp();
    return e / e.sum();
}

// Frame-space Gaussian with everything the rasterizer needs.
struct FrameGaussian {
    Vec3 mean;
    Mat3 cov;
    double alpha;
    Vec3 rgb;
    int source_index;
};

// Forward cache for articulate(); owned by the caller across fwd/bwd.
struct ArticulateCache {
    MatX theta_refined;          // K x 3
    MlpCache pose_cache;
    VecX pose_scale;             // exp of pose_net output
    MatX shaped;                 // N x 3
    MatX joints;                 // K x 3
    FkResult fk;
    std::vector<VecX> enc;       // per-Gaussian encoding input value
    std::vector<MlpCache> lbs_caches;
    MatX weights;                // M x K blended weights
    std::vector<Mat3> G;         // per-Gaussian blended rotation
    std::vector<Vec3> b;
    std::vector<Vec4> unit_q;
    std::vector<Mat3> Rq;        // quaternion rotation
    std::vector<Mat3> cov_c;     // canonical covariance
    std::vector<VecX> sh_basis;  // per-Gaussian SH basis at view direction
    bool valid = false;
};

inline VecX blended_weights_single(const GaussianAvatar& av, int i, MlpCache* cache,
                                   VecX* enc_out) {
    VecX enc = pos_encode(av.gaussians[i].center, av.encoding);
    if (enc_out) *enc_out = enc;
    VecX offsets = mlp_forward(av.lbs_net, enc, cache);
    return blend_weight_row(av.base_weights.row(i), offsets, av.epsilon);
}

// All per-Gaussian blended LBS weight rows (M x K).
inline MatX blended_weights(const GaussianAvatar& av) {
    const int M = static_cast<int>(av.size());
    MatX w(M, static_cast<int>(av.base_weights.cols()));
    for (int i = 0; i < M; ++i) w.row(i) = blended_weights_single(av, i, nullptr, nullptr).transpose();
    return w;
}

// Canonical -> frame space articulation. `camera_origin` fixes the SH view
// direction (treated as constant in the backward pass; exact for degree 0).
inline std::vector<FrameGaussian> articulate(const GaussianAvatar& av,
                                             const BodyModelAsset& asset,
                                             const FramePose& pose, ArticulateCache& cache,
                                             const Vec3& camera_origin = Vec3::Zero()) {
    const int M = static_cast<int>(av.size());
    const int K = asset.joint_count();
    require(av.base_weights.rows() == M, "articulate: stale base weight cache");

    cache.theta_refined = refine_pose(av, pose.theta, &cache.pose_cache, &cache.pose_scale);
    cache.shaped = shaped_template(asset, pose.beta, pose.psi, cache.theta_refined);
    cache.joints = regress_joints(asset, cache.shaped);
    PoseParams pp;
    pp.joint_rotations = cache.theta_refined;
    pp.global_translation = pose.translation;
    cache.fk = forward_kinematics(asset, cache.joints, pp);

    for (int k = 0; k < K; ++k)
        if (!cache.fk.skinning[k].G.allFinite() || !cache.fk.skinning[k].b.allFinite())
            throw NumericalError("articulate: non-finite joint transform at joint " +
                                 std::to_string(k));

    cache.enc.resize(M);
    cache.lbs_caches.resize(M);
    cache.weights.resize(M, K);
    cache.G.resize(M);
    cache.b.resize(M);
    cache.unit_q.resize(M);
    cache.Rq.resize(M);
    cache.cov_c.resize(M);
    cache.sh_basis.resize(M);

    std::vector<FrameGaussian> out(M);
    for (int i = 0; i < M; ++i) {
        const Gaussian& g = av.gaussians[i];
        VecX w = blended_weights_single(av, i, &cache.lbs_caches[i], &cache.enc[i]);
        cache.weights.row(i) = w.transpose();

        Mat3 G = Mat3::Zero();
        Vec3 b = Vec3::Zero();
        for (int k = 0; k < K; ++k) {
            G += w(k) * cache.fk.skinning[k].G;
            b += w(k) * cache.fk.skinning[k].b;
        }
        cache.G[i] = G;
        cache.b[i] = b;

        Vec4 uq = g.rotation / g.rotation.norm();
        cache.unit_q[i] = uq;
        cache.Rq[i] = quat_to_matrix(uq);
        Vec3 d = (2.0 * g.log_scale).array().exp();
        cache.cov_c[i] = cache.Rq[i] * d.asDiagonal() * cache.Rq[i].transpose();

        FrameGaussian& fg = out[i];
        fg.mean = G * g.center + b;
        fg.cov = G * cache.cov_c[i] * G.transpose();
        fg.alpha = sigmoid(g.opacity_logit);
        Vec3 dir = fg.mean - camera_origin;
        double n = dir.norm();
        dir = n > 1e-12 ? Vec3(dir / n) : Vec3(0, 0, 1);
        cache.sh_basis[i] = sh::basis(av.sh_degree, dir);
        fg.rgb = g.sh_coeffs * cache.sh_basis[i] + Vec3::Constant(0.5);
        fg.source_index = i;
    }
    cache.valid = true;
    return out;
}

struct GaussianGrads {
    Vec3 dcenter = Vec3::Zero();
    Vec4 drotation = Vec4::Zero();    // raw quaternion
    Vec3 dlog_scale = Vec3::Zero();
    double dopacity_logit = 0.0;
    MatX dsh;                          // 3 x coeffs
};

struct AvatarGrads {
    std::vector<GaussianGrads> gaussians;
    MlpGrads lbs_net;
    MlpGrads pose_net;

    static AvatarGrads zeros_like(const GaussianAvatar& av) {
        AvatarGrads g;
        g.gaussians.resize(av.size());
        for (size_t i = 0; i < av.size(); ++i)
            g.gaussians[i].dsh = MatX::Zero(3, av.gaussians[i].sh_coeffs.cols());
        g.lbs_net = MlpGrads::zeros_like(av.lbs_net);
        g.pose_net = MlpGrads::zeros_like(av.pose_net);
        return g;
    }
};

// Upstream gradients on the frame-space Gaussians.
struct FrameGaussianGrads {
    Vec3 dmean = Vec3::Zero();
    Mat3 dcov = Mat3::Zero();
    double dalpha = 0.0;
    Vec3 drgb = Vec3::Zero();
};

// Reverse of articulate(): routes frame-space gradients back to every Gaussian
// parameter and both articulation networks.
inline void articulate_backward(const GaussianAvatar& av, const BodyModelAsset& asset,
                                const FramePose& pose, const ArticulateCache& cache,
                                const std::vector<FrameGaussianGrads>& dframe,
                                AvatarGrads& grads) {
    require(cache.valid, "articulate_backward: stale cache");
    const int M = static_cast<int>(av.size());
    const int K = asset.joint_count();
    require(static_cast<int>(dframe.size()) == M, "articulate_backward: grad count mismatch");

    std::vector<JointTransform> dA(K);  // zero-initialized transforms as grad holders
    for (auto& t : dA) {
        t.G = Mat3::Zero();
        t.b = Vec3::Zero();
    }

    for (int i = 0; i < M; ++i) {
        const Gaussian& g = av.gaussians[i];
        GaussianGrads& gg = grads.gaussians[i];
        const FrameGaussianGrads& df = dframe[i];
        const Mat3& G = cache.G[i];
        const Mat3& covc = cache.cov_c[i];

        // color and opacity
        gg.dsh += df.drgb * cache.sh_basis[i].transpose();
        double a = sigmoid(g.opacity_logit);
        gg.dopacity_logit += df.dalpha * a * (1.0 - a);

        // mean = G c + b ; cov = G covc G^T
        Mat3 dG = df.dmean * g.center.transpose();
        Vec3 db = df.dmean;
        gg.dcenter += G.transpose() * df.dmean;
        dG += (df.dcov + df.dcov.transpose()) * G * covc;
        Mat3 dcovc = G.transpose() * df.dcov * G;

        // covc = R D R^T with D = diag(exp(2 s))
        const Mat3& R = cache.Rq[i];
        Vec3 d = (2.0 * g.log_scale).array().exp();
        Mat3 dR = (dcovc + dcovc.transpose()) * R * d.asDiagonal();
        Vec3 dD = (R.transpose() * dcovc * R).diagonal();
        gg.dlog_scale += (dD.array() * d.array() * 2.0).matrix();
        Vec4 duq = quat_to_matrix_backward(cache.unit_q[i], dR);
        gg.drotation += quat_normalize_backward(g.rotation, duq);

        // blended transform
        VecX dw = VecX::Zero(K);
        for (int k = 0; k < K; ++k) {
            double w = cache.weights(i, k);
            dw(k) = cache.fk.skinning[k].G.cwiseProduct(dG).sum() +
                    cache.fk.skinning[k].b.dot(db);
            dA[k].G += w * dG;
            dA[k].b += w * db;
        }

        // softmax backward; logits are log(base+eps) + offsets
        VecX w = cache.weights.row(i).transpose();
        VecX da = (dw - VecX::Constant(K, dw.dot(w))).cwiseProduct(w);
        VecX denc = mlp_backward(av.lbs_net, cache.lbs_caches[i], da, grads.lbs_net);
        gg.dcenter += pos_encode_backward(g.center, av.encoding, denc);
    }

    // FK backward: transforms depend on refined theta directly and on rest
    // joints through the pose blendshape.
    PoseParams pp;
    pp.joint_rotations = cache.theta_refined;
    pp.global_translation = pose.translation;
    FkGrads fkg = forward_kinematics_backward(asset, cache.joints, pp, cache.fk, dA, MatX());

    MatX dtheta = fkg.dtheta;  // K x 3
    // joints = J_reg * shaped ; shaped depends on theta via the pose basis
    MatX dverts = asset.joint_regressor.transpose() * fkg.djoints;  // N x 3
    VecX dflat(3 * asset.vertex_count());
    for (int v = 0; v < asset.vertex_count(); ++v)
        for (int a = 0; a < 3; ++a) dflat(3 * v + a) = dverts(v, a);
    VecX dfeat = asset.pose_basis.transpose() * dflat;
    pose_feature_backward(asset, cache.theta_refined, dfeat, dtheta);

    // theta = theta_in (*) exp(u)
    VecX du(3 * K);
    for (int k = 0; k < K; ++k)
        for (int a = 0; a < 3; ++a)
            du(3 * k + a) = dtheta(k, a) * pose.theta(k, a) * cache.pose_scale(3 * k + a);
    mlp_backward(av.pose_net, cache.pose_cache, du, grads.pose_net);
}

// ---------------------------------------------------------------------------
// Archive (gaussians + nets + manifest), JSON based

inline nlohmann::json avatar_to_json(const GaussianAvatar& av) {
    nlohmann::json j;
    j["sh_degree"] = av.sh_degree;
    j["epsilon"] = av.epsilon;
    j["encoding"] = {{"num_frequencies", av.encoding.num_frequencies},
                     {"include_input", av.encoding.include_input}};
    nlohmann::json gs = nlohmann::json::array();
    for (const auto& g : av.gaussians) {
        nlohmann::json gj;
        gj["center"] = {g.center.x(), g.center.y(), g.center.z()};
        gj["rotation"] = {g.rotation(0), g.rotation(1), g.rotation(2), g.rotation(3)};
        gj["log_scale"] = {g.log_scale.x(), g.log_scale.y(), g.log_scale.z()};
        gj["opacity_logit"] = g.opacity_logit;
        nlohmann::json shj = nlohmann::json::array();
        for (int c = 0; c < g.sh_coeffs.cols(); ++c)
            shj.push_back({g.sh_coeffs(0, c), g.sh_coeffs(1, c), g.sh_coeffs(2, c)});
        gj["sh"] = shj;
        gj["part"] = part_name(g.part);
        gs.push_back(gj);
    }
    j["gaussians"] = gs;
    j["lbs_net"] = mlp_to_json(av.lbs_net);
    j["pose_net"] = mlp_to_json(av.pose_net);
    j["conf_net"] = mlp_to_json(av.conf_net);
    return j;
}

inline GaussianAvatar avatar_from_json(const nlohmann::json& j) {
    GaussianAvatar av;
    av.sh_degree = j["sh_degree"].get<int>();
    av.epsilon = j["epsilon"].get<double>();
    av.encoding.num_frequencies = j["encoding"]["num_frequencies"].get<int>();
    av.encoding.include_input = j["encoding"]["include_input"].get<bool>();
    for (const auto& gj : j["gaussians"]) {
        Gaussian g;
        g.center = Vec3(gj["center"][0], gj["center"][1], gj["center"][2]);
        g.rotation = Vec4(gj["rotation"][0], gj["rotation"][1], gj["rotation"][2],
                          gj["rotation"][3]);
        g.log_scale = Vec3(gj["log_scale"][0], gj["log_scale"][1], gj["log_scale"][2]);
        g.opacity_logit = gj["opacity_logit"].get<double>();
        const auto& shj = gj["sh"];
        g.sh_coeffs.resize(3, shj.size());
        for (size_t c = 0; c < shj.size(); ++c)
            for (int ch = 0; ch < 3; ++ch) g.sh_coeffs(ch, c) = shj[c][ch].get<double>();
        g.part = part_from_name(gj["part"].get<std::string>());
        av.gaussians.push_back(std::move(g));
    }
    av.lbs_net = mlp_from_json(j["lbs_net"]);
    av.pose_net = mlp_from_json(j["pose_net"]);
    av.conf_net = mlp_from_json(j["conf_net"]);
    return av;
}

}  // namespace ava
