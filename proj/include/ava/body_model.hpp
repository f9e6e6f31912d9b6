#pragma once

#include "ava/common.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <fstream>
#include <numeric>

namespace ava {

enum class Part : uint8_t { Body = 0, Hand = 1, Face = 2 };

inline const char* part_name(Part p) {
    switch (p) {
        case Part::Body: return "body";
        case Part::Hand: return "hand";
        case Part::Face: return "face";
    }
    return "?";
}

inline Part part_from_name(const std::string& s) {
    if (s == "body") return Part::Body;
    if (s == "hand") return Part::Hand;
    if (s == "face") return Part::Face;
    throw ValidationError("unknown part label: " + s);
}

constexpr int kNoParent = -1;

// Articulated template model: rest mesh, skeleton, skinning weights and
// linear blendshape bases. Immutable after load; all operations on it are
// pure functions.
struct BodyModelAsset {
    MatX template_vertices;          // N x 3
    std::vector<std::array<int, 3>> faces;
    MatX skin_weights;               // N x K, rows on the simplex
    MatX joint_regressor;            // K x N
    std::vector<int> parents;        // length K, root has kNoParent
    MatX shape_basis;                // 3N x |beta|
    MatX expression_basis;           // 3N x |psi|
    MatX pose_basis;                 // 3N x 9(K-1)
    std::vector<Part> part_labels;   // length N
    std::string units = "m";

    int vertex_count() const { return static_cast<int>(template_vertices.rows()); }
    int joint_count() const { return static_cast<int>(skin_weights.cols()); }
    int shape_dim() const { return static_cast<int>(shape_basis.cols()); }
    int expression_dim() const { return static_cast<int>(expression_basis.cols()); }

    // Joints in topological order (parents before children).
    std::vector<int> topo_order() const {
        const int K = joint_count();
        std::vector<int> order;
        order.reserve(K);
        std::vector<char> placed(K, 0);
        while (static_cast<int>(order.size()) < K) {
            bool progress = false;
            for (int k = 0; k < K; ++k) {
                if (placed[k]) continue;
                if (parents[k] == kNoParent || placed[parents[k]]) {
                    order.push_back(k);
                    placed[k] = 1;
                    progress = true;
                }
            }
            require(progress, "parents do not encode a tree (cycle detected)");
        }
        return order;
    }

    double bbox_diagonal() const {
        Vec3 lo = template_vertices.colwise().minCoeff();
        Vec3 hi = template_vertices.colwise().maxCoeff();
        return (hi - lo).norm();
    }

    void validate() const {
        const int N = vertex_count();
        const int K = joint_count();
        require(N > 0, "template_vertices: empty");
        require(template_vertices.cols() == 3, "template_vertices: need N x 3");
        require(static_cast<int>(skin_weights.rows()) == N, "skin_weights: row count != N");
        for (int v = 0; v < N; ++v) {
            double s = skin_weights.row(v).sum();
            require(std::abs(s - 1.0) <= 1e-6,
                    "skin_weights: row " + std::to_string(v) + " sums to " + std::to_string(s));
            require(skin_weights.row(v).minCoeff() >= 0.0,
                    "skin_weights: row " + std::to_string(v) + " has negative weight");
        }
        require(static_cast<int>(joint_regressor.rows()) == K &&
                static_cast<int>(joint_regressor.cols()) == N,
                "joint_regressor: need K x N");
        require(static_cast<int>(parents.size()) == K, "parents: length != K");
        int roots = 0;
        for (int k = 0; k < K; ++k) {
            if (parents[k] == kNoParent) ++roots;
            else require(parents[k] >= 0 && parents[k] < K,
                         "parents: index out of range at joint " + std::to_string(k));
        }
        require(roots == 1, "parents: need exactly one root, found " + std::to_string(roots));
        topo_order();  // throws on cycles
        require(static_cast<int>(shape_basis.rows()) == 3 * N, "shape_basis: row count != 3N");
        require(static_cast<int>(expression_basis.rows()) == 3 * N,
                "expression_basis: row count != 3N");
        require(static_cast<int>(pose_basis.rows()) == 3 * N, "pose_basis: row count != 3N");
        require(static_cast<int>(pose_basis.cols()) == 9 * (K - 1),
                "pose_basis: column count != 9(K-1)");
        require(static_cast<int>(part_labels.size()) == N, "part_labels: length != N");
        for (const auto& f : faces)
            for (int idx : f)
                require(idx >= 0 && idx < N, "faces: vertex index out of range");
    }
};

struct PoseParams {
    MatX joint_rotations;     // K x 3 axis-angle
    Vec3 global_translation = Vec3::Zero();

    static PoseParams rest(int joint_count) {
        PoseParams p;
        p.joint_rotations = MatX::Zero(joint_count, 3);
        return p;
    }

    // Wraps every axis-angle into magnitude < 2*pi and checks finiteness.
    void canonicalize() {
        require(joint_rotations.allFinite() && global_translation.allFinite(),
                "pose parameters must be finite");
        for (int k = 0; k < joint_rotations.rows(); ++k) {
            Vec3 v = joint_rotations.row(k);
            double a = v.norm();
            if (a >= 2.0 * M_PI) {
                double wrapped = std::fmod(a, 2.0 * M_PI);
                joint_rotations.row(k) = v * (wrapped / a);
            }
        }
    }
};

struct ShapeParams {
    VecX beta;
};
struct ExpressionParams {
    VecX psi;
};

// ---------------------------------------------------------------------------
// Rotations

// Axis-angle to rotation matrix, small-angle Taylor branch below 1e-8.
inline Mat3 rodrigues(const Vec3& v) {
    const double theta2 = v.squaredNorm();
    Mat3 vx;
    vx << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    if (theta2 < 1e-16) {
        return Mat3::Identity() + vx + 0.5 * vx * vx;
    }
    const double theta = std::sqrt(theta2);
    return Mat3::Identity() + (std::sin(theta) / theta) * vx +
           ((1.0 - std::cos(theta)) / theta2) * vx * vx;
}

// d vec(R) / d v as three 3x3 slices dR[i] = dR/dv_i (Gallego & Yezzi form).
inline std::array<Mat3, 3> rodrigues_jacobian(const Vec3& v) {
    const Mat3 R = rodrigues(v);
    std::array<Mat3, 3> dR;
    const double theta2 = v.squaredNorm();
    if (theta2 < 1e-16) {
        for (int i = 0; i < 3; ++i) {
            Vec3 e = Vec3::Unit(i);
            Mat3 ex;
            ex << 0, -e.z(), e.y(), e.z(), 0, -e.x(), -e.y(), e.x(), 0;
            dR[i] = ex;
        }
        return dR;
    }
    Mat3 vx;
    vx << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    for (int i = 0; i < 3; ++i) {
        Vec3 e = Vec3::Unit(i);
        Vec3 w = v.cross((Mat3::Identity() - R) * e);
        Mat3 wx;
        wx << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
        dR[i] = ((v(i) * vx + wx) / theta2) * R;
    }
    return dR;
}

// Maps a 3x3 gradient w.r.t. R into the axis-angle gradient.
inline Vec3 rotation_grad_to_axis_angle(const Vec3& v, const Mat3& dR_grad) {
    auto dR = rodrigues_jacobian(v);
    Vec3 g;
    for (int i = 0; i < 3; ++i) g(i) = dR[i].cwiseProduct(dR_grad).sum();
    return g;
}

// ---------------------------------------------------------------------------
// Blendshapes and skinning

// Flattened (R_k - I) feature over non-root joints in ascending joint index,
// SMPL convention.
inline VecX pose_feature(const BodyModelAsset& asset, const MatX& theta) {
    const int K = asset.joint_count();
    VecX f(9 * (K - 1));
    int slot = 0;
    for (int k = 0; k < K; ++k) {
        if (asset.parents[k] == kNoParent) continue;
        Mat3 R = rodrigues(theta.row(k));
        Mat3 D = R - Mat3::Identity();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) f(9 * slot + 3 * r + c) = D(r, c);
        ++slot;
    }
    return f;
}

// Accumulates d(pose_feature grad) back onto per-joint axis-angle grads.
inline void pose_feature_backward(const BodyModelAsset& asset, const MatX& theta,
                                  const VecX& dfeat, MatX& dtheta) {
    const int K = asset.joint_count();
    int slot = 0;
    for (int k = 0; k < K; ++k) {
        if (asset.parents[k] == kNoParent) continue;
        Mat3 dD;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) dD(r, c) = dfeat(9 * slot + 3 * r + c);
        dtheta.row(k) += rotation_grad_to_axis_angle(theta.row(k), dD).transpose();
        ++slot;
    }
}

// T-bar + B_S(beta) + B_E(psi) + B_P(theta), returned as N x 3.
inline MatX shaped_template(const BodyModelAsset& asset, const VecX& beta, const VecX& psi,
                            const MatX& theta) {
    const int N = asset.vertex_count();
    require(beta.size() == asset.shape_basis.cols(),
            "shape coefficients: length " + std::to_string(beta.size()) + " != basis " +
                std::to_string(asset.shape_basis.cols()));
    require(psi.size() == asset.expression_basis.cols(),
            "expression coefficients: length mismatch with basis");
    require(theta.rows() == asset.joint_count() && theta.cols() == 3,
            "pose: need K x 3 axis-angle");
    VecX disp = asset.shape_basis * beta + asset.expression_basis * psi +
                asset.pose_basis * pose_feature(asset, theta);
    MatX out = asset.template_vertices;
    for (int v = 0; v < N; ++v)
        out.row(v) += Eigen::RowVector3d(disp(3 * v), disp(3 * v + 1), disp(3 * v + 2));
    return out;
}

inline MatX regress_joints(const BodyModelAsset& asset, const MatX& shaped_vertices) {
    require(shaped_vertices.rows() == asset.vertex_count() && shaped_vertices.cols() == 3,
            "regress_joints: vertex array shape mismatch");
    return asset.joint_regressor * shaped_vertices;
}

// Rest-compensated per-joint rigid transform: x -> G x + b maps a rest-space
// point to posed space.
struct JointTransform {
    Mat3 G = Mat3::Identity();
    Vec3 b = Vec3::Zero();
};

struct FkResult {
    std::vector<JointTransform> world;   // chain transforms W_k (no rest compensation)
    std::vector<JointTransform> skinning;  // A_k = W_k composed with rest offset
    MatX posed_joints;                   // K x 3, world joint positions
};

inline FkResult forward_kinematics(const BodyModelAsset& asset, const MatX& joints,
                                   const PoseParams& pose) {
    const int K = asset.joint_count();
    require(joints.rows() == K && joints.cols() == 3, "forward_kinematics: joints shape");
    FkResult fk;
    fk.world.resize(K);
    fk.skinning.resize(K);
    fk.posed_joints.resize(K, 3);
    for (int k : asset.topo_order()) {
        Mat3 R = rodrigues(pose.joint_rotations.row(k));
        Vec3 jk = joints.row(k);
        int par = asset.parents[k];
        if (par == kNoParent) {
            fk.world[k].G = R;
            fk.world[k].b = jk + pose.global_translation;
        } else {
            Vec3 offset = jk - Vec3(joints.row(par));
            fk.world[k].G = fk.world[par].G * R;
            fk.world[k].b = fk.world[par].G * offset + fk.world[par].b;
        }
        fk.skinning[k].G = fk.world[k].G;
        fk.skinning[k].b = fk.world[k].b - fk.world[k].G * jk;
        fk.posed_joints.row(k) = fk.world[k].b.transpose();
    }
    return fk;
}

struct FkGrads {
    MatX dtheta;       // K x 3
    Vec3 dtranslation = Vec3::Zero();
    MatX djoints;      // K x 3 (rest joints)
};

// Reverse pass of forward_kinematics. `dskin` are gradients on A_k (optional,
// may be empty) and `dposed` gradients on world joint positions (K x 3, may be
// empty). Both paths share the chain accumulation.
inline FkGrads forward_kinematics_backward(const BodyModelAsset& asset, const MatX& joints,
                                           const PoseParams& pose, const FkResult& fk,
                                           const std::vector<JointTransform>& dskin,
                                           const MatX& dposed) {
    const int K = asset.joint_count();
    FkGrads out;
    out.dtheta = MatX::Zero(K, 3);
    out.djoints = MatX::Zero(K, 3);

    std::vector<Mat3> dWG(K, Mat3::Zero());
    std::vector<Vec3> dWb(K, Vec3::Zero());
    for (int k = 0; k < K; ++k) {
        if (!dskin.empty()) {
            // A.G = W.G ; A.b = W.b - W.G j_k
            Vec3 jk = joints.row(k);
            dWG[k] += dskin[k].G - dskin[k].b * jk.transpose();
            dWb[k] += dskin[k].b;
            out.djoints.row(k) -= (fk.world[k].G.transpose() * dskin[k].b).transpose();
        }
        if (dposed.size() > 0) dWb[k] += Vec3(dposed.row(k));
    }

    auto order = asset.topo_order();
    for (int oi = K - 1; oi >= 0; --oi) {
        int k = order[oi];
        Mat3 R = rodrigues(pose.joint_rotations.row(k));
        Vec3 jk = joints.row(k);
        int par = asset.parents[k];
        if (par == kNoParent) {
            out.dtheta.row(k) +=
                rotation_grad_to_axis_angle(pose.joint_rotations.row(k), dWG[k]).transpose();
            out.djoints.row(k) += dWb[k].transpose();
            out.dtranslation += dWb[k];
        } else {
            Vec3 offset = jk - Vec3(joints.row(par));
            // W_k.G = W_par.G R ; W_k.b = W_par.G offset + W_par.b
            dWG[par] += dWG[k] * R.transpose() + dWb[k] * offset.transpose();
            dWb[par] += dWb[k];
            Mat3 dR = fk.world[par].G.transpose() * dWG[k];
            out.dtheta.row(k) +=
                rotation_grad_to_axis_angle(pose.joint_rotations.row(k), dR).transpose();
            Vec3 doffset = fk.world[par].G.transpose() * dWb[k];
            out.djoints.row(k) += doffset.transpose();
            out.djoints.row(par) -= doffset.transpose();
        }
    }
    return out;
}

inline MatX lbs_apply(const BodyModelAsset& asset, const MatX& shaped_vertices,
                      const std::vector<JointTransform>& transforms) {
    const int N = asset.vertex_count();
    const int K = asset.joint_count();
    require(static_cast<int>(transforms.size()) == K, "lbs_apply: transform count != K");
    MatX out(N, 3);
    for (int v = 0; v < N; ++v) {
        Vec3 x = shaped_vertices.row(v);
        Vec3 acc = Vec3::Zero();
        for (int k = 0; k < K; ++k) {
            double w = asset.skin_weights(v, k);
            if (w == 0.0) continue;
            acc += w * (transforms[k].G * x + transforms[k].b);
        }
        out.row(v) = acc.transpose();
    }
    return out;
}

// Convenience: full model evaluation, posed vertices plus FK result.
inline MatX posed_vertices(const BodyModelAsset& asset, const VecX& beta, const VecX& psi,
                           const PoseParams& pose, FkResult* fk_out = nullptr) {
    MatX shaped = shaped_template(asset, beta, psi, pose.joint_rotations);
    MatX joints = regress_joints(asset, shaped);
    FkResult fk = forward_kinematics(asset, joints, pose);
    if (fk_out) *fk_out = fk;
    return lbs_apply(asset, shaped, fk.skinning);
}

// ---------------------------------------------------------------------------
// JSON model container

namespace detail {

inline MatX json_to_matrix(const nlohmann::json& j, const std::string& key) {
    require(j.is_array(), key + ": expected nested array");
    size_t rows = j.size();
    if (rows == 0) return MatX(0, 0);
    require(j[0].is_array(), key + ": expected nested array");
    size_t cols = j[0].size();
    MatX m(rows, cols);
    for (size_t r = 0; r < rows; ++r) {
        require(j[r].is_array() && j[r].size() == cols, key + ": ragged rows");
        for (size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
    }
    return m;
}

// N x 3 x D nested array flattened to (3N) x D with row order (v,axis).
inline MatX json_to_basis(const nlohmann::json& j, const std::string& key, int N) {
    require(j.is_array() && static_cast<int>(j.size()) == N, key + ": outer length != N");
    int D = -1;
    MatX m;
    for (int v = 0; v < N; ++v) {
        require(j[v].is_array() && j[v].size() == 3, key + ": need per-vertex 3 axes");
        for (int a = 0; a < 3; ++a) {
            const auto& row = j[v][a];
            require(row.is_array(), key + ": expected nested array");
            if (D < 0) {
                D = static_cast<int>(row.size());
                m.resize(3 * N, D);
            }
            require(static_cast<int>(row.size()) == D, key + ": ragged basis rows");
            for (int d = 0; d < D; ++d) m(3 * v + a, d) = row[d].get<double>();
        }
    }
    if (D < 0) m.resize(3 * N, 0);
    return m;
}

inline nlohmann::json matrix_to_json(const MatX& m) {
    nlohmann::json j = nlohmann::json::array();
    for (int r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        j.push_back(row);
    }
    return j;
}

inline nlohmann::json basis_to_json(const MatX& m, int N) {
    nlohmann::json j = nlohmann::json::array();
    for (int v = 0; v < N; ++v) {
        nlohmann::json vert = nlohmann::json::array();
        for (int a = 0; a < 3; ++a) {
            nlohmann::json row = nlohmann::json::array();
            for (int d = 0; d < m.cols(); ++d) row.push_back(m(3 * v + a, d));
            vert.push_back(row);
        }
        j.push_back(vert);
    }
    return j;
}

}  // namespace detail

inline BodyModelAsset model_from_json(const nlohmann::json& j) {
    BodyModelAsset a;
    for (const char* key : {"template_vertices", "faces", "skin_weights", "joint_regressor",
                            "parents", "shape_basis", "expression_basis", "pose_basis",
                            "part_labels"})
        require(j.contains(key), std::string("model file: missing key ") + key);

    a.template_vertices = detail::json_to_matrix(j["template_vertices"], "template_vertices");
    const int N = static_cast<int>(a.template_vertices.rows());
    for (const auto& f : j["faces"]) {
        require(f.is_array() && f.size() == 3, "faces: expected triangles");
        a.faces.push_back({f[0].get<int>(), f[1].get<int>(), f[2].get<int>()});
    }
    a.skin_weights = detail::json_to_matrix(j["skin_weights"], "skin_weights");
    a.joint_regressor = detail::json_to_matrix(j["joint_regressor"], "joint_regressor");
    for (const auto& p : j["parents"]) a.parents.push_back(p.get<int>());
    a.shape_basis = detail::json_to_basis(j["shape_basis"], "shape_basis", N);
    a.expression_basis = detail::json_to_basis(j["expression_basis"], "expression_basis", N);
    a.pose_basis = detail::json_to_basis(j["pose_basis"], "pose_basis", N);
    for (const auto& p : j["part_labels"]) a.part_labels.push_back(part_from_name(p.get<std::string>()));
    if (j.contains("units")) a.units = j["units"].get<std::string>();
    a.validate();
    return a;
}

inline nlohmann::json model_to_json(const BodyModelAsset& a) {
    nlohmann::json j;
    j["template_vertices"] = detail::matrix_to_json(a.template_vertices);
    nlohmann::json faces = nlohmann::json::array();
    for (const auto& f : a.faces) faces.push_back({f[0], f[1], f[2]});
    j["faces"] = faces;
    j["skin_weights"] = detail::matrix_to_json(a.skin_weights);
    j["joint_regressor"] = detail::matrix_to_json(a.joint_regressor);
    j["parents"] = a.parents;
    const int N = a.vertex_count();
    j["shape_basis"] = detail::basis_to_json(a.shape_basis, N);
    j["expression_basis"] = detail::basis_to_json(a.expression_basis, N);
    j["pose_basis"] = detail::basis_to_json(a.pose_basis, N);
    nlohmann::json labels = nlohmann::json::array();
    for (Part p : a.part_labels) labels.push_back(part_name(p));
    j["part_labels"] = labels;
    j["units"] = a.units;
    return j;
}

inline BodyModelAsset load_model(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open model file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("model file " + path + ": " + e.what());
    }
    return model_from_json(j);
}

inline void save_model(const BodyModelAsset& a, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), "cannot write model file: " + path);
    out << model_to_json(a).dump();
}

}  // namespace ava
