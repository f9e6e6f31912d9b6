#pragma once

// Shared scenarios for the pose-fitting tests: a marker rig with a rigid
// cloud of body joints (well-conditioned pose recovery) plus a two-bone hand
// chain whose depth is only observable through the 3D hand prior.

#include "ava/align.hpp"
#include "ava/body_model.hpp"

#include <random>

namespace fitscn {

using namespace ava;

// Skeleton: root, `markers` body leaves rigidly attached to the root, a hand
// chain root -> H0 -> H1, and one face leaf. One template vertex per joint
// with one-hot skinning and regression, so joints track vertices exactly.
inline BodyModelAsset make_marker_rig(int markers = 24, uint64_t seed = 5150) {
    BodyModelAsset a;
    const int K = 1 + markers + 2 + 1;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(-0.3, 0.3);

    std::vector<Vec3> joints;
    std::vector<Part> labels;
    a.parents.clear();
    joints.push_back(Vec3::Zero());  // root
    labels.push_back(Part::Body);
    a.parents.push_back(kNoParent);
    for (int m = 0; m < markers; ++m) {
        joints.push_back(Vec3(uni(rng), uni(rng), 0.3 * uni(rng)));
        labels.push_back(Part::Body);
        a.parents.push_back(0);
    }
    const int h0 = 1 + markers, h1 = h0 + 1;
    joints.push_back(Vec3(0.25, 0.0, 0.0));           // H0, child of root
    labels.push_back(Part::Hand);
    a.parents.push_back(0);
    joints.push_back(joints[h0] + Vec3(0.0, 0.1, 0.0));  // H1, child of H0
    labels.push_back(Part::Hand);
    a.parents.push_back(h0);
    joints.push_back(Vec3(-0.25, 0.0, 0.0));          // face leaf
    labels.push_back(Part::Face);
    a.parents.push_back(0);

    const int N = K;
    a.template_vertices.resize(N, 3);
    for (int v = 0; v < N; ++v) a.template_vertices.row(v) = joints[v].transpose();
    a.part_labels = labels;
    a.faces.push_back({0, 1, 2});
    a.skin_weights = MatX::Identity(N, K);
    a.joint_regressor = MatX::Identity(K, N);

    std::normal_distribution<double> gauss(0.0, 1.0);
    a.shape_basis = MatX::Zero(3 * N, 2);
    for (int r = 0; r < a.shape_basis.rows(); ++r)
        for (int c = 0; c < a.shape_basis.cols(); ++c) a.shape_basis(r, c) = 0.02 * gauss(rng);
    a.expression_basis = MatX::Zero(3 * N, 1);
    a.pose_basis = MatX::Zero(3 * N, 9 * (K - 1));
    a.validate();
    return a;
}

inline Camera marker_camera() {
    Camera cam;
    cam.width = cam.height = 512;
    cam.fx = cam.fy = 1.6 * 512;
    cam.cx = cam.cy = 256.0;
    cam.near_plane = 0.1;
    cam.far_plane = 20.0;
    return cam;
}

struct RecoveryTruth {
    VecX beta;
    std::vector<PoseParams> poses;       // ground-truth per frame
    std::vector<MatX> posed_joints;      // K x 3 per frame
};

// Ground-truth motion: smooth root rotation + translation, everything else at
// rest, shared shape. Detections carry sigma-pixel keypoint noise, noiseless
// 3D body-joint targets, and hand-depth targets.
inline RecoveryTruth make_recovery_detections(const BodyModelAsset& asset, int n_frames,
                                              double noise_px, uint64_t seed,
                                              std::vector<FrameDetections>& dets_out) {
    const int K = asset.joint_count();
    Camera cam = marker_camera();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto parts = joint_parts(asset);

    RecoveryTruth truth;
    truth.beta = VecX::Zero(asset.shape_dim());
    truth.beta << 0.4, -0.7;

    dets_out.clear();
    for (int f = 0; f < n_frames; ++f) {
        double t = static_cast<double>(f) / n_frames;
        PoseParams pose = PoseParams::rest(K);
        pose.joint_rotations.row(0) =
            Eigen::RowVector3d(0.3 * std::sin(2 * M_PI * t), 0.25 * std::cos(2 * M_PI * t),
                               0.2 * std::sin(4 * M_PI * t + 1.0));
        pose.global_translation =
            Vec3(0.05 * std::sin(2 * M_PI * t), 0.05 * std::cos(2 * M_PI * t),
                 2.0 + 0.1 * std::sin(2 * M_PI * t + 0.5));

        FkResult fk;
        posed_vertices(asset, truth.beta, VecX::Zero(asset.expression_dim()), pose, &fk);
        truth.poses.push_back(pose);
        truth.posed_joints.push_back(fk.posed_joints);

        FrameDetections det;
        det.camera = cam;
        for (int k = 0; k < K; ++k) {
            Vec3 P = fk.posed_joints.row(k);
            Keypoint2d kp;
            kp.u = cam.fx * P.x() / P.z() + cam.cx + noise_px * gauss(rng);
            kp.v = cam.fy * P.y() / P.z() + cam.cy + noise_px * gauss(rng);
            kp.confidence = 1.0;
            det.keypoints2d.push_back(kp);
        }
        std::vector<Vec3> body, hand;
        for (int k = 0; k < K; ++k) {
            if (asset.parents[k] == kNoParent) continue;
            if (parts[k] == Part::Body) body.push_back(fk.posed_joints.row(k));
        }
        for (int k = 0; k < K; ++k)
            if (parts[k] == Part::Hand) hand.push_back(fk.posed_joints.row(k));
        MatX bm(body.size(), 3), hm(hand.size(), 3);
        for (size_t i = 0; i < body.size(); ++i) bm.row(i) = body[i].transpose();
        for (size_t i = 0; i < hand.size(); ++i) hm.row(i) = hand[i].transpose();
        det.body_joints3d = bm;
        det.hand_joints3d = hm;
        dets_out.push_back(det);
    }
    return truth;
}

struct RecoveryErrors {
    double mean_2d = 0.0;  // px, all observed joints vs noiseless projections
    double mean_3d = 0.0;  // model units, non-root body joints
};

inline RecoveryErrors recovery_errors(const BodyModelAsset& asset, const RecoveryTruth& truth,
                                      const FitResult& fit) {
    Camera cam = marker_camera();
    auto parts = joint_parts(asset);
    RecoveryErrors err;
    int n2 = 0, n3 = 0;
    for (size_t f = 0; f < truth.poses.size(); ++f) {
        PoseParams pose;
        pose.joint_rotations = fit.frames[f].theta;
        pose.global_translation = fit.frames[f].translation;
        FkResult fk;
        posed_vertices(asset, fit.beta, VecX::Zero(asset.expression_dim()), pose, &fk);
        for (int k = 0; k < asset.joint_count(); ++k) {
            Vec3 P = fk.posed_joints.row(k);
            Vec3 G = truth.posed_joints[f].row(k);
            double du = cam.fx * P.x() / P.z() - cam.fx * G.x() / G.z();
            double dv = cam.fy * P.y() / P.z() - cam.fy * G.y() / G.z();
            err.mean_2d += std::sqrt(du * du + dv * dv);
            ++n2;
            if (asset.parents[k] != kNoParent && parts[k] == Part::Body) {
                err.mean_3d += (P - G).norm();
                ++n3;
            }
        }
    }
    err.mean_2d /= n2;
    err.mean_3d /= n3;
    return err;
}

// Depth-ambiguity scenario: the detector drops the hand keypoints (confidence
// zero), so the hand chain's depth is unconstrained by the 2D term. The
// ground truth bends H0 so that H1 moves toward the camera; only the hand
// prior can recover that depth.
struct AmbiguityTruth {
    double h1_z_gt = 0.0;
    double h1_z_rest = 0.0;
    int h0 = 0, h1 = 0;
};

inline AmbiguityTruth make_ambiguity_detections(const BodyModelAsset& asset,
                                                std::vector<FrameDetections>& dets_out) {
    const int K = asset.joint_count();
    Camera cam = marker_camera();
    auto parts = joint_parts(asset);

    AmbiguityTruth truth;
    truth.h0 = -1;
    for (int k = 0; k < K; ++k)
        if (parts[k] == Part::Hand) {
            if (truth.h0 < 0) truth.h0 = k;
            else truth.h1 = k;
        }

    PoseParams pose = PoseParams::rest(K);
    // bend H0 by 0.9 rad about x: the H1 offset (0, 0.1, 0) rotates toward
    // the camera, changing its depth by 0.1 sin(0.9)
    pose.joint_rotations.row(truth.h0) = Eigen::RowVector3d(0.9, 0.0, 0.0);
    pose.global_translation = Vec3(0.0, 0.0, 2.0);

    FkResult fk;
    posed_vertices(asset, VecX::Zero(asset.shape_dim()), VecX::Zero(asset.expression_dim()),
                   pose, &fk);
    truth.h1_z_gt = fk.posed_joints(truth.h1, 2);
    truth.h1_z_rest = 2.0;  // rest offset is parallel to the image plane

    FrameDetections det;
    det.camera = cam;
    for (int k = 0; k < K; ++k) {
        Vec3 P = fk.posed_joints.row(k);
        Keypoint2d kp;
        kp.u = cam.fx * P.x() / P.z() + cam.cx;
        kp.v = cam.fy * P.y() / P.z() + cam.cy;
        kp.confidence = parts[k] == Part::Hand ? 0.0 : 1.0;
        det.keypoints2d.push_back(kp);
    }
    std::vector<Vec3> body, hand;
    for (int k = 0; k < K; ++k) {
        if (asset.parents[k] == kNoParent) continue;
        if (parts[k] == Part::Body) body.push_back(fk.posed_joints.row(k));
    }
    for (int k = 0; k < K; ++k)
        if (parts[k] == Part::Hand) hand.push_back(fk.posed_joints.row(k));
    MatX bm(body.size(), 3), hm(hand.size(), 3);
    for (size_t i = 0; i < body.size(); ++i) bm.row(i) = body[i].transpose();
    for (size_t i = 0; i < hand.size(); ++i) hm.row(i) = hand[i].transpose();
    det.body_joints3d = bm;
    det.hand_joints3d = hm;
    dets_out = {det};
    return truth;
}

inline double hand_z_error(const BodyModelAsset& asset, const AmbiguityTruth& truth,
                           const FitResult& fit) {
    PoseParams pose;
    pose.joint_rotations = fit.frames[0].theta;
    pose.global_translation = fit.frames[0].translation;
    FkResult fk;
    posed_vertices(asset, fit.beta, VecX::Zero(asset.expression_dim()), pose, &fk);
    return std::abs(fk.posed_joints(truth.h1, 2) - truth.h1_z_gt);
}

}  // namespace fitscn
