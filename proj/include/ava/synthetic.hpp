#pragma once

#include "ava/body_model.hpp"
#include "ava/gaussian_avatar.hpp"
#include "ava/rasterizer.hpp"

#include <random>

namespace ava {

// Synthetic "cylinder arm": a tube from the root through elbow and wrist,
// branching into two thin fingers. Joints: root(0) -> elbow(1) -> wrist(2)
// -> {finger_a(3), finger_b(4)}. Vertices below the wrist are labeled body,
// the first finger hand, the second finger face (the fine-part analog).
inline BodyModelAsset make_cylinder_arm_model(int rings_per_segment = 10, int ring_verts = 12) {
    BodyModelAsset a;
    const int K = 5;
    MatX joint_pos(K, 3);
    joint_pos << 0.0, 0.0, 0.0,
                 0.0, 0.3, 0.0,
                 0.0, 0.6, 0.0,
                 0.05, 0.75, 0.0,
                 -0.05, 0.75, 0.0;
    a.parents = {kNoParent, 0, 1, 2, 2};

    struct Seg {
        Vec3 from, to;
        double radius;
        Part part;
        int bone_a, bone_b;  // joints to skin against
    };
    std::vector<Seg> segs = {
        {{0, -0.05, 0}, {0, 0.3, 0}, 0.06, Part::Body, 0, 1},
        {{0, 0.3, 0}, {0, 0.6, 0}, 0.055, Part::Body, 1, 2},
        {{0, 0.6, 0}, {0.05, 0.78, 0}, 0.022, Part::Hand, 2, 3},
        {{0, 0.6, 0}, {-0.05, 0.78, 0}, 0.022, Part::Face, 2, 4},
    };

    std::vector<Vec3> verts;
    std::vector<Part> labels;
    std::vector<std::pair<int, int>> bones;
    std::vector<double> along;  // 0 at seg start, 1 at seg end
    std::vector<int> ring_start;
    for (const auto& seg : segs) {
        Vec3 axis = (seg.to - seg.from).normalized();
        Vec3 u = std::abs(axis.z()) < 0.9 ? axis.cross(Vec3(0, 0, 1)).normalized()
                                          : axis.cross(Vec3(1, 0, 0)).normalized();
        Vec3 w = axis.cross(u);
        for (int r = 0; r < rings_per_segment; ++r) {
            double t = static_cast<double>(r) / (rings_per_segment - 1);
            Vec3 c = seg.from + t * (seg.to - seg.from);
            ring_start.push_back(static_cast<int>(verts.size()));
            for (int i = 0; i < ring_verts; ++i) {
                double phi = 2.0 * M_PI * i / ring_verts;
                verts.push_back(c + seg.radius * (std::cos(phi) * u + std::sin(phi) * w));
                labels.push_back(seg.part);
                bones.push_back({seg.bone_a, seg.bone_b});
                along.push_back(t);
            }
        }
    }
    const int N = static_cast<int>(verts.size());
    a.template_vertices.resize(N, 3);
    for (int v = 0; v < N; ++v) a.template_vertices.row(v) = verts[v].transpose();
    a.part_labels = labels;

    // tube triangulation per segment
    const int rings_total = static_cast<int>(ring_start.size());
    for (int r = 0; r + 1 < rings_total; ++r) {
        if (ring_start[r + 1] - ring_start[r] != ring_verts) continue;  // segment boundary
        if ((r + 1) % rings_per_segment == 0) continue;
        for (int i = 0; i < ring_verts; ++i) {
            int i2 = (i + 1) % ring_verts;
            int v00 = ring_start[r] + i, v01 = ring_start[r] + i2;
            int v10 = ring_start[r + 1] + i, v11 = ring_start[r + 1] + i2;
            a.faces.push_back({v00, v10, v01});
            a.faces.push_back({v01, v10, v11});
        }
    }

    // smooth two-bone skinning along each segment
    a.skin_weights = MatX::Zero(N, K);
    for (int v = 0; v < N; ++v) {
        double t = along[v];
        // smoothstep blend between the segment's two joints
        double s = t * t * (3.0 - 2.0 * t);
        a.skin_weights(v, bones[v].first) = 1.0 - s;
        a.skin_weights(v, bones[v].second) = s;
    }

    // joint regressor: gaussian falloff around each joint position
    a.joint_regressor = MatX::Zero(K, N);
    for (int k = 0; k < K; ++k) {
        double sum = 0.0;
        for (int v = 0; v < N; ++v) {
            double d2 = (verts[v] - Vec3(joint_pos.row(k))).squaredNorm();
            double w = std::exp(-d2 / (2.0 * 0.03 * 0.03));
            a.joint_regressor(k, v) = w;
            sum += w;
        }
        a.joint_regressor.row(k) /= sum;
    }
    // correct the regressor so that rest joints land exactly on joint_pos:
    // add the residual onto the nearest vertex... instead, solve by shifting:
    // J_reg * T = approx joint_pos; we accept the regressed positions as the
    // canonical rest joints and overwrite joint_pos implicitly.

    // blendshape bases
    const int SB = 2, EB = 1;
    a.shape_basis = MatX::Zero(3 * N, SB);
    a.expression_basis = MatX::Zero(3 * N, EB);
    a.pose_basis = MatX::Zero(3 * N, 9 * (K - 1));
    for (int v = 0; v < N; ++v) {
        Vec3 p = verts[v];
        // shape 0: uniform scale; shape 1: radial thickness
        for (int axis = 0; axis < 3; ++axis) a.shape_basis(3 * v + axis, 0) = 0.1 * p(axis);
        Vec3 radial(p.x(), 0.0, p.z());
        for (int axis = 0; axis < 3; ++axis) a.shape_basis(3 * v + axis, 1) = 0.3 * radial(axis);
        // expression: bulge on the face-analog finger
        if (labels[v] == Part::Face) {
            Vec3 dir = radial.norm() > 1e-9 ? Vec3(radial.normalized()) : Vec3(1, 0, 0);
            for (int axis = 0; axis < 3; ++axis)
                a.expression_basis(3 * v + axis, 0) = 0.02 * dir(axis);
        }
    }
    // small deterministic pose-corrective basis
    std::mt19937_64 rng(4242);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int r = 0; r < a.pose_basis.rows(); ++r)
        for (int c = 0; c < a.pose_basis.cols(); ++c) a.pose_basis(r, c) = 2e-3 * gauss(rng);

    a.validate();
    return a;
}

// Deterministic colored ground-truth avatar on the template: position-keyed
// colors, high opacity, identity-initialized nets.
inline GaussianAvatar make_ground_truth_avatar(const BodyModelAsset& asset, uint64_t seed = 11,
                                               const AvatarArchitecture& arch = {}) {
    GaussianAvatar av = init_from_model(asset, /*sh_degree=*/0, seed, arch);
    for (auto& g : av.gaussians) {
        Vec3 p = g.center;
        Vec3 rgb(0.5 + 0.45 * std::sin(9.0 * p.x() + 3.0 * p.y()),
                 0.5 + 0.45 * std::sin(7.0 * p.y() + 1.0),
                 0.5 + 0.45 * std::cos(8.0 * p.z() + 5.0 * p.x()));
        for (int c = 0; c < 3; ++c) g.sh_coeffs(c, 0) = (clamp01(rgb(c)) - 0.5) / sh::C0;
        g.opacity_logit = logit(0.9);
    }
    return av;
}

// Default fixture camera: subject centered around two units in front.
inline Camera make_fixture_camera(int size = 128) {
    Camera cam;
    cam.width = cam.height = size;
    cam.fx = cam.fy = 1.6 * size;
    cam.cx = cam.cy = size / 2.0;
    cam.near_plane = 0.1;
    cam.far_plane = 10.0;
    return cam;
}

inline Vec3 fixture_translation() { return Vec3(0.0, -0.4, 2.0); }

// Smooth articulated pose sequence; phase-shifted so train/test indices give
// held-out poses.
inline FramePose make_fixture_pose(const BodyModelAsset& asset, double t) {
    FramePose p;
    p.theta = MatX::Zero(asset.joint_count(), 3);
    // elbow and wrist bend about z, fingers about x
    p.theta(1, 2) = 0.5 * std::sin(2.0 * M_PI * t);
    p.theta(2, 2) = 0.35 * std::sin(2.0 * M_PI * t + 1.0);
    p.theta(3, 0) = 0.45 * std::sin(2.0 * M_PI * t + 2.0);
    p.theta(4, 0) = -0.45 * std::sin(2.0 * M_PI * t + 0.5);
    p.beta = VecX::Zero(asset.shape_dim());
    p.psi = VecX::Zero(asset.expression_dim());
    p.translation = fixture_translation();
    return p;
}

}  // namespace ava
