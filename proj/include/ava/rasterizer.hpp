#pragma once

#include "ava/common.hpp"
#include "ava/gaussian_avatar.hpp"

#include <algorithm>
#include <numeric>

namespace ava {

struct Camera {
    double fx = 100, fy = 100, cx = 32, cy = 32;
    int width = 64, height = 64;
    double near_plane = 0.01, far_plane = 100.0;

    void validate() const {
        require(fx > 0 && fy > 0, "camera: focal lengths must be positive");
        require(near_plane > 0 && near_plane < far_plane, "camera: need 0 < near < far");
        require(width > 0 && height > 0, "camera: image size must be positive");
    }
};

// Blending contract constants, shared with the reference renderer:
//   - contributions are cut off outside Mahalanobis radius 3 in screen space
//   - front-to-back blending stops once transmittance < kTransmitMin
constexpr double kMahalanobisCutoff2 = 9.0;
constexpr double kTransmitMin = 1e-4;
constexpr double kCovDilation = 0.3;  // px^2, low-pass on the projected footprint
constexpr int kTileSize = 16;

struct ProjectedGaussian {
    Vec2 mean2d;
    Mat2 cov2d;     // dilated
    Mat2 conic;     // inverse of cov2d
    double depth;   // view-space z
    double alpha;
    Vec3 rgb;
    int source_index;  // into the frame-gaussian list
};

// Perspective projection of one frame-space Gaussian. Returns false when the
// Gaussian is culled (behind the near plane or past the far plane).
inline bool project(const FrameGaussian& g, const Camera& cam, ProjectedGaussian& out) {
    const double tz = g.mean.z();
    if (tz <= cam.near_plane || tz > cam.far_plane) return false;
    const double tx = g.mean.x(), ty = g.mean.y();
    out.mean2d = Vec2(cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy);
    Eigen::Matrix<double, 2, 3> J;
    J << cam.fx / tz, 0, -cam.fx * tx / (tz * tz),
         0, cam.fy / tz, -cam.fy * ty / (tz * tz);
    out.cov2d = J * g.cov * J.transpose() + kCovDilation * Mat2::Identity();
    double det = out.cov2d.determinant();
    if (det <= 0.0) return false;
    out.conic = out.cov2d.inverse();
    out.depth = tz;
    out.alpha = g.alpha;
    out.rgb = g.rgb;
    out.source_index = g.source_index;
    return true;
}

struct ProjectedGrads {
    Vec2 dmean2d = Vec2::Zero();
    Mat2 dcov2d = Mat2::Zero();
    double ddepth = 0.0;
    double dalpha = 0.0;
    Vec3 drgb = Vec3::Zero();
};

// Reverse of project(), including the Jacobian's own dependence on the mean.
inline void project_backward(const FrameGaussian& g, const Camera& cam,
                             const ProjectedGrads& dp, Vec3& dmean3d, Mat3& dcov3d) {
    const double tx = g.mean.x(), ty = g.mean.y(), tz = g.mean.z();
    const double tz2 = tz * tz, tz3 = tz2 * tz;
    Eigen::Matrix<double, 2, 3> J;
    J << cam.fx / tz, 0, -cam.fx * tx / tz2,
         0, cam.fy / tz, -cam.fy * ty / tz2;

    dmean3d = Vec3::Zero();
    dmean3d.x() += dp.dmean2d.x() * cam.fx / tz;
    dmean3d.y() += dp.dmean2d.y() * cam.fy / tz;
    dmean3d.z() += -dp.dmean2d.x() * cam.fx * tx / tz2 - dp.dmean2d.y() * cam.fy * ty / tz2;

    dcov3d = J.transpose() * dp.dcov2d * J;

    Eigen::Matrix<double, 2, 3> dJ =
        (dp.dcov2d + dp.dcov2d.transpose()) * J * g.cov;
    dmean3d.x() += dJ(0, 2) * (-cam.fx / tz2);
    dmean3d.y() += dJ(1, 2) * (-cam.fy / tz2);
    dmean3d.z() += dJ(0, 0) * (-cam.fx / tz2) + dJ(1, 1) * (-cam.fy / tz2) +
                   dJ(0, 2) * (2.0 * cam.fx * tx / tz3) + dJ(1, 2) * (2.0 * cam.fy * ty / tz3);

    dmean3d.z() += dp.ddepth;
}

struct RenderOutput {
    Image color;  // H x W x 3
    Image depth;  // H x W, alpha-weighted expected view depth
    Image alpha;  // H x W
};

struct RasterCache {
    Camera camera;
    Vec3 background;
    std::vector<ProjectedGaussian> sorted;        // front to back
    std::vector<std::vector<int>> tile_lists;     // indices into `sorted`
    int tiles_x = 0, tiles_y = 0;
    int source_count = 0;
    bool valid = false;
};

namespace detail {

inline void tile_bounds(const ProjectedGaussian& p, const Camera& cam, int tiles_x, int tiles_y,
                        int& tx0, int& tx1, int& ty0, int& ty1) {
    double rx = 3.0 * std::sqrt(std::max(p.cov2d(0, 0), 0.0));
    double ry = 3.0 * std::sqrt(std::max(p.cov2d(1, 1), 0.0));
    tx0 = std::clamp(static_cast<int>(std::floor((p.mean2d.x() - rx) / kTileSize)), 0, tiles_x - 1);
    tx1 = std::clamp(static_cast<int>(std::floor((p.mean2d.x() + rx) / kTileSize)), 0, tiles_x - 1);
    ty0 = std::clamp(static_cast<int>(std::floor((p.mean2d.y() - ry) / kTileSize)), 0, tiles_y - 1);
    ty1 = std::clamp(static_cast<int>(std::floor((p.mean2d.y() + ry) / kTileSize)), 0, tiles_y - 1);
}

// Per-sample opacity under the shared blending contract; 0 when cut off.
inline double sample_sigma(const ProjectedGaussian& p, double px, double py) {
    Vec2 d(px - p.mean2d.x(), py - p.mean2d.y());
    double m = d.dot(p.conic * d);
    if (m > kMahalanobisCutoff2) return 0.0;
    return p.alpha * std::exp(-0.5 * m);
}

}  // namespace detail

// Tile-based front-to-back alpha blending (Gaussians sorted by view depth,
// ties by ascending source index). `tile_order`, when non-empty, permutes tile
// processing; the output is schedule-independent either way.
inline RenderOutput rasterize(const std::vector<FrameGaussian>& gaussians, const Camera& cam,
                              const Vec3& background, RasterCache& cache,
                              const std::vector<int>& tile_order = {}) {
    cam.validate();
    cache.camera = cam;
    cache.background = background;
    cache.source_count = static_cast<int>(gaussians.size());
    cache.sorted.clear();
    for (const auto& g : gaussians) {
        ProjectedGaussian p;
        if (project(g, cam, p)) cache.sorted.push_back(p);
    }
    std::stable_sort(cache.sorted.begin(), cache.sorted.end(),
                     [](const ProjectedGaussian& a, const ProjectedGaussian& b) {
                         if (a.depth != b.depth) return a.depth < b.depth;
                         return a.source_index < b.source_index;
                     });

    cache.tiles_x = (cam.width + kTileSize - 1) / kTileSize;
    cache.tiles_y = (cam.height + kTileSize - 1) / kTileSize;
    const int n_tiles = cache.tiles_x * cache.tiles_y;
    cache.tile_lists.assign(n_tiles, {});
    for (int i = 0; i < static_cast<int>(cache.sorted.size()); ++i) {
        int tx0, tx1, ty0, ty1;
        detail::tile_bounds(cache.sorted[i], cam, cache.tiles_x, cache.tiles_y, tx0, tx1, ty0, ty1);
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                cache.tile_lists[ty * cache.tiles_x + tx].push_back(i);
    }

    RenderOutput out;
    out.color = Image(cam.height, cam.width, 3);
    out.depth = Image(cam.height, cam.width, 1);
    out.alpha = Image(cam.height, cam.width, 1);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
            for (int c = 0; c < 3; ++c) out.color.at(y, x, c) = background(c);

    std::vector<int> order(n_tiles);
    if (tile_order.empty()) std::iota(order.begin(), order.end(), 0);
    else {
        require(static_cast<int>(tile_order.size()) == n_tiles, "rasterize: bad tile order");
        order = tile_order;
    }

    for (int t : order) {
        const auto& list = cache.tile_lists[t];
        if (list.empty()) continue;
        const int tx = t % cache.tiles_x, ty = t / cache.tiles_x;
        const int x0 = tx * kTileSize, y0 = ty * kTileSize;
        const int x1 = std::min(x0 + kTileSize, cam.width);
        const int y1 = std::min(y0 + kTileSize, cam.height);
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                double T = 1.0;
                Vec3 col = Vec3::Zero();
                double depth = 0.0;
                for (int idx : list) {
                    const ProjectedGaussian& p = cache.sorted[idx];
                    double sigma = detail::sample_sigma(p, px, py);
                    if (sigma <= 0.0) continue;
                    col += p.rgb * (sigma * T);
                    depth += p.depth * (sigma * T);
                    T *= (1.0 - sigma);
                    if (T < kTransmitMin) break;
                }
                for (int c = 0; c < 3; ++c) out.color.at(y, x, c) = col(c) + background(c) * T;
                out.depth.at(y, x) = depth;
                out.alpha.at(y, x) = 1.0 - T;
            }
        }
    }
    cache.valid = true;
    return out;
}

struct RasterGrads {
    // indexed by source_index of the input frame-gaussian list
    std::vector<FrameGaussianGrads> frame;   // dmean/dcov via project_backward
    std::vector<double> pos_grad_norm;       // accumulated ||dL/dmean2d|| per Gaussian
};

// Exact reverse of the blending recurrence. Per-tile partial sums are reduced
// in fixed tile order so the result does not depend on the processing
// schedule.
inline RasterGrads rasterize_backward(const std::vector<FrameGaussian>& gaussians,
                                      const RasterCache& cache, const Image& dcolor,
                                      const Image& ddepth, const Image& dalpha,
                                      const std::vector<int>& tile_order = {}) {
    require(cache.valid, "rasterize_backward: stale cache");
    require(static_cast<int>(gaussians.size()) == cache.source_count,
            "rasterize_backward: scene changed since forward pass");
    const Camera& cam = cache.camera;
    require(dcolor.height == cam.height && dcolor.width == cam.width && dcolor.channels == 3,
            "rasterize_backward: dcolor shape mismatch");

    const int n_proj = static_cast<int>(cache.sorted.size());
    const int n_tiles = cache.tiles_x * cache.tiles_y;

    std::vector<int> order(n_tiles);
    if (tile_order.empty()) std::iota(order.begin(), order.end(), 0);
    else order = tile_order;

    // per-tile partials over projected gaussians
    std::vector<std::vector<ProjectedGrads>> partials(n_tiles);

    struct Contrib {
        int idx;
        double sigma;
        double T;       // transmittance before this contribution
        Vec2 d;
        double expo;    // exp(-0.5 m)
    };
    std::vector<Contrib> stack;

    for (int t : order) {
        const auto& list = cache.tile_lists[t];
        if (list.empty()) continue;
        partials[t].assign(n_proj, ProjectedGrads{});
        const int tx = t % cache.tiles_x, ty = t / cache.tiles_x;
        const int x0 = tx * kTileSize, y0 = ty * kTileSize;
        const int x1 = std::min(x0 + kTileSize, cam.width);
        const int y1 = std::min(y0 + kTileSize, cam.height);
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                // replay the forward pass for this pixel
                stack.clear();
                double T = 1.0;
                for (int idx : list) {
                    const ProjectedGaussian& p = cache.sorted[idx];
                    Vec2 d(px - p.mean2d.x(), py - p.mean2d.y());
                    double m = d.dot(p.conic * d);
                    if (m > kMahalanobisCutoff2) continue;
                    double expo = std::exp(-0.5 * m);
                    double sigma = p.alpha * expo;
                    stack.push_back({idx, sigma, T, d, expo});
                    T *= (1.0 - sigma);
                    if (T < kTransmitMin) break;
                }
                const double T_end = T;

                Vec4 dC;  // rgb + depth channel upstream grads
                dC << dcolor.at(y, x, 0), dcolor.at(y, x, 1), dcolor.at(y, x, 2),
                      ddepth.data.empty() ? 0.0 : ddepth.at(y, x);
                const double dA = dalpha.data.empty() ? 0.0 : dalpha.at(y, x);
                // background shows through with weight T_end
                const Vec3 dBg(dcolor.at(y, x, 0), dcolor.at(y, x, 1), dcolor.at(y, x, 2));
                const double bg_term = dBg.dot(cache.background);

                Vec4 suffix = Vec4::Zero();  // sum_{j>i} sigma_j T_j c_j
                for (int s = static_cast<int>(stack.size()) - 1; s >= 0; --s) {
                    const Contrib& cb = stack[s];
                    const ProjectedGaussian& p = cache.sorted[cb.idx];
                    ProjectedGrads& pg = partials[t][cb.idx];
                    Vec4 ci;
                    ci << p.rgb(0), p.rgb(1), p.rgb(2), p.depth;

                    pg.drgb += Vec3(dC(0), dC(1), dC(2)) * (cb.sigma * cb.T);
                    pg.ddepth += dC(3) * (cb.sigma * cb.T);

                    double one_m = std::max(1.0 - cb.sigma, 1e-12);
                    double dsigma = cb.T * ci.dot(dC);
                    dsigma -= suffix.dot(dC) / one_m;
                    dsigma += dA * T_end / one_m;
                    dsigma -= bg_term * T_end / one_m;  // background weight shrinks

                    suffix += ci * (cb.sigma * cb.T);

                    pg.dalpha += dsigma * cb.expo;
                    double dexpo = dsigma * p.alpha;
                    // expo = exp(-0.5 d^T conic d), d = pix - mean
                    Vec2 cd = p.conic * cb.d;
                    pg.dmean2d += dexpo * cb.expo * cd;
                    Mat2 dconic = dexpo * cb.expo * (-0.5) * (cb.d * cb.d.transpose());
                    // conic = cov2d^{-1}
                    pg.dcov2d += -p.conic * dconic * p.conic;
                }
            }
        }
    }

    // fixed-order reduction, then chain through the projection
    std::vector<ProjectedGrads> total(n_proj);
    for (int t = 0; t < n_tiles; ++t) {
        if (partials[t].empty()) continue;
        for (int i = 0; i < n_proj; ++i) {
            total[i].dmean2d += partials[t][i].dmean2d;
            total[i].dcov2d += partials[t][i].dcov2d;
            total[i].ddepth += partials[t][i].ddepth;
            total[i].dalpha += partials[t][i].dalpha;
            total[i].drgb += partials[t][i].drgb;
        }
    }

    RasterGrads out;
    out.frame.assign(cache.source_count, FrameGaussianGrads{});
    out.pos_grad_norm.assign(cache.source_count, 0.0);
    for (int i = 0; i < n_proj; ++i) {
        const ProjectedGaussian& p = cache.sorted[i];
        Vec3 dmean3;
        Mat3 dcov3;
        project_backward(gaussians[p.source_index], cam, total[i], dmean3, dcov3);
        FrameGaussianGrads& fg = out.frame[p.source_index];
        fg.dmean += dmean3;
        fg.dcov += dcov3;
        fg.dalpha += total[i].dalpha;
        fg.drgb += total[i].drgb;
        out.pos_grad_norm[p.source_index] += total[i].dmean2d.norm();
    }
    return out;
}

}  // namespace ava
