#pragma once

#include "ava/body_model.hpp"
#include "ava/gaussian_avatar.hpp"

#include <map>
#include <random>

namespace ava {

struct PartConstants {
    double e = 2e-4;        // threshold base
    double lambda_t = -9.0; // history coefficient
};

// Defaults per part: e = {2e-4, 1e-4, 1.4e-4}, lambda_t = {-9.0, -4.5, -6.3}
// for body / hand / face.
inline std::map<Part, PartConstants> default_part_constants() {
    return {{Part::Body, {2e-4, -9.0}},
            {Part::Hand, {1e-4, -4.5}},
            {Part::Face, {1.4e-4, -6.3}}};
}

// Fixed-capacity ring of the last 2R per-step gradient norms.
class GradRing {
public:
    explicit GradRing(int capacity = 0) : cap_(capacity), buf_(capacity, 0.0) {}

    void push(double v) {
        if (cap_ == 0) return;
        buf_[head_] = v;
        head_ = (head_ + 1) % cap_;
        if (count_ < cap_) ++count_;
    }

    bool full() const { return count_ == cap_; }
    int count() const { return count_; }
    int capacity() const { return cap_; }

    // Sum of the most recent `n` entries, skipping the `skip` newest.
    double window_sum(int n, int skip = 0) const {
        double s = 0.0;
        for (int i = 0; i < n; ++i) {
            int age = skip + i;  // 0 = newest
            if (age >= count_) break;
            int idx = (head_ - 1 - age + 2 * cap_) % cap_;
            s += buf_[idx];
        }
        return s;
    }

private:
    int cap_ = 0;
    std::vector<double> buf_;
    int head_ = 0;
    int count_ = 0;
};

struct DensifyConfig {
    int interval = 100;  // R
    std::map<Part, PartConstants> part_constants = default_part_constants();
    double opacity_prune_threshold = 0.005;
    std::map<Part, double> template_distance_threshold = {
        {Part::Body, 0.05}, {Part::Hand, 0.02}, {Part::Face, 0.02}};
    double clone_size_fraction = 0.01;  // of scene extent
    double split_scale_divisor = 1.6;
    bool adaptive = true;  // false = fixed threshold epsilon_i = e (baseline)

    void validate() const {
        require(interval > 0, "densify: interval must be positive");
        for (Part p : {Part::Body, Part::Hand, Part::Face}) {
            require(part_constants.count(p), std::string("densify: missing constants for ") +
                                                 part_name(p));
            require(template_distance_threshold.count(p),
                    std::string("densify: missing distance threshold for ") + part_name(p));
        }
    }
};

struct DensifyState {
    DensifyConfig config;
    std::vector<GradRing> history;      // one ring per live Gaussian
    std::vector<Vec3> last_direction;   // last 3D positional gradient, for clone offsets
    double scene_extent = 1.0;
    std::mt19937_64 rng{12345};

    static DensifyState make(const DensifyConfig& cfg, size_t gaussian_count,
                             double scene_extent, uint64_t seed = 12345) {
        cfg.validate();
        DensifyState s;
        s.config = cfg;
        s.history.assign(gaussian_count, GradRing(2 * cfg.interval));
        s.last_direction.assign(gaussian_count, Vec3::Zero());
        s.scene_extent = scene_extent;
        s.rng.seed(seed);
        return s;
    }
};

// One call per optimizer step inside the densification window. `directions`
// may be empty; when present it records the 3D positional gradient used to
// offset clones.
inline void record_gradients(DensifyState& state, const std::vector<double>& grad_norms,
                             const std::vector<Vec3>& directions = {}) {
    require(grad_norms.size() == state.history.size(),
            "record_gradients: got " + std::to_string(grad_norms.size()) + " norms for " +
                std::to_string(state.history.size()) + " Gaussians");
    for (size_t i = 0; i < grad_norms.size(); ++i) {
        state.history[i].push(grad_norms[i]);
        if (!directions.empty()) state.last_direction[i] = directions[i];
    }
}

// eps_i = e + (lambda_t / R) * (recent-window sum - previous-window sum).
// Falls back to eps_i = e until the history ring is full.
inline double adaptive_threshold(const DensifyState& state, size_t gaussian_index, Part part) {
    const auto& pc = state.config.part_constants.at(part);
    if (!state.config.adaptive) return pc.e;
    const GradRing& ring = state.history[gaussian_index];
    const int R = state.config.interval;
    if (!ring.full()) return pc.e;
    double recent = ring.window_sum(R, 0);
    double older = ring.window_sum(R, R);
    return pc.e + (pc.lambda_t / R) * (recent - older);
}

struct DensifyReport {
    std::map<Part, int> splits, clones, prunes;
    std::map<Part, double> mean_threshold;
    int live_count = 0;
    // new index -> previous index for surviving Gaussians, -1 for new children
    std::vector<int> survivor_of;

    DensifyReport() {
        for (Part p : {Part::Body, Part::Hand, Part::Face}) {
            splits[p] = clones[p] = prunes[p] = 0;
            mean_threshold[p] = 0.0;
        }
    }
    int total_splits() const {
        int s = 0;
        for (auto& [p, v] : splits) s += v;
        return s;
    }
    int total_clones() const {
        int s = 0;
        for (auto& [p, v] : clones) s += v;
        return s;
    }
    int total_prunes() const {
        int s = 0;
        for (auto& [p, v] : prunes) s += v;
        return s;
    }
};

// Split / clone against the per-Gaussian adaptive threshold, then prune by
// opacity and by distance to the template surface. Children inherit the
// parent's part and gradient history. Refreshes the avatar's base-weight
// cache before returning.
inline DensifyReport densify_and_prune(GaussianAvatar& avatar, DensifyState& state,
                                       const BodyModelAsset& asset) {
    const size_t M = avatar.size();
    require(state.history.size() == M, "densify_and_prune: state size mismatch");
    const DensifyConfig& cfg = state.config;
    const int R = cfg.interval;

    DensifyReport report;
    std::map<Part, int> thr_count;
    std::vector<Gaussian> next;
    std::vector<GradRing> next_hist;
    std::vector<Vec3> next_dir;
    std::vector<int> survivor;

    std::normal_distribution<double> gauss(0.0, 1.0);

    for (size_t i = 0; i < M; ++i) {
        const Gaussian& g = avatar.gaussians[i];
        double eps = adaptive_threshold(state, i, g.part);
        report.mean_threshold[g.part] += eps;
        ++thr_count[g.part];

        int filled = std::min(state.history[i].count(), R);
        double mean_grad = filled > 0 ? state.history[i].window_sum(R, 0) / filled : 0.0;
        bool densify = mean_grad > eps;
        double max_scale = g.log_scale.array().exp().maxCoeff();

        if (!densify) {
            next.push_back(g);
            next_hist.push_back(state.history[i]);
            next_dir.push_back(state.last_direction[i]);
            survivor.push_back(static_cast<int>(i));
        } else if (max_scale < state.scene_extent * cfg.clone_size_fraction) {
            // clone: keep the original, offset the copy along the descent direction
            next.push_back(g);
            next_hist.push_back(state.history[i]);
            next_dir.push_back(state.last_direction[i]);
            survivor.push_back(static_cast<int>(i));
            Gaussian child = g;
            Vec3 dir = state.last_direction[i];
            double n = dir.norm();
            if (n > 1e-12) child.center -= (dir / n) * std::exp(g.log_scale.mean());
            next.push_back(child);
            next_hist.push_back(state.history[i]);  // inherits the parent buffer
            next_dir.push_back(state.last_direction[i]);
            survivor.push_back(-1);
            ++report.clones[g.part];
        } else {
            // split into two children sampled from the parent footprint
            Mat3 Rq = quat_to_matrix(g.rotation / g.rotation.norm());
            Vec3 s = g.log_scale.array().exp();
            for (int ch = 0; ch < 2; ++ch) {
                Gaussian child = g;
                Vec3 local(gauss(state.rng) * s.x(), gauss(state.rng) * s.y(),
                           gauss(state.rng) * s.z());
                child.center = g.center + Rq * local;
                child.log_scale = g.log_scale.array() - std::log(cfg.split_scale_divisor);
                next.push_back(child);
                next_hist.push_back(state.history[i]);
                next_dir.push_back(state.last_direction[i]);
                survivor.push_back(-1);
            }
            ++report.splits[g.part];
        }
    }

    // prune: low opacity or too far from the template surface
    std::vector<Gaussian> kept;
    std::vector<GradRing> kept_hist;
    std::vector<Vec3> kept_dir;
    std::vector<int> kept_surv;
    for (size_t i = 0; i < next.size(); ++i) {
        const Gaussian& g = next[i];
        bool prune = sigmoid(g.opacity_logit) < cfg.opacity_prune_threshold;
        if (!prune) {
            double best = std::numeric_limits<double>::infinity();
            for (int v = 0; v < asset.vertex_count(); ++v)
                best = std::min(best,
                                (Vec3(asset.template_vertices.row(v)) - g.center).squaredNorm());
            prune = std::sqrt(best) > cfg.template_distance_threshold.at(g.part);
        }
        if (prune) {
            ++report.prunes[g.part];
        } else {
            kept.push_back(g);
            kept_hist.push_back(next_hist[i]);
            kept_dir.push_back(next_dir[i]);
            kept_surv.push_back(survivor[i]);
        }
    }
    if (kept.empty())
        throw NumericalError("densify_and_prune: all Gaussians pruned (optimization failure)");

    for (auto& [p, c] : thr_count)
        if (c > 0) report.mean_threshold[p] /= c;

    avatar.gaussians = std::move(kept);
    state.history = std::move(kept_hist);
    state.last_direction = std::move(kept_dir);
    report.survivor_of = std::move(kept_surv);
    report.live_count = static_cast<int>(avatar.size());
    avatar.refresh_base_weights(asset);
    return report;
}

}  // namespace ava
