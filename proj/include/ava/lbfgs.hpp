#pragma once

#include "ava/common.hpp"

#include <deque>
#include <functional>

namespace ava {

// Objective supplying value and gradient.
using Objective = std::function<double(const VecX& x, VecX& grad)>;

enum class LbfgsStatus { Converged, MaxIterations, LineSearchFailed };

struct LbfgsOptions {
    int max_iterations = 100;
    double gradient_tolerance = 1e-8;  // on the infinity norm
    int history = 10;                  // m
    double c1 = 1e-4;                  // sufficient decrease
    double c2 = 0.9;                   // curvature
    int max_line_search_steps = 40;
};

struct LbfgsResult {
    VecX x;
    double value = 0.0;
    int iterations = 0;
    LbfgsStatus status = LbfgsStatus::MaxIterations;
    std::vector<double> value_history;
};

// Per accepted step: (f0, g0 = phi'(0), alpha, f_alpha, g_alpha = phi'(alpha)).
// Used by tests to assert both strong Wolfe conditions.
using LbfgsStepCallback =
    std::function<void(double f0, double g0, double alpha, double fa, double ga)>;

namespace lbfgs_detail {

struct LinePoint {
    double alpha, f, g;  // g = directional derivative
};

// Cubic interpolation minimizer between two bracketing points (Nocedal-Wright).
inline double cubic_min(const LinePoint& a, const LinePoint& b) {
    double d1 = a.g + b.g - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    double disc = d1 * d1 - a.g * b.g;
    if (disc < 0.0) return 0.5 * (a.alpha + b.alpha);
    double d2 = std::sqrt(disc);
    if (b.alpha < a.alpha) d2 = -d2;
    double t = b.alpha - (b.alpha - a.alpha) * (b.g + d2 - d1) / (b.g - a.g + 2.0 * d2);
    double lo = std::min(a.alpha, b.alpha), hi = std::max(a.alpha, b.alpha);
    if (!std::isfinite(t) || t <= lo || t >= hi) t = 0.5 * (a.alpha + b.alpha);
    return t;
}

}  // namespace lbfgs_detail

// Strong Wolfe line search (bracket + zoom). Returns true with the accepted
// step in `alpha` / `fx` / `grad`; false when no acceptable step was found.
inline bool wolfe_line_search(const Objective& f, const VecX& x, const VecX& dir, double f0,
                              const VecX& g0, const LbfgsOptions& opt, double& alpha, double& fx,
                              VecX& grad, double alpha_init = 1.0) {
    using lbfgs_detail::LinePoint;
    const double d0 = g0.dot(dir);
    if (d0 >= 0.0) return false;  // not a descent direction

    auto eval = [&](double a, LinePoint& p) {
        p.alpha = a;
        p.f = f(x + a * dir, grad);
        p.g = grad.dot(dir);
    };

    auto zoom = [&](LinePoint lo, LinePoint hi) -> bool {
        for (int i = 0; i < opt.max_line_search_steps; ++i) {
            LinePoint t;
            double a = lbfgs_detail::cubic_min(lo, hi);
            eval(a, t);
            if (t.f > f0 + opt.c1 * a * d0 || t.f >= lo.f) {
                hi = t;
            } else {
                if (std::abs(t.g) <= -opt.c2 * d0) {
                    alpha = t.alpha;
                    fx = t.f;
                    return true;
                }
                if (t.g * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
                lo = t;
            }
            if (std::abs(hi.alpha - lo.alpha) < 1e-16) break;
        }
        // fall back to the best bracketing point if it satisfies Wolfe
        return false;
    };

    LinePoint prev{0.0, f0, d0};
    double a = alpha_init;
    for (int i = 0; i < opt.max_line_search_steps; ++i) {
        LinePoint cur;
        eval(a, cur);
        if (cur.f > f0 + opt.c1 * a * d0 || (i > 0 && cur.f >= prev.f))
            return zoom(prev, cur);
        if (std::abs(cur.g) <= -opt.c2 * d0) {
            alpha = cur.alpha;
            fx = cur.f;
            return true;
        }
        if (cur.g >= 0.0) return zoom(cur, prev);
        prev = cur;
        a *= 2.0;
    }
    return false;
}

// L-BFGS with strong Wolfe line search; stops on the infinity norm of the
// gradient or on the iteration budget. On line-search failure the best
// iterate seen so far is returned with a status flag.
inline LbfgsResult lbfgs_minimize(const Objective& f, const VecX& x0, const LbfgsOptions& opt = {},
                                  const LbfgsStepCallback& on_step = nullptr) {
    LbfgsResult res;
    res.x = x0;
    VecX g(x0.size());
    double fx = f(res.x, g);
    require(g.allFinite(), "lbfgs: gradient not finite at the starting point");
    res.value = fx;
    res.value_history.push_back(fx);

    std::deque<VecX> s_hist, y_hist;
    std::deque<double> rho_hist;
    VecX x_prev = res.x, g_prev = g;

    for (int iter = 0; iter < opt.max_iterations; ++iter) {
        if (g.lpNorm<Eigen::Infinity>() < opt.gradient_tolerance) {
            res.status = LbfgsStatus::Converged;
            break;
        }
        // two-loop recursion
        VecX q = g;
        std::vector<double> alpha_i(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            alpha_i[i] = rho_hist[i] * s_hist[i].dot(q);
            q -= alpha_i[i] * y_hist[i];
        }
        if (!s_hist.empty()) {
            double gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
            q *= gamma;
        }
        for (size_t i = 0; i < s_hist.size(); ++i) {
            double beta = rho_hist[i] * y_hist[i].dot(q);
            q += (alpha_i[i] - beta) * s_hist[i];
        }
        VecX dir = -q;

        double f0 = fx, alpha = 0.0;
        VecX g0 = g;
        // without curvature history the direction is the raw gradient, whose
        // magnitude carries no step-size information; start from a unit step
        double a_init = s_hist.empty() ? std::min(1.0, 1.0 / dir.norm()) : 1.0;
        if (!wolfe_line_search(f, res.x, dir, f0, g0, opt, alpha, fx, g, a_init)) {
            res.status = LbfgsStatus::LineSearchFailed;
            fx = f0;
            g = g0;
            break;
        }
        if (on_step) on_step(f0, g0.dot(dir), alpha, fx, g.dot(dir));

        VecX x_new = res.x + alpha * dir;
        VecX s = x_new - res.x;
        VecX y = g - g0;
        double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opt.history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        res.x = x_new;
        res.value = fx;
        res.value_history.push_back(fx);
        res.iterations = iter + 1;
    }
    if (res.status == LbfgsStatus::MaxIterations &&
        g.lpNorm<Eigen::Infinity>() < opt.gradient_tolerance)
        res.status = LbfgsStatus::Converged;
    return res;
}

}  // namespace ava
