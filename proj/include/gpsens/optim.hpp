#pragma once

#include <Eigen/Core>
#include <cmath>
#include <deque>
#include <string>
#include <utility>

namespace gpsens {

struct BoxMinimizeOptions {
    int max_iterations = 200;
    double gradient_tolerance = 1e-7;  // on the projected gradient, inf-norm
    int history = 10;
};

struct BoxMinimizeResult {
    Eigen::VectorXd x;
    double f = 0.0;
    int iterations = 0;
    bool converged = false;
    std::string message;
};

/// Minimizes fn over the box [lo, hi] with L-BFGS directions and projected
/// backtracking line search. fn(x, grad) must return the objective value and
/// fill grad; returning a non-finite value marks x as infeasible and makes
/// the line search back off, which lets callers translate numerical failures
/// (e.g. a Cholesky breakdown at extreme hyperparameters) into soft
/// rejections instead of exceptions.
///
/// Deterministic: no randomness, and the iteration path depends only on
/// (x0, fn). Convergence is declared on the projected gradient, whose
/// components are zeroed where a bound blocks further descent.
template <typename Objective>
BoxMinimizeResult minimize_box_lbfgs(Objective&& fn, Eigen::VectorXd x0, const Eigen::VectorXd& lo,
                                     const Eigen::VectorXd& hi,
                                     const BoxMinimizeOptions& opts = {}) {
    const Eigen::Index n = x0.size();
    auto clamp = [&](Eigen::VectorXd v) {
        for (Eigen::Index i = 0; i < n; ++i) v[i] = std::min(hi[i], std::max(lo[i], v[i]));
        return v;
    };

    BoxMinimizeResult result;
    Eigen::VectorXd x = clamp(std::move(x0));
    Eigen::VectorXd g(n);
    double f = fn(x, g);
    if (!std::isfinite(f) || !g.allFinite()) {
        result.x = x;
        result.f = f;
        result.message = "objective not finite at the start point";
        return result;
    }

    auto projected_gradient_norm = [&]() {
        double norm = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            double pg = g[i];
            if (x[i] <= lo[i] && pg > 0.0) pg = 0.0;
            if (x[i] >= hi[i] && pg < 0.0) pg = 0.0;
            norm = std::max(norm, std::abs(pg));
        }
        return norm;
    };

    std::deque<std::pair<Eigen::VectorXd, Eigen::VectorXd>> history;  // (s, y)
    Eigen::VectorXd d(n), x_new(n), g_new(n);

    int iter = 0;
    for (; iter < opts.max_iterations; ++iter) {
        if (projected_gradient_norm() < opts.gradient_tolerance) {
            result.converged = true;
            result.message = "projected gradient below tolerance";
            break;
        }

        // Two-loop recursion for d = -H g.
        d = -g;
        if (!history.empty()) {
            Eigen::VectorXd alpha_hist(static_cast<Eigen::Index>(history.size()));
            int idx = static_cast<int>(history.size()) - 1;
            for (auto it = history.rbegin(); it != history.rend(); ++it, --idx) {
                double rho = 1.0 / it->first.dot(it->second);
                double a = rho * it->first.dot(d);
                alpha_hist[idx] = a;
                d -= a * it->second;
            }
            const auto& last = history.back();
            d *= last.first.dot(last.second) / last.second.dot(last.second);
            idx = 0;
            for (auto it = history.begin(); it != history.end(); ++it, ++idx) {
                double rho = 1.0 / it->first.dot(it->second);
                double beta = rho * it->second.dot(d);
                d += (alpha_hist[idx] - beta) * it->first;
            }
        }
        if (d.dot(g) >= 0.0 || !d.allFinite()) {
            d = -g;
            history.clear();
        }

        double step = history.empty() ? 1.0 / std::max(1.0, g.lpNorm<Eigen::Infinity>()) : 1.0;
        bool accepted = false;
        double f_new = f;
        for (int backtrack = 0; backtrack < 60; ++backtrack) {
            x_new = clamp(x + step * d);
            double predicted = g.dot(x_new - x);
            if (predicted >= 0.0) {  // projection removed the whole descent direction
                step *= 0.5;
                continue;
            }
            f_new = fn(x_new, g_new);
            if (std::isfinite(f_new) && g_new.allFinite() && f_new <= f + 1e-4 * predicted) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            result.message = "line search could not make progress";
            break;
        }

        Eigen::VectorXd s = x_new - x;
        Eigen::VectorXd y = g_new - g;
        double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            history.emplace_back(std::move(s), std::move(y));
            if (static_cast<int>(history.size()) > opts.history) history.pop_front();
        }
        x = x_new;
        g = g_new;
        f = f_new;
    }

    result.x = x;
    result.f = f;
    result.iterations = iter;
    if (result.message.empty()) result.message = "iteration limit reached";
    return result;
}

}  // namespace gpsens
