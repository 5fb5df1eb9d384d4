#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gpsens/errors.hpp"
#include "gpsens/kernels.hpp"
#include "gpsens/optim.hpp"
#include "gpsens/parallel.hpp"
#include "gpsens/rng.hpp"
#include "gpsens/sobol_sequence.hpp"

namespace gpsens {

/// Training data for a zero-mean GP. Inputs live on the unit cube; outputs
/// are standardized internally and every public prediction is mapped back
/// to raw units, so callers never see the standardized scale.
struct TrainingSet {
    Eigen::MatrixXd x;       // N x D unit-cube inputs
    Eigen::VectorXd y;       // raw outputs
    Eigen::VectorXd y_std;   // (y - output_mean) / output_scale
    double output_mean = 0.0;
    double output_scale = 1.0;

    Eigen::Index size() const { return x.rows(); }
    int dimension() const { return static_cast<int>(x.cols()); }

    static TrainingSet standardized(Eigen::MatrixXd inputs, Eigen::VectorXd outputs) {
        if (inputs.rows() != outputs.size())
            throw ShapeMismatch("TrainingSet: input/output row count mismatch");
        if (inputs.rows() < 1) throw ShapeMismatch("TrainingSet: empty");
        if (!inputs.allFinite() || !outputs.allFinite())
            throw NumericalDomain("TrainingSet: non-finite entries");
        TrainingSet t;
        t.x = std::move(inputs);
        t.y = std::move(outputs);
        t.output_mean = t.y.mean();
        double scale = 1.0;
        if (t.y.size() >= 2) {
            double ss = (t.y.array() - t.output_mean).square().sum() /
                        static_cast<double>(t.y.size() - 1);
            if (ss > 0.0) scale = std::sqrt(ss);
        }
        t.output_scale = scale;
        t.y_std = (t.y.array() - t.output_mean) / t.output_scale;
        return t;
    }
};

namespace detail {

/// Per-dimension coordinate differences of the training inputs, cached once
/// per fit so each likelihood evaluation only pays for the correlations.
struct PairwiseDiffs {
    std::vector<Eigen::MatrixXd> diff;  // D matrices, N x N, x_i - x_j per dim

    explicit PairwiseDiffs(const Eigen::MatrixXd& x) {
        diff.reserve(static_cast<std::size_t>(x.cols()));
        for (Eigen::Index d = 0; d < x.cols(); ++d) {
            Eigen::MatrixXd m(x.rows(), x.rows());
            for (Eigen::Index j = 0; j < x.rows(); ++j)
                m.col(j) = x.col(d).array() - x(j, d);
            diff.push_back(std::move(m));
        }
    }
};

inline Eigen::MatrixXd kernel_from_diffs(KernelKind kind, const Hyperparameters& theta,
                                         const PairwiseDiffs& pd) {
    Eigen::Index n = pd.diff.front().rows();
    Eigen::MatrixXd k = Eigen::MatrixXd::Constant(n, n, theta.amplitude());
    for (std::size_t d = 0; d < pd.diff.size(); ++d) {
        double ell = theta.length_scale[static_cast<Eigen::Index>(d)];
        const Eigen::MatrixXd& r = pd.diff[d];
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index i = 0; i < n; ++i) k(i, j) *= corr(kind, r(i, j), ell);
    }
    return k;
}

}  // namespace detail

/// Log marginal likelihood of standardized outputs under the zero-mean GP:
///   -1/2 y^T K_eps^{-1} y - 1/2 log|K_eps| - N/2 log(2 pi),
/// with K_eps = K + nugget I. Returns nothing when the Cholesky
/// factorization fails, which the optimizer treats as a rejected point.
inline std::optional<double> try_log_marginal_likelihood(KernelKind kind,
                                                         const Hyperparameters& theta,
                                                         const TrainingSet& train) {
    theta.validate();
    if (theta.dimension() != train.dimension())
        throw ShapeMismatch("log_marginal_likelihood: kernel/training dimension mismatch");
    detail::PairwiseDiffs pd(train.x);
    Eigen::MatrixXd keps = detail::kernel_from_diffs(kind, theta, pd);
    keps.diagonal().array() += theta.nugget;
    Eigen::LLT<Eigen::MatrixXd> llt(keps);
    if (llt.info() != Eigen::Success) return std::nullopt;
    Eigen::VectorXd alpha = llt.solve(train.y_std);
    double lml = -0.5 * train.y_std.dot(alpha);
    lml -= llt.matrixLLT().diagonal().array().log().sum();
    lml -= 0.5 * static_cast<double>(train.size()) * std::log(2.0 * M_PI);
    return lml;
}

inline double log_marginal_likelihood(KernelKind kind, const Hyperparameters& theta,
                                      const TrainingSet& train) {
    auto lml = try_log_marginal_likelihood(kind, theta, train);
    if (!lml)
        throw IllConditionedKernel("log_marginal_likelihood: Cholesky factorization failed");
    return *lml;
}

/// Gradient of the log marginal likelihood with respect to the log
/// hyperparameters, ordered as Hyperparameters::log_vector. Uses the trace
/// identity dL/dtheta = 1/2 tr[(alpha alpha^T - K_eps^{-1}) dK/dtheta];
/// all signal-variance components are equal because only the product of the
/// per-dimension variances enters the kernel.
inline Eigen::VectorXd lml_gradient(KernelKind kind, const Hyperparameters& theta,
                                    const TrainingSet& train) {
    theta.validate();
    if (theta.dimension() != train.dimension())
        throw ShapeMismatch("lml_gradient: kernel/training dimension mismatch");
    const Eigen::Index n = train.size();
    const Eigen::Index d = theta.dimension();

    detail::PairwiseDiffs pd(train.x);
    Eigen::MatrixXd kf = detail::kernel_from_diffs(kind, theta, pd);
    Eigen::MatrixXd keps = kf;
    keps.diagonal().array() += theta.nugget;
    Eigen::LLT<Eigen::MatrixXd> llt(keps);
    if (llt.info() != Eigen::Success)
        throw IllConditionedKernel("lml_gradient: Cholesky factorization failed");
    Eigen::VectorXd alpha = llt.solve(train.y_std);
    Eigen::MatrixXd w = alpha * alpha.transpose() -
                        llt.solve(Eigen::MatrixXd::Identity(n, n));

    Eigen::VectorXd grad(2 * d + 1);
    double amp_term = 0.5 * w.cwiseProduct(kf).sum();
    grad.head(d).setConstant(amp_term);
    for (Eigen::Index dim = 0; dim < d; ++dim) {
        double ell = theta.length_scale[dim];
        const Eigen::MatrixXd& r = pd.diff[static_cast<std::size_t>(dim)];
        double acc = 0.0;
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index i = 0; i < n; ++i)
                acc += w(i, j) * kf(i, j) * detail::corr_dlog_ratio(kind, r(i, j), ell);
        grad[d + dim] = 0.5 * acc;
    }
    grad[2 * d] = 0.5 * theta.nugget * w.trace();
    return grad;
}

struct FitOptions {
    int restarts = 10;
    std::uint64_t seed = 0;
    double length_scale_lo = 1e-2;
    double length_scale_hi = 1e2;
    double signal_variance_lo = 1e-4;
    double signal_variance_hi = 1e4;
    double nugget_lo = 1e-10;
    double nugget_hi = 1e-2;
    int max_iterations = 200;
    double gradient_tolerance = 1e-7;
};

struct RealizationOptions {
    Eigen::Index block = 1024;
    unsigned threads = 0;  // 0 = hardware concurrency
};

/// Joint posterior draws over the query points.
struct RealizationResult {
    Eigen::MatrixXd values;       // P x K, one realization per column, raw units
    double jitter_used = 0.0;     // largest diagonal lift any block needed
};

struct Prediction {
    Eigen::VectorXd mean;        // raw units
    Eigen::MatrixXd covariance;  // raw units squared
    double floor_clip = 0.0;     // magnitude of the most negative eigenvalue clipped away
};

/// Binned one-dimensional projection of the predictive mean. Probes are
/// full-dimensional Sobol points; each lands in the bin its target
/// coordinate falls into, and the band is the empirical spread of the
/// predictive mean within the bin, i.e. the variation the other inputs
/// induce at that slice.
struct ProjectionBin {
    double center = 0.0;  // unit coordinate of the bin center
    double mean = std::numeric_limits<double>::quiet_NaN();
    double lo95 = std::numeric_limits<double>::quiet_NaN();
    double hi95 = std::numeric_limits<double>::quiet_NaN();
    Eigen::Index count = 0;
    bool empty = true;
};

/// Gaussian-process regressor with a factorized kernel matrix. Construct
/// through fit_gp or make_gp.
class TrainedGP {
public:
    TrainedGP() = default;

    KernelKind kind() const { return kind_; }
    const Hyperparameters& theta() const { return theta_; }
    const TrainingSet& training() const { return train_; }
    double log_marginal() const { return lml_; }
    double jitter() const { return jitter_; }
    int dimension() const { return train_.dimension(); }

    /// Predictive mean only; linear in the number of query points.
    Eigen::VectorXd predict_mean(const Eigen::MatrixXd& xstar) const {
        Eigen::MatrixXd ks = kernel_matrix(kind_, theta_, xstar, train_.x);
        return (train_.output_mean + (train_.output_scale * (ks * alpha_).array())).matrix();
    }

    /// Leave-one-out residuals y_i - yhat_{-i} in raw units, via the
    /// closed-form identity r_i = alpha_i / (K_eps^{-1})_ii. No refits.
    Eigen::VectorXd loo_residuals() const {
        Eigen::Index n = train_.size();
        Eigen::MatrixXd kinv = chol_.solve(Eigen::MatrixXd::Identity(n, n));
        return (train_.output_scale * (alpha_.array() / kinv.diagonal().array())).matrix();
    }

    /// Full predictive distribution. The covariance is symmetrized and, when
    /// roundoff pushes an eigenvalue below zero, floored at zero; the
    /// magnitude of the worst clipped eigenvalue is reported in floor_clip.
    /// Quadratic memory in the number of query points; use predict_mean or
    /// sample_realizations for large batches.
    Prediction predict(const Eigen::MatrixXd& xstar) const {
        Eigen::MatrixXd ks = kernel_matrix(kind_, theta_, xstar, train_.x);
        Eigen::MatrixXd v = chol_.matrixL().solve(ks.transpose());
        Eigen::MatrixXd cov = kernel_matrix_sym(kind_, theta_, xstar) - v.transpose() * v;
        cov = 0.5 * (cov + cov.transpose()).eval();

        Prediction out;
        out.mean = (train_.output_mean + (train_.output_scale * (ks * alpha_).array())).matrix();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
        if (eig.info() != Eigen::Success)
            throw IllConditionedKernel("predict: eigendecomposition failed");
        Eigen::VectorXd evals = eig.eigenvalues();
        double min_eval = evals.minCoeff();
        double scale2 = train_.output_scale * train_.output_scale;
        if (min_eval < 0.0) {
            out.floor_clip = -min_eval * scale2;
            evals = evals.cwiseMax(0.0);
            cov = eig.eigenvectors() * evals.asDiagonal() * eig.eigenvectors().transpose();
            cov = 0.5 * (cov + cov.transpose()).eval();
        }
        out.covariance = scale2 * cov;
        return out;
    }

    /// Draws K joint posterior realizations over the query rows.
    ///
    /// Rows are processed in consecutive blocks: each block gets its own
    /// posterior covariance, Cholesky factor and draws, and correlations
    /// across blocks are dropped. Sensitivity estimators consume f(A),
    /// f(B), f(AB_i) values row by row, so what they need is the joint
    /// law along each realization's row set, which block draws preserve up
    /// to the truncated cross-block terms; full joint sampling over all
    /// M(D+2) rows would be cubic in that total and out of reach.
    ///
    /// Deterministic: draw k over block b uses a stream derived from
    /// (seed, k, b), so results do not depend on thread schedule. Changing
    /// the block size changes which correlations are kept and therefore the
    /// draws themselves.
    RealizationResult sample_realizations(const Eigen::MatrixXd& xstar, Eigen::Index k,
                                          std::uint64_t seed,
                                          const RealizationOptions& options = {}) const {
        if (k < 1) throw std::invalid_argument("sample_realizations: need at least one draw");
        if (xstar.cols() != dimension())
            throw ShapeMismatch("sample_realizations: query dimension mismatch");
        const Eigen::Index p = xstar.rows();
        const Eigen::Index block = std::max<Eigen::Index>(1, options.block);
        const Eigen::Index nblocks = (p + block - 1) / block;

        RealizationResult result;
        result.values.resize(p, k);
        std::atomic<double> jitter_used{0.0};

        parallel_for(static_cast<std::size_t>(nblocks), options.threads, [&](std::size_t bi) {
            Eigen::Index start = static_cast<Eigen::Index>(bi) * block;
            Eigen::Index rows = std::min(block, p - start);
            Eigen::MatrixXd xb = xstar.middleRows(start, rows);

            Eigen::MatrixXd ks = kernel_matrix(kind_, theta_, xb, train_.x);
            Eigen::MatrixXd v = chol_.matrixL().solve(ks.transpose());
            Eigen::MatrixXd cov = kernel_matrix_sym(kind_, theta_, xb) - v.transpose() * v;
            cov = 0.5 * (cov + cov.transpose()).eval();
            Eigen::VectorXd mean = ks * alpha_;

            auto [llt, jitter] = factorize_with_jitter(cov);
            if (jitter > 0.0) {
                double prev = jitter_used.load();
                while (prev < jitter && !jitter_used.compare_exchange_weak(prev, jitter)) {
                }
            }

            Eigen::MatrixXd z(rows, k);
            for (Eigen::Index col = 0; col < k; ++col) {
                Rng rng(derive_seed(seed, static_cast<std::uint64_t>(col),
                                    static_cast<std::uint64_t>(bi)));
                for (Eigen::Index r = 0; r < rows; ++r) z(r, col) = rng.normal();
            }
            Eigen::MatrixXd draws = llt.matrixL() * z;
            draws.colwise() += mean;
            result.values.middleRows(start, rows) =
                (train_.output_mean + train_.output_scale * draws.array()).matrix();
        });

        result.jitter_used = jitter_used.load();
        return result;
    }

    /// One-dimensional projection of the predictive mean onto input `dim`.
    std::vector<ProjectionBin> project_mean(int dim, int grid, Eigen::Index probes,
                                            std::uint64_t skip = 0) const {
        if (dim < 0 || dim >= dimension()) throw std::invalid_argument("project_mean: bad dim");
        if (grid < 1) throw std::invalid_argument("project_mean: grid must be >= 1");
        if (probes < 1) throw std::invalid_argument("project_mean: need probes");
        Eigen::MatrixXd u = sobol_points(dimension(), probes, skip);
        Eigen::VectorXd mean = predict_mean(u);

        std::vector<std::vector<double>> bins(static_cast<std::size_t>(grid));
        for (Eigen::Index i = 0; i < probes; ++i) {
            auto b = static_cast<std::size_t>(
                std::min<Eigen::Index>(grid - 1, static_cast<Eigen::Index>(u(i, dim) * grid)));
            bins[b].push_back(mean[i]);
        }

        std::vector<ProjectionBin> out(static_cast<std::size_t>(grid));
        for (int g = 0; g < grid; ++g) {
            auto& bin = out[static_cast<std::size_t>(g)];
            bin.center = (g + 0.5) / grid;
            auto& vals = bins[static_cast<std::size_t>(g)];
            bin.count = static_cast<Eigen::Index>(vals.size());
            bin.empty = vals.empty();
            if (bin.empty) continue;
            std::sort(vals.begin(), vals.end());
            double sum = 0.0;
            for (double v : vals) sum += v;
            bin.mean = sum / static_cast<double>(vals.size());
            bin.lo95 = quantile_sorted(vals, 0.025);
            bin.hi95 = quantile_sorted(vals, 0.975);
        }
        return out;
    }

    friend TrainedGP make_gp(TrainingSet train, KernelKind kind, Hyperparameters theta);

private:
    static double quantile_sorted(const std::vector<double>& sorted, double p) {
        if (sorted.size() == 1) return sorted.front();
        double h = p * static_cast<double>(sorted.size() - 1);
        auto lo = static_cast<std::size_t>(h);
        if (lo + 1 >= sorted.size()) return sorted.back();
        double frac = h - static_cast<double>(lo);
        return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
    }

    /// Cholesky with an escalating diagonal lift: exact first, then
    /// 1e-10 growing tenfold per retry up to 1e-4.
    static std::pair<Eigen::LLT<Eigen::MatrixXd>, double> factorize_with_jitter(
        const Eigen::MatrixXd& m) {
        Eigen::LLT<Eigen::MatrixXd> llt(m);
        if (llt.info() == Eigen::Success) return {std::move(llt), 0.0};
        for (double jitter = 1e-10; jitter <= 1e-4 * 1.0000001; jitter *= 10.0) {
            Eigen::MatrixXd lifted = m;
            lifted.diagonal().array() += jitter;
            llt.compute(lifted);
            if (llt.info() == Eigen::Success) return {std::move(llt), jitter};
        }
        throw IllConditionedKernel(
            "covariance factorization failed after diagonal lifts up to 1e-4");
    }

    KernelKind kind_ = KernelKind::SquaredExponential;
    Hyperparameters theta_;
    TrainingSet train_;
    Eigen::LLT<Eigen::MatrixXd> chol_;
    Eigen::VectorXd alpha_;
    double lml_ = std::numeric_limits<double>::quiet_NaN();
    double jitter_ = 0.0;
};

/// Builds a TrainedGP at fixed hyperparameters (no optimization).
inline TrainedGP make_gp(TrainingSet train, KernelKind kind, Hyperparameters theta) {
    theta.validate();
    if (theta.dimension() != train.dimension())
        throw ShapeMismatch("make_gp: kernel/training dimension mismatch");

    TrainedGP gp;
    gp.kind_ = kind;
    gp.theta_ = std::move(theta);
    gp.train_ = std::move(train);

    Eigen::MatrixXd keps = kernel_matrix_sym(gp.kind_, gp.theta_, gp.train_.x);
    keps.diagonal().array() += gp.theta_.nugget;
    auto [llt, jitter] = TrainedGP::factorize_with_jitter(keps);
    gp.chol_ = std::move(llt);
    gp.jitter_ = jitter;
    gp.alpha_ = gp.chol_.solve(gp.train_.y_std);
    gp.lml_ = -0.5 * gp.train_.y_std.dot(gp.alpha_) -
              gp.chol_.matrixLLT().diagonal().array().log().sum() -
              0.5 * static_cast<double>(gp.train_.size()) * std::log(2.0 * M_PI);
    return gp;
}

/// Maximum-likelihood fit with multi-start optimization in log-parameter
/// space. Restart 0 starts from a fixed moderate guess; later restarts draw
/// log-uniform starts from a stream derived from (seed, restart), so the
/// selected optimum is reproducible. Ties in the final likelihood go to the
/// earliest restart.
inline TrainedGP fit_gp(const TrainingSet& train, KernelKind kind, const FitOptions& options = {}) {
    if (train.size() < 2) throw FitFailed("fit_gp: need at least 2 training points");
    {
        double spread = (train.y.array() - train.y.mean()).abs().maxCoeff();
        if (spread == 0.0) throw FitFailed("fit_gp: training outputs are constant");
    }
    const Eigen::Index d = train.dimension();
    const Eigen::Index np = 2 * d + 1;

    Eigen::VectorXd lo(np), hi(np);
    lo.head(d).setConstant(std::log(options.signal_variance_lo));
    hi.head(d).setConstant(std::log(options.signal_variance_hi));
    lo.segment(d, d).setConstant(std::log(options.length_scale_lo));
    hi.segment(d, d).setConstant(std::log(options.length_scale_hi));
    lo[2 * d] = std::log(options.nugget_lo);
    hi[2 * d] = std::log(options.nugget_hi);

    auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) -> double {
        Hyperparameters theta = Hyperparameters::from_log_vector(x);
        auto lml = try_log_marginal_likelihood(kind, theta, train);
        if (!lml) {
            grad.setZero(np);
            return std::numeric_limits<double>::infinity();
        }
        grad = -lml_gradient(kind, theta, train);
        return -*lml;
    };

    BoxMinimizeOptions mopts;
    mopts.max_iterations = options.max_iterations;
    mopts.gradient_tolerance = options.gradient_tolerance;

    double best_f = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_x;
    std::string failures;
    for (int r = 0; r < std::max(1, options.restarts); ++r) {
        Eigen::VectorXd x0(np);
        if (r == 0) {
            x0.head(d).setConstant(std::log(1.0));
            x0.segment(d, d).setConstant(std::log(0.5));
            x0[2 * d] = std::log(1e-6);
            for (Eigen::Index i = 0; i < np; ++i) x0[i] = std::min(hi[i], std::max(lo[i], x0[i]));
        } else {
            // Draw order (variances, then lengths, then nugget) is part of
            // the reproducibility contract.
            Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(r)));
            for (Eigen::Index i = 0; i < np; ++i) x0[i] = rng.uniform(lo[i], hi[i]);
        }
        auto res = minimize_box_lbfgs(objective, x0, lo, hi, mopts);
        if (std::isfinite(res.f) && res.f < best_f) {
            best_f = res.f;
            best_x = res.x;
        } else if (!std::isfinite(res.f)) {
            failures += "restart " + std::to_string(r) + ": " + res.message + "; ";
        }
    }
    if (!best_x.size())
        throw FitFailed("fit_gp: every restart failed (" + failures + ")");

    TrainedGP gp = make_gp(train, kind, Hyperparameters::from_log_vector(best_x));
    return gp;
}

}  // namespace gpsens
