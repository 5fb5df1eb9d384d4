// Acceptance gate for the whole toolkit. Each numbered criterion is an
// end-to-end statement about behavior a user relies on — estimator accuracy
// against closed-form indices, the variance split reacting correctly to
// training-set and Monte-Carlo sizes, validated gradients, CI coverage,
// byte-level determinism — with every tolerance pinned in this file. One
// line is printed per criterion; the exit code is the number of failures.
//
// Unlike the unit suites this binary uses only the public library API, so it
// doubles as a living example of driving an analysis programmatically.

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gpsens/pipeline.hpp"

using namespace gpsens;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool ok = false;
    std::string detail;
};

int g_failures = 0;

void criterion(int number, const char* title, const std::function<Verdict()>& body) {
    Verdict v;
    try {
        v = body();
    } catch (const std::exception& e) {
        v.ok = false;
        v.detail = std::string("exception: ") + e.what();
    }
    if (!v.ok) ++g_failures;
    std::printf("[ACCEPT] criterion %2d: %s - %s: %s\n", number, v.ok ? "pass" : "FAIL", title,
                v.detail.c_str());
    std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* format, ...) {
    char buf[512];
    va_list args;
    va_start(args, format);
    std::vsnprintf(buf, sizeof buf, format, args);
    va_end(args);
    return buf;
}

/// Evaluates a benchmark exactly on every block of a design.
DesignEvaluations exact_evaluations(const BenchmarkFn& fn, const PickFreezeDesign& d) {
    DesignEvaluations e;
    e.a = fn.evaluate_rows(d.a);
    e.b = fn.evaluate_rows(d.b);
    for (const auto& m : d.ab) e.ab.push_back(fn.evaluate_rows(m));
    if (d.ba) {
        e.ba.emplace();
        for (const auto& m : *d.ba) e.ba->push_back(fn.evaluate_rows(m));
    }
    return e;
}

/// Trains a GP on the first n points of the benchmark's Sobol stream.
TrainedGP fit_on_prefix(const BenchmarkFn& fn, Eigen::Index n, int restarts, std::uint64_t seed) {
    ParameterSpace sp = fn.space();
    Eigen::MatrixXd u = sobol_points(sp.dimension(), n, 0);
    Eigen::VectorXd y = fn.evaluate_rows(sp.to_physical(u));
    FitOptions fo;
    fo.restarts = restarts;
    fo.seed = seed;
    return fit_gp(TrainingSet::standardized(u, y), KernelKind::SquaredExponential, fo);
}

/// Full realization-plus-bootstrap analysis, decomposed per target.
std::vector<SobolEstimate> analyze(const TrainedGP& gp, const PickFreezeDesign& design,
                                   const ParameterSpace& space, int nreal, int nboot,
                                   std::uint64_t seed, std::vector<IndexTarget> targets = {}) {
    AnalyzeOptions opts;
    opts.n_realizations = nreal;
    opts.n_bootstrap = nboot;
    opts.seed = seed;
    opts.block = 2048;
    opts.targets = std::move(targets);
    std::vector<SobolEstimate> out;
    for (const auto& m : compute_index_matrices(gp, design, space, opts))
        out.push_back(decompose(m));
    return out;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

int main() {
    const auto wall0 = std::chrono::steady_clock::now();

    // ------------------------------------------------------------------
    criterion(1, "pick-freeze estimators vs analytic indices at M=2^16", [] {
        auto t0 = std::chrono::steady_clock::now();
        BenchmarkFn fn = BenchmarkFn::parse("builtin:ishigami", 3);
        PickFreezeDesign d = build_design(fn.space(), Eigen::Index(1) << 16, true, 0);
        DesignEvaluations e = centered(exact_evaluations(fn, d));
        AnalyticIndices truth = fn.analytic_indices();
        double err_first = 0, err_total = 0, err_second = 0;
        for (int i = 0; i < 3; ++i) {
            err_first = std::max(err_first, std::abs(first_order(e, i) - truth.first[i]));
            err_total = std::max(err_total, std::abs(total_order(e, i) - truth.total[i]));
            for (int j = i + 1; j < 3; ++j)
                err_second =
                    std::max(err_second, std::abs(second_order(e, i, j) - truth.second(i, j)));
        }
        double elapsed = seconds_since(t0);
        bool ok = err_first <= 0.01 && err_total <= 0.01 && err_second <= 0.02 && elapsed < 30.0;
        return Verdict{ok, fmt("max|dS|=%.1e max|dST|=%.1e max|dS2|=%.1e (tol 0.01/0.01/0.02), "
                               "%.1fs (limit 30)",
                               err_first, err_total, err_second, elapsed)};
    });

    // ------------------------------------------------------------------
    criterion(2, "metamodel pipeline recovers indices from 150 model runs", [] {
        auto t0 = std::chrono::steady_clock::now();
        fs::path dir = fs::temp_directory_path() / "gpsens_accept_c2";
        fs::remove_all(dir);
        BenchmarkFn fn = BenchmarkFn::parse("builtin:ishigami", 3);
        RunConfig cfg;
        cfg.space = fn.space();
        cfg.model_selector = "builtin:ishigami";
        cfg.output_dir = dir.string();
        cfg.n_train = 150;
        cfg.n_valid = 2;
        cfg.m_mc = 10000;
        cfg.n_realizations = 500;
        cfg.n_bootstrap = 300;
        cfg.seed = 42;
        cfg.restarts = 5;
        cfg.block = 2048;
        cfg.grid = 8;
        cfg.probes = 512;
        AnalysisResult res = run_pipeline(cfg);
        AnalyticIndices truth = fn.analytic_indices();
        double worst = 0;
        for (int i = 0; i < 3; ++i) {
            worst = std::max(worst, std::abs(res.estimates[i].mean - truth.first[i]));
            worst = std::max(worst,
                             std::abs(res.estimates[3 + i].mean - truth.total[i]));
        }
        // True ordering for Ishigami(a=7, b=0.1): S2 > S1 > S3.
        bool ranked = res.estimates[1].mean > res.estimates[0].mean &&
                      res.estimates[0].mean > res.estimates[2].mean;
        double elapsed = seconds_since(t0);
        bool ok = worst <= 0.05 && ranked && elapsed < 600.0;
        return Verdict{ok, fmt("worst |err|=%.4f (tol 0.05), ranking S2>S1>S3 %s, %.1fs "
                               "(limit 600)",
                               worst, ranked ? "holds" : "BROKEN", elapsed)};
    });

    // ------------------------------------------------------------------
    criterion(3, "variance split tracks training size and MC budget", [] {
        BenchmarkFn fn = BenchmarkFn::parse("builtin:ishigami", 3);
        ParameterSpace sp = fn.space();
        PickFreezeDesign probe = build_design(sp, 1024, false, 4096);

        // Metamodel variance must fall as the GP sees more training data.
        std::vector<double> meta_first, meta_total;
        TrainedGP gp100 = fit_on_prefix(fn, 100, 3, 101);
        for (Eigen::Index n : {20, 50, 100, 200}) {
            TrainedGP gp = n == 100 ? gp100 : fit_on_prefix(fn, n, 3, 101);
            auto est = analyze(gp, probe, sp, 100, 60, 12345);
            double mf = 0, mt = 0;
            for (int i = 0; i < 3; ++i) {
                mf += est[static_cast<std::size_t>(i)].var_metamodel / 3.0;
                mt += est[static_cast<std::size_t>(3 + i)].var_metamodel / 3.0;
            }
            meta_first.push_back(mf);
            meta_total.push_back(mt);
        }
        bool falling = true;
        for (std::size_t k = 0; k + 1 < meta_first.size(); ++k)
            falling = falling && meta_first[k + 1] <= 2.0 * meta_first[k] &&
                      meta_total[k + 1] <= 2.0 * meta_total[k];
        falling = falling && meta_first.back() <= 0.25 * meta_first.front() &&
                  meta_total.back() <= 0.25 * meta_total.front();

        // Sampling variance must scale like 1/M: quadrupling the design
        // shrinks it by roughly 4 (mean over indices; single indices wobble).
        PickFreezeDesign small = build_design(sp, 1024, false, 0);
        PickFreezeDesign big = build_design(sp, 4096, false, 0);
        auto es = analyze(gp100, small, sp, 100, 100, 777);
        auto eb = analyze(gp100, big, sp, 100, 100, 777);
        double mean_ratio = 0;
        for (std::size_t i = 0; i < es.size(); ++i)
            mean_ratio += es[i].var_sampling / eb[i].var_sampling / static_cast<double>(es.size());
        bool mc_ok = mean_ratio >= 2.5 && mean_ratio <= 6.0;

        return Verdict{falling && mc_ok,
                       fmt("var_gp(first) %.1e->%.1e over N=20..200 (need <=2x steps, <=0.25x "
                           "overall); var_mc ratio %.2f for 4x M (need 2.5..6)",
                           meta_first.front(), meta_first.back(), mean_ratio)};
    });

    // ------------------------------------------------------------------
    criterion(4, "near-interpolating GP contributes negligible variance", [] {
        BenchmarkFn fn = BenchmarkFn::parse("builtin:linear?w=3,1", 2);
        ParameterSpace sp = fn.space();
        Eigen::MatrixXd u = sobol_points(2, 40, 0);
        Eigen::VectorXd y = fn.evaluate_rows(u);
        Hyperparameters theta;
        theta.signal_variance = Eigen::VectorXd::Ones(2);
        theta.length_scale = Eigen::VectorXd::Constant(2, 1.0);
        theta.nugget = 1e-10;
        TrainedGP gp =
            make_gp(TrainingSet::standardized(u, y), KernelKind::SquaredExponential, theta);
        PickFreezeDesign d = build_design(sp, 512, false, 64);
        auto est = analyze(gp, d, sp, 100, 100, 2024,
                           {{IndexOrder::First, 0, -1}, {IndexOrder::First, 1, -1}});
        double worst = 0;
        for (const auto& e : est) worst = std::max(worst, e.var_metamodel / e.var_sampling);
        return Verdict{worst <= 1e-6,
                       fmt("max var_gp/var_mc = %.1e (tol 1e-6), nugget 1e-10", worst)};
    });

    // ------------------------------------------------------------------
    criterion(5, "GP internals: gradients, interpolation, far-field prior", [] {
        // (a) Marginal-likelihood gradient against five-point finite
        // differences in log-hyperparameter space, 20 random instances.
        double worst_grad = 0;
        for (int k = 0; k < 20; ++k) {
            Rng rng(derive_seed(5150, static_cast<std::uint64_t>(k)));
            int d = 1 + static_cast<int>(rng.uniform_index(3));
            Eigen::MatrixXd x(12, d);
            for (int r = 0; r < 12; ++r)
                for (int c = 0; c < d; ++c) x(r, c) = rng.u01();
            Eigen::VectorXd y(12);
            for (int r = 0; r < 12; ++r) y[r] = std::sin(5.0 * x(r, 0)) + rng.normal() * 0.3;
            TrainingSet train = TrainingSet::standardized(x, y);
            Hyperparameters theta;
            theta.signal_variance.resize(d);
            theta.length_scale.resize(d);
            for (int c = 0; c < d; ++c) {
                theta.signal_variance[c] = 0.5 + 1.5 * rng.u01();
                theta.length_scale[c] = 0.3 + 1.7 * rng.u01();
            }
            theta.nugget = std::pow(10.0, -4.0 + 2.0 * rng.u01());
            KernelKind kind = k % 2 ? KernelKind::Matern52 : KernelKind::SquaredExponential;

            Eigen::VectorXd analytic = lml_gradient(kind, theta, train);
            Eigen::VectorXd logv = theta.log_vector();
            const double h = 1e-4;
            for (Eigen::Index i = 0; i < logv.size(); ++i) {
                auto lml_at = [&](double dx) {
                    Eigen::VectorXd v = logv;
                    v[i] += dx;
                    return log_marginal_likelihood(kind, Hyperparameters::from_log_vector(v),
                                                   train);
                };
                double fd = (8.0 * (lml_at(h) - lml_at(-h)) - (lml_at(2 * h) - lml_at(-2 * h))) /
                            (12.0 * h);
                worst_grad = std::max(
                    worst_grad, std::abs(fd - analytic[i]) / std::max(std::abs(analytic[i]), 0.01));
            }
        }
        bool grad_ok = worst_grad <= 1e-5;

        // (b) A tiny-nugget GP reproduces its training data, and (c) far from
        // the data it reverts to the prior mean and variance. Moderate length
        // scale keeps the covariance well-conditioned enough that the 1e-6
        // interpolation bound is meaningful rather than solver-noise-limited.
        Eigen::MatrixXd u = sobol_points(2, 20, 0);
        Eigen::VectorXd y(20);
        for (int r = 0; r < 20; ++r)
            y[r] = std::sin(6.0 * u(r, 0)) + 0.5 * u(r, 1) * u(r, 1) + u(r, 0) * u(r, 1);
        Hyperparameters theta;
        theta.signal_variance = Eigen::VectorXd::Ones(2);
        theta.length_scale = Eigen::VectorXd::Constant(2, 0.4);
        theta.nugget = 1e-10;
        TrainedGP gp =
            make_gp(TrainingSet::standardized(u, y), KernelKind::SquaredExponential, theta);
        double interp_err = (gp.predict_mean(u) - y).cwiseAbs().maxCoeff();
        bool interp_ok = interp_err <= 1e-6;

        Eigen::MatrixXd far(1, 2);
        far << 60.0, -60.0;
        Prediction p = gp.predict(far);
        double mean0 = gp.training().output_mean;
        double scale = gp.training().output_scale;
        double prior_var = gp.theta().amplitude() * scale * scale;
        double mean_dev = std::abs(p.mean[0] - mean0) / scale;
        double var_dev = std::abs(p.covariance(0, 0) - prior_var) / prior_var;
        bool far_ok = mean_dev <= 1e-3 && var_dev <= 1e-3;

        return Verdict{grad_ok && interp_ok && far_ok,
                       fmt("grad rel err %.1e (tol 1e-5); interpolation %.1e (tol 1e-6); "
                           "far-field mean/var dev %.1e/%.1e (tol 1e-3)",
                           worst_grad, interp_err, mean_dev, var_dev)};
    });

    // ------------------------------------------------------------------
    criterion(6, "first-order indices of an additive model sum to one", [] {
        BenchmarkFn fn = BenchmarkFn::parse("builtin:linear?w=4,3,2", 3);
        PickFreezeDesign d = build_design(fn.space(), Eigen::Index(1) << 14, false, 0);
        DesignEvaluations e = centered(exact_evaluations(fn, d));
        double sum = 0;
        for (int i = 0; i < 3; ++i) sum += first_order(e, i);
        bool ok = sum >= 0.97 && sum <= 1.03;
        return Verdict{ok, fmt("sum(S_i) = %.4f (need 0.97..1.03) at M=2^14", sum)};
    });

    // ------------------------------------------------------------------
    criterion(7, "predictivity: exact at truth, improving with data", [] {
        // Q2 of a perfect prediction is exactly 1 (the residual sum is zero).
        Eigen::VectorXd any(4);
        any << 0.4, -1.2, 3.14, 2.0;
        bool exact_one = predictivity(any, any) == 1.0;

        BenchmarkFn fn = BenchmarkFn::parse("builtin:ishigami", 3);
        ParameterSpace sp = fn.space();
        Eigen::MatrixXd hold_u = sobol_points(3, 400, 200);
        Eigen::VectorXd hold_y = fn.evaluate_rows(sp.to_physical(hold_u));
        std::vector<double> q2s;
        for (Eigen::Index n : {10, 20, 50, 100})
            q2s.push_back(predictivity(fit_on_prefix(fn, n, 3, 7).predict_mean(hold_u), hold_y));
        bool trend = true;
        for (std::size_t k = 0; k + 1 < q2s.size(); ++k)
            trend = trend && q2s[k + 1] >= q2s[k] - 0.02;
        bool ok = exact_one && trend && q2s.back() >= 0.8 && q2s.back() > q2s.front();
        return Verdict{ok, fmt("Q2(truth)=1 %s; Q2 over N=10..100: %.3f %.3f %.3f %.3f "
                               "(0.02 band, final >= 0.8)",
                               exact_one ? "exactly" : "VIOLATED", q2s[0], q2s[1], q2s[2],
                               q2s[3])};
    });

    // ------------------------------------------------------------------
    criterion(8, "95% intervals cover the true index across replicates", [] {
        BenchmarkFn fn = BenchmarkFn::parse("builtin:linear?w=3,1", 2);
        ParameterSpace sp = fn.space();
        Eigen::MatrixXd u = sobol_points(2, 32, 0);
        Eigen::VectorXd y = fn.evaluate_rows(u);
        FitOptions fo;
        fo.restarts = 2;
        fo.seed = 7;
        TrainedGP gp = fit_gp(TrainingSet::standardized(u, y), KernelKind::SquaredExponential, fo);
        AnalyticIndices truth = fn.analytic_indices();
        int covered = 0, events = 0;
        for (unsigned r = 0; r < 50; ++r) {
            PickFreezeDesign d = build_design(sp, 256, false, 1000 + 256u * r);
            auto est = analyze(gp, d, sp, 40, 40, derive_seed(99, r),
                               {{IndexOrder::First, 0, -1}, {IndexOrder::First, 1, -1}});
            for (int i = 0; i < 2; ++i) {
                ++events;
                if (std::abs(est[static_cast<std::size_t>(i)].mean - truth.first[i]) <=
                    est[static_cast<std::size_t>(i)].ci95_total)
                    ++covered;
            }
        }
        double rate = static_cast<double>(covered) / static_cast<double>(events);
        return Verdict{rate >= 0.80,
                       fmt("coverage %d/%d = %.2f (need >= 0.80)", covered, events, rate)};
    });

    // ------------------------------------------------------------------
    criterion(9, "pipeline output is byte-identical across runs and threads", [] {
        fs::path root = fs::temp_directory_path() / "gpsens_accept_c9";
        fs::remove_all(root);
        auto make_cfg = [&](const std::string& tag, unsigned threads) {
            RunConfig cfg;
            cfg.space = BenchmarkFn::parse("builtin:ishigami", 3).space();
            cfg.model_selector = "builtin:ishigami";
            cfg.output_dir = (root / tag).string();
            cfg.n_train = 16;
            cfg.n_valid = 2;
            cfg.m_mc = 64;
            cfg.n_realizations = 8;
            cfg.n_bootstrap = 16;
            cfg.seed = 5;
            cfg.second_order = true;
            cfg.block = 32;
            cfg.threads = threads;
            cfg.restarts = 2;
            cfg.grid = 4;
            cfg.probes = 64;
            cfg.convergence_n = {8, 16};
            return cfg;
        };
        run_pipeline(make_cfg("ref", 1));
        run_pipeline(make_cfg("rerun", 1));
        run_pipeline(make_cfg("t2", 2));
        run_pipeline(make_cfg("t4", 4));

        int files = 0;
        std::string first_diff;
        for (const auto& entry : fs::directory_iterator(root / "ref")) {
            if (!entry.is_regular_file()) continue;
            ++files;
            std::string name = entry.path().filename().string();
            std::string ref = slurp(entry.path());
            for (const char* other : {"rerun", "t2", "t4"})
                if (slurp(root / other / name) != ref && first_diff.empty())
                    first_diff = name + " differs in " + other;
        }
        bool ok = files >= 9 && first_diff.empty();
        return Verdict{ok, first_diff.empty()
                               ? fmt("%d artifacts identical across rerun and threads {1,2,4}",
                                     files)
                               : first_diff};
    });

    // ------------------------------------------------------------------
    criterion(10, "evaluation cost is exactly M(D+2), M(2D+2)", [] {
        std::vector<Parameter> params;
        for (int i = 0; i < 6; ++i) params.push_back({"p" + std::to_string(i + 1), 0.0, 1.0});
        ParameterSpace sp{params};
        Eigen::Index first = build_design(sp, 10000, false).total_rows();
        Eigen::Index both = build_design(sp, 10000, true).total_rows();
        bool ok = first == 80000 && both == 140000;
        return Verdict{ok, fmt("D=6, M=10000: %ld rows first-order (want 80000), %ld with "
                               "second-order blocks (want 140000)",
                               static_cast<long>(first), static_cast<long>(both))};
    });

    std::printf("[ACCEPT] %d/10 criteria passed in %.0fs\n", 10 - g_failures,
                seconds_since(wall0));
    return g_failures;
}
