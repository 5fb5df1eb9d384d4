#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "gpsens/errors.hpp"
#include "gpsens/estimators.hpp"
#include "gpsens/gp.hpp"
#include "gpsens/parallel.hpp"
#include "gpsens/rng.hpp"
#include "gpsens/space.hpp"

namespace gpsens {

enum class IndexOrder { First, Total, Second };

/// One requested sensitivity index: First/Total use input i, Second uses the
/// unordered pair (i, j).
struct IndexTarget {
    IndexOrder order = IndexOrder::First;
    int i = 0;
    int j = -1;

    bool operator==(const IndexTarget& o) const {
        return order == o.order && i == o.i && j == o.j;
    }

    std::string label(const std::vector<std::string>& names) const {
        switch (order) {
            case IndexOrder::First:
                return "S(" + names[static_cast<std::size_t>(i)] + ")";
            case IndexOrder::Total:
                return "ST(" + names[static_cast<std::size_t>(i)] + ")";
            default:
                return "S(" + names[static_cast<std::size_t>(i)] + "," +
                       names[static_cast<std::size_t>(j)] + ")";
        }
    }
};

/// All first- and total-order targets, plus every pair when requested.
inline std::vector<IndexTarget> default_targets(int dimension, bool second_order) {
    std::vector<IndexTarget> t;
    for (int i = 0; i < dimension; ++i) t.push_back({IndexOrder::First, i, -1});
    for (int i = 0; i < dimension; ++i) t.push_back({IndexOrder::Total, i, -1});
    if (second_order)
        for (int i = 0; i < dimension; ++i)
            for (int j = i + 1; j < dimension; ++j) t.push_back({IndexOrder::Second, i, j});
    return t;
}

/// B bootstrap index lists of length m. List b is drawn from a stream
/// derived from (seed, b), so the same lists come out for any caller and the
/// set never depends on how many other draws happened before.
inline std::vector<std::vector<std::uint32_t>> bootstrap_indices(Eigen::Index m, int b,
                                                                 std::uint64_t seed) {
    if (m < 1 || b < 1) throw std::invalid_argument("bootstrap_indices: need m >= 1, b >= 1");
    std::vector<std::vector<std::uint32_t>> lists(static_cast<std::size_t>(b));
    for (int rep = 0; rep < b; ++rep) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(rep)));
        auto& list = lists[static_cast<std::size_t>(rep)];
        list.resize(static_cast<std::size_t>(m));
        for (Eigen::Index i = 0; i < m; ++i)
            list[static_cast<std::size_t>(i)] =
                static_cast<std::uint32_t>(rng.uniform_index(static_cast<std::uint64_t>(m)));
    }
    return lists;
}

/// Sensitivity-index samples over metamodel realizations (rows) and
/// bootstrap replicates (columns). NaN marks a cell whose resampled output
/// variance was degenerate. point_estimate is the index computed on the
/// un-resampled evaluations, averaged over realizations.
struct IndexMatrix {
    IndexTarget target;
    Eigen::MatrixXd samples;
    double point_estimate = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

/// Estimates every target for one evaluation vector against precomputed
/// bootstrap sums. This is the closed form of "resample jointly, re-center,
/// estimate": with per-row products aggregated over each bootstrap list, the
/// re-centered estimators reduce to a few sums, which turns the whole
/// (realization x replicate) grid into one small matrix product per
/// realization. test_uncertainty checks this path against the literal
/// resample-and-estimate route.
struct FastPathLayout {
    // Column layout of the per-row product matrix V (M x C):
    // 0: a+b, 1: a^2+b^2, then per needed input i: b*(ab_i - a), ab_i - a,
    // (a - ab_i)^2, then per pair (i,j): ba_i*ab_j - a*b, ba_i + ab_j - a - b.
    std::vector<int> first_col;   // per dimension, -1 when unused
    std::vector<int> total_col;
    std::vector<std::vector<int>> pair_col;  // [i][j], -1 when unused
    int columns = 2;

    FastPathLayout(int d, const std::vector<IndexTarget>& targets)
        : first_col(static_cast<std::size_t>(d), -1),
          total_col(static_cast<std::size_t>(d), -1),
          pair_col(static_cast<std::size_t>(d), std::vector<int>(static_cast<std::size_t>(d), -1)) {
        auto need_first = [&](int i) {
            if (first_col[static_cast<std::size_t>(i)] < 0) {
                first_col[static_cast<std::size_t>(i)] = columns;
                columns += 2;  // covariance and difference columns
            }
        };
        for (const auto& t : targets) {
            switch (t.order) {
                case IndexOrder::First:
                    need_first(t.i);
                    break;
                case IndexOrder::Total:
                    if (total_col[static_cast<std::size_t>(t.i)] < 0) {
                        total_col[static_cast<std::size_t>(t.i)] = columns;
                        columns += 1;
                    }
                    break;
                case IndexOrder::Second:
                    need_first(t.i);
                    need_first(t.j);
                    if (pair_col[static_cast<std::size_t>(t.i)][static_cast<std::size_t>(t.j)] <
                        0) {
                        pair_col[static_cast<std::size_t>(t.i)][static_cast<std::size_t>(t.j)] =
                            columns;
                        columns += 2;
                    }
                    break;
            }
        }
    }
};

/// Fills V (M x C) from one stacked, globally centered evaluation vector.
inline void fill_product_matrix(const FastPathLayout& layout, const Eigen::VectorXd& a,
                                const Eigen::VectorXd& b,
                                const std::vector<Eigen::Map<const Eigen::VectorXd>>& ab,
                                const std::vector<Eigen::Map<const Eigen::VectorXd>>& ba,
                                Eigen::MatrixXd& v) {
    v.col(0) = a + b;
    v.col(1) = a.cwiseProduct(a) + b.cwiseProduct(b);
    const int d = static_cast<int>(layout.first_col.size());
    for (int i = 0; i < d; ++i) {
        int fc = layout.first_col[static_cast<std::size_t>(i)];
        if (fc >= 0) {
            v.col(fc + 1) = ab[static_cast<std::size_t>(i)] - a;
            v.col(fc) = b.cwiseProduct(v.col(fc + 1));
        }
        int tc = layout.total_col[static_cast<std::size_t>(i)];
        if (tc >= 0) v.col(tc) = (a - ab[static_cast<std::size_t>(i)]).cwiseAbs2();
    }
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            int pc = layout.pair_col[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            if (pc < 0) continue;
            v.col(pc) = ba[static_cast<std::size_t>(i)].cwiseProduct(ab[static_cast<std::size_t>(j)]) -
                        a.cwiseProduct(b);
            v.col(pc + 1) =
                ba[static_cast<std::size_t>(i)] + ab[static_cast<std::size_t>(j)] - a - b;
        }
}

/// Turns aggregated column sums for one replicate into index values.
/// sums holds column totals of V over the replicate's M rows (for the
/// un-resampled estimate, over the original rows). Returns false when the
/// resampled variance is degenerate.
struct ReplicateEstimator {
    const FastPathLayout& layout;
    double m;

    bool evaluate(const Eigen::VectorXd& sums, const std::vector<IndexTarget>& targets,
                  double* out) const {
        double center = sums[0] / (2.0 * m);
        double var = (sums[1] - 2.0 * m * center * center) / (2.0 * m - 1.0);
        double magnitude2 = sums[1] / (2.0 * m);
        if (var <= 1e-14 * std::max(magnitude2, DBL_MIN)) return false;

        auto first = [&](int i) {
            int fc = layout.first_col[static_cast<std::size_t>(i)];
            return (sums[fc] / m - center * (sums[fc + 1] / m)) / var;
        };
        for (std::size_t t = 0; t < targets.size(); ++t) {
            const auto& target = targets[t];
            switch (target.order) {
                case IndexOrder::First:
                    out[t] = first(target.i);
                    break;
                case IndexOrder::Total: {
                    int tc = layout.total_col[static_cast<std::size_t>(target.i)];
                    out[t] = sums[tc] / (2.0 * m) / var;
                    break;
                }
                case IndexOrder::Second: {
                    int pc = layout.pair_col[static_cast<std::size_t>(target.i)]
                                            [static_cast<std::size_t>(target.j)];
                    double closed = (sums[pc] / m - center * (sums[pc + 1] / m)) / var;
                    out[t] = closed - first(target.i) - first(target.j);
                    break;
                }
            }
        }
        return true;
    }
};

}  // namespace detail

/// Index samples for every (realization, bootstrap replicate) cell, from an
/// already sampled realization matrix (one realization per column, rows in
/// the canonical stacked block order). Exposed separately from the GP so the
/// estimator grid can be tested against exact evaluations.
inline std::vector<IndexMatrix> index_matrices_from_realizations(
    const Eigen::MatrixXd& realizations, Eigen::Index m, int d, bool has_ba,
    const std::vector<std::vector<std::uint32_t>>& bootstrap,
    const std::vector<IndexTarget>& targets, unsigned threads = 0) {
    if (targets.empty()) throw std::invalid_argument("index_matrices: no targets");
    const Eigen::Index blocks = 2 + d + (has_ba ? d : 0);
    if (realizations.rows() != blocks * m)
        throw ShapeMismatch("index_matrices: realization rows do not match the design layout");
    for (const auto& t : targets) {
        if (t.i < 0 || t.i >= d || (t.order == IndexOrder::Second && (t.j < 0 || t.j >= d)))
            throw std::invalid_argument("index_matrices: target input out of range");
        if (t.order == IndexOrder::Second && !has_ba)
            throw DesignIncomplete("index_matrices: second-order targets need BA blocks");
    }
    const auto k = realizations.cols();
    const auto b = static_cast<Eigen::Index>(bootstrap.size());
    if (b < 1) throw std::invalid_argument("index_matrices: no bootstrap replicates");
    for (const auto& list : bootstrap)
        if (static_cast<Eigen::Index>(list.size()) != m)
            throw ShapeMismatch("index_matrices: bootstrap list length must be m");

    detail::FastPathLayout layout(d, targets);

    // Multiplicity of each design row in each replicate; one shared matrix
    // turns all per-replicate gather-sums into V^T * counts.
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(m, b);
    for (Eigen::Index rep = 0; rep < b; ++rep)
        for (std::uint32_t row : bootstrap[static_cast<std::size_t>(rep)])
            counts(static_cast<Eigen::Index>(row), rep) += 1.0;

    std::vector<IndexMatrix> out(targets.size());
    for (std::size_t t = 0; t < targets.size(); ++t) {
        out[t].target = targets[t];
        out[t].samples.setConstant(k, b, std::numeric_limits<double>::quiet_NaN());
    }
    // Per-realization un-resampled estimates land in fixed slots and are
    // reduced sequentially afterwards, keeping the result independent of
    // the thread schedule.
    Eigen::MatrixXd point_cells = Eigen::MatrixXd::Constant(
        static_cast<Eigen::Index>(targets.size()), k, std::numeric_limits<double>::quiet_NaN());

    detail::ReplicateEstimator est{layout, static_cast<double>(m)};

    parallel_for(static_cast<std::size_t>(k), threads, [&](std::size_t kk) {
        const auto col = realizations.col(static_cast<Eigen::Index>(kk));
        // Center at the realization's own pooled mean so every per-row
        // product stays O(signal) even when the raw outputs sit far from 0.
        double c0 = (col.segment(0, m).sum() + col.segment(m, m).sum()) / (2.0 * static_cast<double>(m));
        Eigen::VectorXd centered_col = col.array() - c0;

        Eigen::VectorXd a = centered_col.segment(0, m);
        Eigen::VectorXd bvec = centered_col.segment(m, m);
        std::vector<Eigen::Map<const Eigen::VectorXd>> ab, ba;
        ab.reserve(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i)
            ab.emplace_back(centered_col.data() + (2 + i) * m, m);
        if (has_ba)
            for (int i = 0; i < d; ++i)
                ba.emplace_back(centered_col.data() + (2 + d + i) * m, m);

        Eigen::MatrixXd v(m, layout.columns);
        detail::fill_product_matrix(layout, a, bvec, ab, ba, v);

        Eigen::MatrixXd sums = v.transpose() * counts;  // C x B
        std::vector<double> cell(targets.size());
        for (Eigen::Index rep = 0; rep < b; ++rep) {
            if (!est.evaluate(sums.col(rep), targets, cell.data())) continue;
            for (std::size_t t = 0; t < targets.size(); ++t)
                out[t].samples(static_cast<Eigen::Index>(kk), rep) = cell[t];
        }

        // Un-resampled estimate for this realization.
        Eigen::VectorXd identity_sums = v.colwise().sum().transpose();
        if (est.evaluate(identity_sums, targets, cell.data()))
            for (std::size_t t = 0; t < targets.size(); ++t)
                point_cells(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(kk)) = cell[t];
    });

    for (std::size_t t = 0; t < targets.size(); ++t) {
        double sum = 0.0;
        Eigen::Index n = 0;
        for (Eigen::Index kk = 0; kk < k; ++kk) {
            double v = point_cells(static_cast<Eigen::Index>(t), kk);
            if (std::isfinite(v)) {
                sum += v;
                ++n;
            }
        }
        if (n > 0) out[t].point_estimate = sum / static_cast<double>(n);
    }
    return out;
}

struct AnalyzeOptions {
    int n_realizations = 500;
    int n_bootstrap = 300;
    std::uint64_t seed = 0;
    Eigen::Index block = 1024;
    unsigned threads = 0;
    std::vector<IndexTarget> targets;  // empty = default_targets for the design
};

/// Diagnostics of one analysis pass that the report wants alongside the
/// index estimates.
struct AnalysisDiagnostics {
    double jitter_used = 0.0;
    Eigen::Index evaluation_rows = 0;
};

/// Samples metamodel realizations over the design and estimates every
/// target on every (realization, bootstrap replicate) pair. One shared set
/// of bootstrap lists is reused across realizations, which is what lets the
/// column-wise spread isolate metamodel variance and the row-wise spread
/// isolate sampling variance.
inline std::vector<IndexMatrix> compute_index_matrices(const TrainedGP& gp,
                                                       const PickFreezeDesign& design,
                                                       const ParameterSpace& space,
                                                       const AnalyzeOptions& options,
                                                       AnalysisDiagnostics* diag = nullptr) {
    design.validate();
    if (space.dimension() != design.dimension())
        throw ShapeMismatch("compute_index_matrices: design/space dimension mismatch");
    if (gp.dimension() != design.dimension())
        throw ShapeMismatch("compute_index_matrices: GP/design dimension mismatch");
    if (options.n_realizations < 2)
        throw std::invalid_argument("compute_index_matrices: need at least 2 realizations");

    std::vector<IndexTarget> targets =
        options.targets.empty()
            ? default_targets(design.dimension(), design.has_second_order_blocks())
            : options.targets;

    Eigen::MatrixXd unit_rows = space.to_unit(design.stacked_rows());
    RealizationOptions ropts;
    ropts.block = options.block;
    ropts.threads = options.threads;
    RealizationResult real = gp.sample_realizations(unit_rows, options.n_realizations,
                                                    derive_seed(options.seed, 0x9e11), ropts);
    if (diag) {
        diag->jitter_used = real.jitter_used;
        diag->evaluation_rows = unit_rows.rows();
    }

    auto lists = bootstrap_indices(design.sample_count(), options.n_bootstrap,
                                   derive_seed(options.seed, 0xb007));
    return index_matrices_from_realizations(real.values, design.sample_count(),
                                            design.dimension(),
                                            design.has_second_order_blocks(), lists, targets,
                                            options.threads);
}

/// Index samples from the predictive mean alone: one pseudo-realization,
/// bootstrap replicates across columns. Cheap, but blind to metamodel
/// uncertainty; estimates carry a mean_only flag through to the report.
inline std::vector<IndexMatrix> mean_only_index_matrices(const TrainedGP& gp,
                                                         const PickFreezeDesign& design,
                                                         const ParameterSpace& space,
                                                         const std::vector<IndexTarget>& targets,
                                                         int n_bootstrap, std::uint64_t seed,
                                                         unsigned threads = 0) {
    design.validate();
    Eigen::MatrixXd unit_rows = space.to_unit(design.stacked_rows());
    Eigen::VectorXd mean = gp.predict_mean(unit_rows);
    auto lists = bootstrap_indices(design.sample_count(), n_bootstrap, derive_seed(seed, 0xb007));
    Eigen::MatrixXd realizations = mean;  // P x 1
    return index_matrices_from_realizations(realizations, design.sample_count(),
                                            design.dimension(),
                                            design.has_second_order_blocks(), lists, targets,
                                            threads);
}

/// Final estimate of one index with its variance split.
struct SobolEstimate {
    IndexTarget target;
    double mean = std::numeric_limits<double>::quiet_NaN();
    double var_metamodel = 0.0;  // spread across realizations, averaged over replicates
    double var_sampling = 0.0;   // spread across replicates, averaged over realizations
    double var_total = 0.0;      // sum of the two
    double var_pooled = 0.0;     // variance over all cells, diagnostic
    double ci95_metamodel = 0.0;
    double ci95_total = 0.0;
    double percentile_lo = std::numeric_limits<double>::quiet_NaN();
    double percentile_hi = std::numeric_limits<double>::quiet_NaN();
    Eigen::Index missing_cells = 0;
    bool mean_only = false;
    bool outside_unit_range = false;
};

/// Two-way decomposition of an index-sample matrix.
///
/// Rows of `samples` share one realization, columns share one bootstrap
/// replicate. The realization-induced variance is the across-row variance
/// within a column, averaged over columns; the sampling variance is the
/// across-column variance within a row, averaged over rows; the reported
/// total is their sum. A single-row matrix (mean-only path) has no
/// realization spread: its mean falls back to the un-resampled point
/// estimate and only the sampling variance is populated.
inline SobolEstimate decompose(const IndexMatrix& matrix) {
    const auto& s = matrix.samples;
    if (s.rows() < 1 || s.cols() < 2)
        throw ShapeMismatch("decompose: need at least 1 realization and 2 replicates");

    SobolEstimate est;
    est.target = matrix.target;
    est.mean_only = s.rows() == 1;

    double total_sum = 0.0;
    Eigen::Index total_count = 0;
    std::vector<double> finite;
    finite.reserve(static_cast<std::size_t>(s.size()));
    for (Eigen::Index c = 0; c < s.cols(); ++c)
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
            double v = s(r, c);
            if (std::isfinite(v)) {
                total_sum += v;
                ++total_count;
                finite.push_back(v);
            } else {
                ++est.missing_cells;
            }
        }
    if (total_count == 0) throw DegenerateVariance("decompose: every cell is missing");
    est.mean = total_sum / static_cast<double>(total_count);

    auto column_variance = [&](Eigen::Index c) -> std::pair<double, bool> {
        double sum = 0.0, sum2 = 0.0;
        Eigen::Index n = 0;
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
            double v = s(r, c);
            if (!std::isfinite(v)) continue;
            sum += v;
            sum2 += v * v;
            ++n;
        }
        if (n < 2) return {0.0, false};
        double mean = sum / static_cast<double>(n);
        double var = (sum2 - static_cast<double>(n) * mean * mean) / static_cast<double>(n - 1);
        return {std::max(0.0, var), true};
    };
    auto row_variance = [&](Eigen::Index r) -> std::pair<double, bool> {
        double sum = 0.0, sum2 = 0.0;
        Eigen::Index n = 0;
        for (Eigen::Index c = 0; c < s.cols(); ++c) {
            double v = s(r, c);
            if (!std::isfinite(v)) continue;
            sum += v;
            sum2 += v * v;
            ++n;
        }
        if (n < 2) return {0.0, false};
        double mean = sum / static_cast<double>(n);
        double var = (sum2 - static_cast<double>(n) * mean * mean) / static_cast<double>(n - 1);
        return {std::max(0.0, var), true};
    };

    if (!est.mean_only) {
        double acc = 0.0;
        Eigen::Index used = 0;
        for (Eigen::Index c = 0; c < s.cols(); ++c) {
            auto [v, ok] = column_variance(c);
            if (ok) {
                acc += v;
                ++used;
            }
        }
        est.var_metamodel = used > 0 ? acc / static_cast<double>(used) : 0.0;
    }
    {
        double acc = 0.0;
        Eigen::Index used = 0;
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
            auto [v, ok] = row_variance(r);
            if (ok) {
                acc += v;
                ++used;
            }
        }
        est.var_sampling = used > 0 ? acc / static_cast<double>(used) : 0.0;
    }
    est.var_total = est.var_metamodel + est.var_sampling;

    if (total_count >= 2) {
        double mean = est.mean;
        double ss = 0.0;
        for (double v : finite) ss += (v - mean) * (v - mean);
        est.var_pooled = ss / static_cast<double>(total_count - 1);
    }

    est.ci95_metamodel = 1.959963984540054 * std::sqrt(est.var_metamodel);
    est.ci95_total = 1.959963984540054 * std::sqrt(est.var_total);

    std::sort(finite.begin(), finite.end());
    auto quantile = [&](double p) {
        if (finite.size() == 1) return finite.front();
        double h = p * static_cast<double>(finite.size() - 1);
        auto lo = static_cast<std::size_t>(h);
        if (lo + 1 >= finite.size()) return finite.back();
        return finite[lo] + (h - static_cast<double>(lo)) * (finite[lo + 1] - finite[lo]);
    };
    est.percentile_lo = quantile(0.025);
    est.percentile_hi = quantile(0.975);

    if (est.mean_only && std::isfinite(matrix.point_estimate)) est.mean = matrix.point_estimate;
    est.outside_unit_range = est.mean < 0.0 || est.mean > 1.0;
    return est;
}

}  // namespace gpsens
