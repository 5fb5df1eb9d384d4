#pragma once

#include <Eigen/Core>
#include <cfloat>
#include <cstdint>
#include <optional>
#include <vector>

#include "gpsens/errors.hpp"

namespace gpsens {

/// Model outputs over the blocks of a pick-freeze design, in the canonical
/// block order A, B, AB_1..AB_D (, BA_1..BA_D). `center` remembers the total
/// shift applied by centered(), so degeneracy checks can still compare the
/// variance against the original output magnitude after centering.
struct DesignEvaluations {
    Eigen::VectorXd a;
    Eigen::VectorXd b;
    std::vector<Eigen::VectorXd> ab;
    std::optional<std::vector<Eigen::VectorXd>> ba;
    bool centered = false;
    double center = 0.0;

    Eigen::Index sample_count() const { return a.size(); }
    int dimension() const { return static_cast<int>(ab.size()); }
    bool has_second_order_blocks() const { return ba.has_value(); }

    void validate() const {
        Eigen::Index m = a.size();
        if (m < 2) throw ShapeMismatch("DesignEvaluations: need at least 2 samples");
        if (b.size() != m) throw ShapeMismatch("DesignEvaluations: A/B length mismatch");
        if (ab.empty()) throw ShapeMismatch("DesignEvaluations: no AB blocks");
        for (const auto& v : ab)
            if (v.size() != m) throw ShapeMismatch("DesignEvaluations: AB block length");
        if (ba) {
            if (ba->size() != ab.size())
                throw ShapeMismatch("DesignEvaluations: BA/AB block count mismatch");
            for (const auto& v : *ba)
                if (v.size() != m) throw ShapeMismatch("DesignEvaluations: BA block length");
        }
    }

    /// Splits a stacked value vector laid out like PickFreezeDesign::stacked_rows.
    static DesignEvaluations from_stacked(const Eigen::VectorXd& values, Eigen::Index m, int d,
                                          bool has_ba) {
        Eigen::Index blocks = 2 + d + (has_ba ? d : 0);
        if (values.size() != blocks * m)
            throw ShapeMismatch("DesignEvaluations: stacked length does not match m*(blocks)");
        DesignEvaluations e;
        e.a = values.segment(0, m);
        e.b = values.segment(m, m);
        e.ab.reserve(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) e.ab.push_back(values.segment((2 + i) * m, m));
        if (has_ba) {
            std::vector<Eigen::VectorXd> ba;
            ba.reserve(static_cast<std::size_t>(d));
            for (int i = 0; i < d; ++i) ba.push_back(values.segment((2 + d + i) * m, m));
            e.ba = std::move(ba);
        }
        e.validate();
        return e;
    }
};

/// Returns a copy shifted so mean(concat(A, B)) = 0. Every block is shifted
/// by the same constant; only the A and B blocks define it. The shift
/// accumulates into `center`.
inline DesignEvaluations centered(const DesignEvaluations& e) {
    e.validate();
    double c = (e.a.sum() + e.b.sum()) / static_cast<double>(2 * e.sample_count());
    DesignEvaluations out = e;
    out.a.array() -= c;
    out.b.array() -= c;
    for (auto& v : out.ab) v.array() -= c;
    if (out.ba)
        for (auto& v : *out.ba) v.array() -= c;
    out.centered = true;
    out.center = e.center + c;
    return out;
}

/// Joint bootstrap resample: row m of every block is replaced by row
/// rows[m]. The result is no longer centered (the resampled mean moved), so
/// callers re-center before estimating.
inline DesignEvaluations resampled(const DesignEvaluations& e,
                                   const std::vector<std::uint32_t>& rows) {
    e.validate();
    if (static_cast<Eigen::Index>(rows.size()) != e.sample_count())
        throw ShapeMismatch("resampled: index list length must equal sample count");
    DesignEvaluations out;
    Eigen::Index m = e.sample_count();
    auto gather = [&](const Eigen::VectorXd& src) {
        Eigen::VectorXd dst(m);
        for (Eigen::Index i = 0; i < m; ++i) dst[i] = src[rows[static_cast<std::size_t>(i)]];
        return dst;
    };
    out.a = gather(e.a);
    out.b = gather(e.b);
    out.ab.reserve(e.ab.size());
    for (const auto& v : e.ab) out.ab.push_back(gather(v));
    if (e.ba) {
        std::vector<Eigen::VectorXd> ba;
        ba.reserve(e.ba->size());
        for (const auto& v : *e.ba) ba.push_back(gather(v));
        out.ba = std::move(ba);
    }
    out.centered = false;
    out.center = e.center;
    return out;
}

/// Unbiased sample variance of concat(A, B), the denominator every index
/// shares. Throws DegenerateVariance when the variance is zero or
/// indistinguishable from roundoff at the output's magnitude (the stored
/// `center` counts toward that magnitude, so centering does not mask a
/// constant model).
inline double pooled_variance(const DesignEvaluations& e) {
    e.validate();
    Eigen::Index n = 2 * e.sample_count();
    double mean = (e.a.sum() + e.b.sum()) / static_cast<double>(n);
    double ss = (e.a.array() - mean).square().sum() + (e.b.array() - mean).square().sum();
    double var = ss / static_cast<double>(n - 1);
    double magnitude2 = (e.a.squaredNorm() + e.b.squaredNorm()) / static_cast<double>(n) +
                        e.center * e.center;
    if (var <= 1e-14 * std::max(magnitude2, DBL_MIN))
        throw DegenerateVariance("pooled_variance: output variance is numerically zero");
    return var;
}

/// First-order index of input i:
///   (1/M) sum_m B_m (AB_i,m - A_m)  /  pooled variance.
/// Requires centered evaluations; the numerator estimates a covariance and
/// picks up O(mean^2) bias otherwise.
inline double first_order(const DesignEvaluations& e, int i) {
    e.validate();
    if (!e.centered) throw std::invalid_argument("first_order: evaluations must be centered");
    if (i < 0 || i >= e.dimension()) throw std::invalid_argument("first_order: bad input index");
    double v = pooled_variance(e);
    const Eigen::VectorXd& abi = e.ab[static_cast<std::size_t>(i)];
    double num = e.b.dot(abi - e.a) / static_cast<double>(e.sample_count());
    return num / v;
}

/// Total-order index of input i:
///   (1/2M) sum_m (A_m - AB_i,m)^2  /  pooled variance.
/// The numerator is a squared difference, so centering is irrelevant; it is
/// accepted in either state. Always non-negative.
inline double total_order(const DesignEvaluations& e, int i) {
    e.validate();
    if (i < 0 || i >= e.dimension()) throw std::invalid_argument("total_order: bad input index");
    double v = pooled_variance(e);
    const Eigen::VectorXd& abi = e.ab[static_cast<std::size_t>(i)];
    double num = (e.a - abi).squaredNorm() / static_cast<double>(2 * e.sample_count());
    return num / v;
}

/// Second-order interaction index of inputs i and j:
///   [ (1/M) sum_m (BA_i,m AB_j,m - A_m B_m) ] / pooled variance
///   - first_order(i) - first_order(j).
/// The first term estimates the closed index of the pair {i, j}; the product
/// A_m B_m removes the squared-mean residual left even after centering.
/// Requires the BA blocks and centered evaluations.
inline double second_order(const DesignEvaluations& e, int i, int j) {
    e.validate();
    if (!e.centered) throw std::invalid_argument("second_order: evaluations must be centered");
    if (!e.ba) throw DesignIncomplete("second_order: design was built without BA blocks");
    if (i < 0 || j < 0 || i >= e.dimension() || j >= e.dimension() || i == j)
        throw std::invalid_argument("second_order: need two distinct input indices");
    double v = pooled_variance(e);
    const Eigen::VectorXd& bai = (*e.ba)[static_cast<std::size_t>(i)];
    const Eigen::VectorXd& abj = e.ab[static_cast<std::size_t>(j)];
    double num = (bai.cwiseProduct(abj).sum() - e.a.dot(e.b)) /
                 static_cast<double>(e.sample_count());
    return num / v - first_order(e, i) - first_order(e, j);
}

}  // namespace gpsens
