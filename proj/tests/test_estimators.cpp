#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "gpsens/bench.hpp"
#include "gpsens/estimators.hpp"
#include "gpsens/rng.hpp"
#include "gpsens/space.hpp"
#include "oracles.hpp"

using namespace gpsens;

namespace {

DesignEvaluations evaluate_design(const BenchmarkFn& fn, const PickFreezeDesign& d) {
    DesignEvaluations e;
    e.a = fn.evaluate_rows(d.a);
    e.b = fn.evaluate_rows(d.b);
    e.ab.reserve(d.ab.size());
    for (const auto& block : d.ab) e.ab.push_back(fn.evaluate_rows(block));
    if (d.ba) {
        std::vector<Eigen::VectorXd> ba;
        ba.reserve(d.ba->size());
        for (const auto& block : *d.ba) ba.push_back(fn.evaluate_rows(block));
        e.ba = std::move(ba);
    }
    return e;
}

DesignEvaluations random_evals(Eigen::Index m, int d, bool with_ba, std::uint64_t seed) {
    Rng rng(seed);
    auto draw = [&] {
        Eigen::VectorXd v(m);
        for (Eigen::Index i = 0; i < m; ++i) v[i] = rng.normal() + 0.3;
        return v;
    };
    DesignEvaluations e;
    e.a = draw();
    e.b = draw();
    for (int i = 0; i < d; ++i) e.ab.push_back(draw());
    if (with_ba) {
        std::vector<Eigen::VectorXd> ba;
        for (int i = 0; i < d; ++i) ba.push_back(draw());
        e.ba = std::move(ba);
    }
    return e;
}

DesignEvaluations affine(const DesignEvaluations& e, double scale, double shift) {
    DesignEvaluations out = e;
    out.a = scale * e.a.array() + shift;
    out.b = scale * e.b.array() + shift;
    for (auto& v : out.ab) v = scale * v.array() + shift;
    if (out.ba)
        for (auto& v : *out.ba) v = scale * v.array() + shift;
    out.centered = false;
    out.center = 0.0;
    return out;
}

}  // namespace

TEST_CASE("estimators agree with plain-loop implementations") {
    DesignEvaluations e = centered(random_evals(64, 3, true, 11));
    for (int i = 0; i < 3; ++i) {
        REQUIRE(first_order(e, i) == Catch::Approx(oracle::loop_first(e, i)).margin(1e-12));
        REQUIRE(total_order(e, i) == Catch::Approx(oracle::loop_total(e, i)).margin(1e-12));
        for (int j = 0; j < 3; ++j)
            if (i != j)
                REQUIRE(second_order(e, i, j) ==
                        Catch::Approx(oracle::loop_second(e, i, j)).margin(1e-12));
    }
    REQUIRE(pooled_variance(e) ==
            Catch::Approx(oracle::variance(
                              (Eigen::VectorXd(128) << e.a, e.b).finished()))
                .epsilon(1e-12));
}

TEST_CASE("recovers the exact decomposition of a mixed nonlinear function") {
    BenchmarkFn fn = BenchmarkFn::ishigami();
    AnalyticIndices truth = fn.analytic_indices();
    DesignEvaluations e = centered(evaluate_design(fn, build_design(fn.space(), 1 << 14, true)));

    REQUIRE(pooled_variance(e) == Catch::Approx(truth.variance).epsilon(0.02));
    for (int i = 0; i < 3; ++i) {
        REQUIRE(first_order(e, i) == Catch::Approx(truth.first[i]).margin(0.02));
        REQUIRE(total_order(e, i) == Catch::Approx(truth.total[i]).margin(0.02));
    }
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j)
            REQUIRE(second_order(e, i, j) == Catch::Approx(truth.second(i, j)).margin(0.03));

    // The x1-x3 interaction is the only one, and it is strongly detected.
    REQUIRE(second_order(e, 0, 2) > 0.2);
}

TEST_CASE("recovers a pure product function with interactions at every order") {
    Eigen::VectorXd a(6);
    a << 0.0, 0.5, 3.0, 9.0, 99.0, 99.0;
    BenchmarkFn fn = BenchmarkFn::gfunction(a);
    AnalyticIndices truth = fn.analytic_indices();
    DesignEvaluations e = centered(evaluate_design(fn, build_design(fn.space(), 1 << 14, false)));

    for (int i = 0; i < 6; ++i) {
        REQUIRE(first_order(e, i) == Catch::Approx(truth.first[i]).margin(0.03));
        REQUIRE(total_order(e, i) == Catch::Approx(truth.total[i]).margin(0.03));
        REQUIRE(total_order(e, i) >= first_order(e, i) - 5e-3);
    }
}

TEST_CASE("additive function: first equals total and shares sum to one") {
    Eigen::VectorXd w(4);
    w << 4.0, 3.0, 2.0, 1.0;
    BenchmarkFn fn = BenchmarkFn::linear(w, -2.0);
    AnalyticIndices truth = fn.analytic_indices();
    DesignEvaluations e = centered(evaluate_design(fn, build_design(fn.space(), 1 << 14, true)));

    double sum = 0.0;
    for (int i = 0; i < 4; ++i) {
        double si = first_order(e, i);
        REQUIRE(si == Catch::Approx(truth.first[i]).margin(5e-3));
        REQUIRE(total_order(e, i) == Catch::Approx(si).margin(5e-3));
        sum += si;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(0.01));
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j)
            REQUIRE(second_order(e, i, j) == Catch::Approx(0.0).margin(0.02));
}

TEST_CASE("indices are invariant under affine output transforms") {
    DesignEvaluations base = random_evals(256, 2, true, 29);
    DesignEvaluations e = centered(base);
    DesignEvaluations t = centered(affine(base, -5.0, 117.0));
    for (int i = 0; i < 2; ++i) {
        REQUIRE(first_order(t, i) == Catch::Approx(first_order(e, i)).margin(1e-10));
        REQUIRE(total_order(t, i) == Catch::Approx(total_order(e, i)).margin(1e-10));
    }
    REQUIRE(second_order(t, 0, 1) == Catch::Approx(second_order(e, 0, 1)).margin(1e-10));
    // Total order is a squared difference, so it needs no centering at all.
    DesignEvaluations raw = affine(base, -5.0, 117.0);
    REQUIRE(total_order(raw, 1) == Catch::Approx(total_order(e, 1)).margin(1e-10));
}

TEST_CASE("total-order estimates are never negative") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
        DesignEvaluations e = centered(random_evals(32, 4, false, seed));
        for (int i = 0; i < 4; ++i) REQUIRE(total_order(e, i) >= 0.0);
    }
}

TEST_CASE("estimator preconditions are enforced") {
    DesignEvaluations raw = random_evals(16, 2, false, 3);
    REQUIRE_THROWS_AS(first_order(raw, 0), std::invalid_argument);
    DesignEvaluations e = centered(raw);
    REQUIRE_THROWS_AS(first_order(e, -1), std::invalid_argument);
    REQUIRE_THROWS_AS(first_order(e, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(total_order(e, 5), std::invalid_argument);
    REQUIRE_THROWS_AS(second_order(e, 0, 1), DesignIncomplete);

    DesignEvaluations full = random_evals(16, 3, true, 4);
    REQUIRE_THROWS_AS(second_order(full, 0, 1), std::invalid_argument);  // not centered
    DesignEvaluations cf = centered(full);
    REQUIRE_THROWS_AS(second_order(cf, 1, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(second_order(cf, 0, 3), std::invalid_argument);
}

TEST_CASE("evaluation container validates block shapes") {
    DesignEvaluations e = random_evals(8, 2, true, 9);
    REQUIRE_NOTHROW(e.validate());

    DesignEvaluations bad = e;
    bad.b = Eigen::VectorXd::Zero(7);
    REQUIRE_THROWS_AS(bad.validate(), ShapeMismatch);
    bad = e;
    bad.ab[1] = Eigen::VectorXd::Zero(9);
    REQUIRE_THROWS_AS(bad.validate(), ShapeMismatch);
    bad = e;
    bad.ba->pop_back();
    REQUIRE_THROWS_AS(bad.validate(), ShapeMismatch);
    bad = e;
    bad.ab.clear();
    REQUIRE_THROWS_AS(bad.validate(), ShapeMismatch);
    bad = e;
    bad.a = bad.b = Eigen::VectorXd::Zero(1);
    REQUIRE_THROWS_AS(bad.validate(), ShapeMismatch);
}

TEST_CASE("stacked values split into blocks in canonical order") {
    Eigen::Index m = 5;
    int d = 3;
    Eigen::Index blocks = 2 + 2 * d;
    Eigen::VectorXd stacked(blocks * m);
    for (Eigen::Index i = 0; i < stacked.size(); ++i)
        stacked[i] = 100.0 * static_cast<double>(i / m) + static_cast<double>(i % m);

    DesignEvaluations e = DesignEvaluations::from_stacked(stacked, m, d, true);
    REQUIRE(e.a[3] == 3.0);
    REQUIRE(e.b[0] == 100.0);
    REQUIRE(e.ab[0][2] == 202.0);
    REQUIRE(e.ab[2][4] == 404.0);
    REQUIRE((*e.ba)[0][1] == 501.0);
    REQUIRE((*e.ba)[2][4] == 704.0);
    REQUIRE_FALSE(e.centered);

    DesignEvaluations no_ba = DesignEvaluations::from_stacked(stacked.head((2 + d) * m), m, d,
                                                              false);
    REQUIRE_FALSE(no_ba.has_second_order_blocks());
    REQUIRE(no_ba.ab[2][4] == 404.0);

    REQUIRE_THROWS_AS(DesignEvaluations::from_stacked(stacked, m, d, false), ShapeMismatch);
    REQUIRE_THROWS_AS(DesignEvaluations::from_stacked(stacked.head(10), m, d, true),
                      ShapeMismatch);
}

TEST_CASE("degenerate output variance is refused, even after centering") {
    DesignEvaluations e = random_evals(32, 2, false, 17);
    e.a.setConstant(1e8);
    e.b.setConstant(1e8);
    REQUIRE_THROWS_AS(pooled_variance(e), DegenerateVariance);

    // Centering shifts the constant to zero but records it, so the variance
    // is still judged against the original magnitude.
    DesignEvaluations c = centered(e);
    REQUIRE(c.a.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(c.center == 1e8);
    REQUIRE_THROWS_AS(pooled_variance(c), DegenerateVariance);

    // Noise at the roundoff floor of that magnitude is still degenerate...
    DesignEvaluations tiny = e;
    Rng rng(5);
    for (Eigen::Index i = 0; i < 32; ++i) tiny.a[i] += 1e-4 * rng.normal();
    REQUIRE_THROWS_AS(pooled_variance(tiny), DegenerateVariance);
    // ...but genuinely small variance on small outputs is fine.
    DesignEvaluations small = random_evals(32, 2, false, 18);
    small.a *= 1e-6;
    small.b *= 1e-6;
    REQUIRE(pooled_variance(small) > 0.0);
}

TEST_CASE("estimates tighten as the sample count grows") {
    BenchmarkFn fn = BenchmarkFn::ishigami();
    AnalyticIndices truth = fn.analytic_indices();
    auto worst_error = [&](Eigen::Index m) {
        DesignEvaluations e = centered(evaluate_design(fn, build_design(fn.space(), m, false)));
        double err = 0.0;
        for (int i = 0; i < 3; ++i) {
            err = std::max(err, std::abs(first_order(e, i) - truth.first[i]));
            err = std::max(err, std::abs(total_order(e, i) - truth.total[i]));
        }
        return err;
    };
    double coarse = worst_error(1 << 8);
    double fine = worst_error(1 << 14);
    REQUIRE(fine < coarse);
    REQUIRE(fine < 0.02);
}

TEST_CASE("bootstrap resampling permutes rows jointly") {
    DesignEvaluations e = centered(random_evals(8, 2, true, 23));
    std::vector<std::uint32_t> identity{0, 1, 2, 3, 4, 5, 6, 7};
    DesignEvaluations same = resampled(e, identity);
    REQUIRE((same.a - e.a).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE_FALSE(same.centered);  // resampling invalidates the centering
    REQUIRE(same.center == e.center);

    std::vector<std::uint32_t> rows{7, 7, 0, 1, 2, 3, 3, 5};
    DesignEvaluations r = resampled(e, rows);
    for (Eigen::Index i = 0; i < 8; ++i) {
        REQUIRE(r.a[i] == e.a[rows[static_cast<std::size_t>(i)]]);
        REQUIRE(r.ab[1][i] == e.ab[1][rows[static_cast<std::size_t>(i)]]);
        REQUIRE((*r.ba)[0][i] == (*e.ba)[0][rows[static_cast<std::size_t>(i)]]);
    }

    REQUIRE_THROWS_AS(resampled(e, std::vector<std::uint32_t>{0, 1, 2}), ShapeMismatch);
}
