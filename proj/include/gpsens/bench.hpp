#pragma once

#include <Eigen/Core>
#include <cfloat>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gpsens/detail/util.hpp"
#include "gpsens/errors.hpp"
#include "gpsens/space.hpp"

namespace gpsens {

/// Exact variance shares of a benchmark, for validating estimates.
struct AnalyticIndices {
    Eigen::VectorXd first;
    Eigen::VectorXd total;
    Eigen::MatrixXd second;  // symmetric, zero diagonal
    double variance = 0.0;
};

/// Closed-form test functions with known Sobol indices.
///
///   ishigami   sin(x1) + a sin^2(x2) + b x3^4 sin(x1) on [-pi, pi]^3
///   gfunction  prod_i (|4 x_i - 2| + a_i) / (1 + a_i) on [0, 1]^d
///   linear     c + sum_i w_i x_i on [0, 1]^d
///
/// The Ishigami function mixes a pure x2 effect with an x1-x3 interaction;
/// the g-function is a pure product with every interaction order present;
/// the linear function is purely additive. Together they cover the cases a
/// variance decomposition has to get right.
class BenchmarkFn {
public:
    enum class Kind { Ishigami, GFunction, LinearAdditive };

    static BenchmarkFn ishigami(double a = 7.0, double b = 0.1) {
        BenchmarkFn f;
        f.kind_ = Kind::Ishigami;
        f.a_ = Eigen::Vector2d(a, b);
        f.dim_ = 3;
        return f;
    }

    static BenchmarkFn gfunction(Eigen::VectorXd a) {
        for (Eigen::Index i = 0; i < a.size(); ++i)
            if (!(a[i] >= 0.0) || !std::isfinite(a[i]))
                throw ConfigError("gfunction: coefficients must be finite and >= 0");
        if (a.size() < 1) throw ConfigError("gfunction: need at least one coefficient");
        BenchmarkFn f;
        f.kind_ = Kind::GFunction;
        f.dim_ = static_cast<int>(a.size());
        f.a_ = std::move(a);
        return f;
    }

    static BenchmarkFn linear(Eigen::VectorXd w, double intercept = 0.0) {
        if (w.size() < 1) throw ConfigError("linear: need at least one weight");
        if (!w.allFinite()) throw ConfigError("linear: weights must be finite");
        BenchmarkFn f;
        f.kind_ = Kind::LinearAdditive;
        f.dim_ = static_cast<int>(w.size());
        f.a_ = std::move(w);
        f.intercept_ = intercept;
        return f;
    }

    /// Parses a "builtin:<name>?key=value&..." selector. `dimension` is the
    /// parameter count of the run configuration; names with per-input
    /// coefficient lists must match it, and defaults are generated at that
    /// length.
    static BenchmarkFn parse(const std::string& selector, int dimension) {
        std::string body = selector;
        if (detail::starts_with(body, "builtin:")) body = body.substr(8);
        std::string name = body;
        std::map<std::string, std::string> query;
        auto qpos = body.find('?');
        if (qpos != std::string::npos) {
            name = body.substr(0, qpos);
            for (const auto& kv : detail::split(body.substr(qpos + 1), '&')) {
                auto eq = kv.find('=');
                if (eq == std::string::npos)
                    throw ConfigError("builtin selector: malformed query '" + kv + "'");
                query[detail::trim(kv.substr(0, eq))] = detail::trim(kv.substr(eq + 1));
            }
        }
        name = detail::to_lower(detail::trim(name));

        auto scalar = [&](const std::string& key, double fallback) {
            auto it = query.find(key);
            if (it == query.end()) return fallback;
            double v = 0.0;
            if (!detail::parse_double(it->second, v))
                throw ConfigError("builtin selector: bad number for '" + key + "'");
            query.erase(it);
            return v;
        };
        auto vector = [&](const std::string& key, const Eigen::VectorXd& fallback) {
            auto it = query.find(key);
            if (it == query.end()) return fallback;
            auto parts = detail::split(it->second, ',');
            Eigen::VectorXd v(static_cast<Eigen::Index>(parts.size()));
            for (std::size_t i = 0; i < parts.size(); ++i) {
                double x = 0.0;
                if (!detail::parse_double(parts[i], x))
                    throw ConfigError("builtin selector: bad list entry for '" + key + "'");
                v[static_cast<Eigen::Index>(i)] = x;
            }
            query.erase(it);
            return v;
        };

        BenchmarkFn f;
        if (name == "ishigami") {
            if (dimension != 3) throw ConfigError("ishigami needs exactly 3 parameters");
            f = ishigami(scalar("a", 7.0), scalar("b", 0.1));
        } else if (name == "gfunction") {
            Eigen::VectorXd def(dimension);
            for (int i = 0; i < dimension; ++i) def[i] = static_cast<double>(i);
            Eigen::VectorXd a = vector("a", def);
            if (a.size() != dimension)
                throw ConfigError("gfunction: coefficient list length must match parameter count");
            f = gfunction(std::move(a));
        } else if (name == "linear") {
            Eigen::VectorXd def(dimension);
            for (int i = 0; i < dimension; ++i) def[i] = 1.0 / static_cast<double>(i + 1);
            Eigen::VectorXd w = vector("w", def);
            if (w.size() != dimension)
                throw ConfigError("linear: weight list length must match parameter count");
            f = linear(std::move(w), scalar("c", 0.0));
        } else {
            throw ConfigError("unknown builtin model '" + name + "'");
        }
        if (!query.empty())
            throw ConfigError("builtin selector: unknown key '" + query.begin()->first + "'");
        return f;
    }

    Kind kind() const { return kind_; }
    int dimension() const { return dim_; }

    /// Canonical selector string; same parameters give the same string.
    std::string selector() const {
        switch (kind_) {
            case Kind::Ishigami:
                return "builtin:ishigami?a=" + detail::format_double(a_[0]) +
                       "&b=" + detail::format_double(a_[1]);
            case Kind::GFunction: {
                std::string s = "builtin:gfunction?a=";
                for (Eigen::Index i = 0; i < a_.size(); ++i)
                    s += (i ? "," : "") + detail::format_double(a_[i]);
                return s;
            }
            default: {
                std::string s = "builtin:linear?w=";
                for (Eigen::Index i = 0; i < a_.size(); ++i)
                    s += (i ? "," : "") + detail::format_double(a_[i]);
                return s + "&c=" + detail::format_double(intercept_);
            }
        }
    }

    /// Native domain of the function.
    ParameterSpace space() const {
        std::vector<Parameter> params;
        for (int i = 0; i < dim_; ++i) {
            double lo = kind_ == Kind::Ishigami ? -M_PI : 0.0;
            double hi = kind_ == Kind::Ishigami ? M_PI : 1.0;
            params.push_back({"x" + std::to_string(i + 1), lo, hi});
        }
        return ParameterSpace(params);
    }

    /// Evaluates at a physical point of the native domain.
    double operator()(const Eigen::VectorXd& x) const {
        if (x.size() != dim_) throw ShapeMismatch("benchmark: wrong point dimension");
        if (!x.allFinite()) throw NumericalDomain("benchmark: non-finite input");
        if (!space().contains(x, 1e-12))
            throw DomainError("benchmark: point outside the native domain");
        switch (kind_) {
            case Kind::Ishigami: {
                double s1 = std::sin(x[0]);
                return s1 + a_[0] * std::sin(x[1]) * std::sin(x[1]) +
                       a_[1] * x[2] * x[2] * x[2] * x[2] * s1;
            }
            case Kind::GFunction: {
                double p = 1.0;
                for (int i = 0; i < dim_; ++i)
                    p *= (std::abs(4.0 * x[i] - 2.0) + a_[i]) / (1.0 + a_[i]);
                return p;
            }
            default:
                return intercept_ + a_.dot(x);
        }
    }

    Eigen::VectorXd evaluate_rows(const Eigen::MatrixXd& rows) const {
        Eigen::VectorXd out(rows.rows());
        for (Eigen::Index r = 0; r < rows.rows(); ++r) out[r] = (*this)(rows.row(r).transpose());
        return out;
    }

    /// Exact indices. Throws DegenerateVariance when the function has no
    /// output variance to normalize by (e.g. all-zero weights).
    AnalyticIndices analytic_indices() const {
        AnalyticIndices out;
        out.first.setZero(dim_);
        out.total.setZero(dim_);
        out.second.setZero(dim_, dim_);
        switch (kind_) {
            case Kind::Ishigami: {
                double a = a_[0], b = a_[1];
                double pi4 = M_PI * M_PI * M_PI * M_PI;
                double pi8 = pi4 * pi4;
                double v1 = 0.5 * (1.0 + b * pi4 / 5.0) * (1.0 + b * pi4 / 5.0);
                double v2 = a * a / 8.0;
                double v13 = 8.0 * b * b * pi8 / 225.0;
                double v = v1 + v2 + v13;
                out.variance = v;
                out.first << v1 / v, v2 / v, 0.0;
                out.total << (v1 + v13) / v, v2 / v, v13 / v;
                out.second(0, 2) = out.second(2, 0) = v13 / v;
                break;
            }
            case Kind::GFunction: {
                Eigen::VectorXd vi(dim_);
                for (int i = 0; i < dim_; ++i)
                    vi[i] = (1.0 / 3.0) / ((1.0 + a_[i]) * (1.0 + a_[i]));
                double prod = 1.0;
                for (int i = 0; i < dim_; ++i) prod *= 1.0 + vi[i];
                double v = prod - 1.0;
                out.variance = v;
                for (int i = 0; i < dim_; ++i) {
                    out.first[i] = vi[i] / v;
                    out.total[i] = vi[i] * (prod / (1.0 + vi[i])) / v;
                    for (int j = i + 1; j < dim_; ++j)
                        out.second(i, j) = out.second(j, i) = vi[i] * vi[j] / v;
                }
                break;
            }
            default: {
                Eigen::VectorXd vi = a_.array().square() / 12.0;
                double v = vi.sum();
                if (v <= 0.0)
                    throw DegenerateVariance("linear benchmark: zero output variance");
                out.variance = v;
                out.first = vi / v;
                out.total = vi / v;
                break;
            }
        }
        return out;
    }

private:
    BenchmarkFn() = default;

    Kind kind_ = Kind::LinearAdditive;
    int dim_ = 0;
    Eigen::VectorXd a_;  // ishigami: (a, b); gfunction: a_i; linear: w_i
    double intercept_ = 0.0;
};

inline bool is_builtin_selector(const std::string& selector) {
    return detail::starts_with(detail::trim(selector), "builtin:");
}

/// Predictivity coefficient: 1 - sum (pred - obs)^2 / sum (obs - mean)^2.
/// Equals 1 for a perfect surrogate, 0 for one no better than the observed
/// mean. Requires the observations to carry real variance.
inline double predictivity(const Eigen::VectorXd& predicted, const Eigen::VectorXd& observed) {
    if (predicted.size() != observed.size() || observed.size() < 2)
        throw ShapeMismatch("predictivity: need two same-length vectors, size >= 2");
    if (!predicted.allFinite() || !observed.allFinite())
        throw NumericalDomain("predictivity: non-finite values");
    double mean = observed.mean();
    double denom = (observed.array() - mean).square().sum();
    double magnitude2 = observed.squaredNorm() / static_cast<double>(observed.size());
    if (denom <= 1e-14 * std::max(magnitude2 * static_cast<double>(observed.size()), DBL_MIN))
        throw DegenerateVariance("predictivity: observations have no variance");
    return 1.0 - (predicted - observed).squaredNorm() / denom;
}

}  // namespace gpsens
