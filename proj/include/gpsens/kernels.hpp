#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "gpsens/detail/util.hpp"
#include "gpsens/errors.hpp"

namespace gpsens {

enum class KernelKind { SquaredExponential, Matern52 };

inline std::string to_string(KernelKind kind) {
    return kind == KernelKind::SquaredExponential ? "rbf" : "matern52";
}

inline KernelKind kernel_kind_from_string(const std::string& name) {
    std::string n = detail::to_lower(detail::trim(name));
    if (n == "rbf" || n == "squared_exponential" || n == "se") return KernelKind::SquaredExponential;
    if (n == "matern52" || n == "matern" || n == "matern_5_2") return KernelKind::Matern52;
    throw ConfigError("unknown kernel '" + name + "' (expected rbf or matern52)");
}

/// Hyperparameters of a tensorized kernel
///   k(x, x') = prod_i sigma_f_i^2 * g(x_i - x'_i; ell_i),
/// plus an observation-noise variance added on the diagonal. Length scales
/// refer to unit-cube coordinates. The per-dimension signal variances only
/// enter through their product, so their split is not identifiable; the
/// product is what the fit determines.
struct Hyperparameters {
    Eigen::VectorXd signal_variance;  // sigma_f_i^2, one per dimension
    Eigen::VectorXd length_scale;     // ell_i, one per dimension
    double nugget = 0.0;              // sigma_y^2

    int dimension() const { return static_cast<int>(length_scale.size()); }

    double amplitude() const { return signal_variance.prod(); }

    void validate() const {
        if (signal_variance.size() != length_scale.size())
            throw ShapeMismatch("Hyperparameters: signal_variance/length_scale size mismatch");
        if (length_scale.size() == 0) throw ShapeMismatch("Hyperparameters: empty");
        for (Eigen::Index i = 0; i < length_scale.size(); ++i) {
            if (!(signal_variance[i] > 0.0) || !std::isfinite(signal_variance[i]))
                throw NumericalDomain("Hyperparameters: signal variance must be positive");
            if (!(length_scale[i] > 0.0) || !std::isfinite(length_scale[i]))
                throw NumericalDomain("Hyperparameters: length scale must be positive");
        }
        if (!(nugget >= 0.0) || !std::isfinite(nugget))
            throw NumericalDomain("Hyperparameters: nugget must be >= 0");
    }

    /// Flat log-parameter vector [log sigma_f_i^2..., log ell_i..., log nugget],
    /// the coordinates the optimizer works in.
    Eigen::VectorXd log_vector() const {
        Eigen::Index d = length_scale.size();
        Eigen::VectorXd v(2 * d + 1);
        v.head(d) = signal_variance.array().log();
        v.segment(d, d) = length_scale.array().log();
        v[2 * d] = std::log(nugget);
        return v;
    }

    static Hyperparameters from_log_vector(const Eigen::VectorXd& v) {
        if (v.size() < 3 || v.size() % 2 == 0)
            throw ShapeMismatch("Hyperparameters: log vector must have length 2d+1");
        Eigen::Index d = (v.size() - 1) / 2;
        Hyperparameters theta;
        theta.signal_variance = v.head(d).array().exp();
        theta.length_scale = v.segment(d, d).array().exp();
        theta.nugget = std::exp(v[2 * d]);
        return theta;
    }
};

namespace detail {

/// Unit-amplitude correlation g(r; ell).
inline double corr(KernelKind kind, double r, double ell) {
    if (kind == KernelKind::SquaredExponential) {
        double z = r / ell;
        return std::exp(-0.5 * z * z);
    }
    double t = 2.2360679774997896964091736687747 * std::abs(r) / ell;  // sqrt(5) |r| / ell
    return (1.0 + t + t * t / 3.0) * std::exp(-t);
}

/// d log g / d log ell, i.e. (dg/dlog ell) / g. Stays a ratio so callers can
/// form gradients as elementwise products with the kernel matrix without
/// dividing by correlations that underflow to zero.
inline double corr_dlog_ratio(KernelKind kind, double r, double ell) {
    if (kind == KernelKind::SquaredExponential) {
        double z = r / ell;
        return z * z;
    }
    double t = 2.2360679774997896964091736687747 * std::abs(r) / ell;
    return t * t * (1.0 + t) / (3.0 + 3.0 * t + t * t);
}

}  // namespace detail

/// Kernel value for two points (no nugget).
inline double kernel_value(KernelKind kind, const Hyperparameters& theta, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& y) {
    if (x.size() != theta.dimension() || y.size() != theta.dimension())
        throw ShapeMismatch("kernel_value: point dimension mismatch");
    double k = 1.0;
    for (Eigen::Index i = 0; i < x.size(); ++i)
        k *= theta.signal_variance[i] * detail::corr(kind, x[i] - y[i], theta.length_scale[i]);
    return k;
}

/// Cross-covariance matrix k(X, Y), rows of X against rows of Y (no nugget).
inline Eigen::MatrixXd kernel_matrix(KernelKind kind, const Hyperparameters& theta,
                                     const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    if (x.cols() != theta.dimension() || y.cols() != theta.dimension())
        throw ShapeMismatch("kernel_matrix: column count must equal kernel dimension");
    Eigen::MatrixXd k = Eigen::MatrixXd::Constant(x.rows(), y.rows(), theta.amplitude());
    for (Eigen::Index d = 0; d < x.cols(); ++d) {
        double ell = theta.length_scale[d];
        for (Eigen::Index j = 0; j < y.rows(); ++j)
            for (Eigen::Index i = 0; i < x.rows(); ++i)
                k(i, j) *= detail::corr(kind, x(i, d) - y(j, d), ell);
    }
    return k;
}

/// Symmetric covariance matrix k(X, X) (no nugget).
inline Eigen::MatrixXd kernel_matrix_sym(KernelKind kind, const Hyperparameters& theta,
                                         const Eigen::MatrixXd& x) {
    if (x.cols() != theta.dimension())
        throw ShapeMismatch("kernel_matrix_sym: column count must equal kernel dimension");
    Eigen::Index n = x.rows();
    Eigen::MatrixXd k = Eigen::MatrixXd::Constant(n, n, theta.amplitude());
    for (Eigen::Index d = 0; d < x.cols(); ++d) {
        double ell = theta.length_scale[d];
        for (Eigen::Index j = 0; j < n; ++j) {
            for (Eigen::Index i = j + 1; i < n; ++i) {
                double g = detail::corr(kind, x(i, d) - x(j, d), ell);
                k(i, j) *= g;
            }
        }
    }
    // Off-diagonal factors were accumulated in the lower triangle only.
    k.triangularView<Eigen::StrictlyUpper>() = k.transpose();
    return k;
}

}  // namespace gpsens
