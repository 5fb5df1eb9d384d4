#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gpsens/csv.hpp"
#include "gpsens/errors.hpp"
#include "gpsens/sobol_sequence.hpp"

namespace gpsens {

/// One input parameter: a name and a finite physical range with lower < upper.
struct Parameter {
    std::string name;
    double lower;
    double upper;
};

/// Ordered list of parameters defining the input domain. Sampling happens on
/// the unit cube; to_physical / to_unit map per coordinate with the affine
/// transform x = lower + u * (upper - lower). Sensitivity indices are
/// invariant under such per-coordinate maps, so unit-cube and physical-space
/// analyses of the same model agree.
class ParameterSpace {
public:
    ParameterSpace() = default;

    explicit ParameterSpace(std::vector<Parameter> params) : params_(std::move(params)) {
        if (params_.empty()) throw std::invalid_argument("ParameterSpace: no parameters");
        std::set<std::string> seen;
        for (const auto& p : params_) {
            if (p.name.empty()) throw std::invalid_argument("ParameterSpace: empty parameter name");
            if (p.name.find(',') != std::string::npos || p.name.find('"') != std::string::npos ||
                p.name.find('\n') != std::string::npos)
                throw std::invalid_argument("ParameterSpace: name '" + p.name +
                                            "' contains a CSV delimiter");
            if (!seen.insert(p.name).second)
                throw std::invalid_argument("ParameterSpace: duplicate name '" + p.name + "'");
            if (!std::isfinite(p.lower) || !std::isfinite(p.upper))
                throw NumericalDomain("ParameterSpace: non-finite bound for '" + p.name + "'");
            if (!(p.lower < p.upper))
                throw std::invalid_argument("ParameterSpace: need lower < upper for '" + p.name +
                                            "'");
        }
    }

    int dimension() const { return static_cast<int>(params_.size()); }
    const Parameter& parameter(int i) const { return params_[static_cast<std::size_t>(i)]; }
    const std::vector<Parameter>& parameters() const { return params_; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.name);
        return out;
    }

    /// Maps unit-cube rows to physical rows.
    Eigen::MatrixXd to_physical(const Eigen::MatrixXd& unit) const {
        check_columns(unit);
        Eigen::MatrixXd out(unit.rows(), unit.cols());
        for (int j = 0; j < dimension(); ++j) {
            const auto& p = params_[static_cast<std::size_t>(j)];
            out.col(j) = (p.lower + (p.upper - p.lower) * unit.col(j).array()).matrix();
        }
        return out;
    }

    /// Maps physical rows back to the unit cube. Inverse of to_physical up
    /// to one rounding error per coordinate.
    Eigen::MatrixXd to_unit(const Eigen::MatrixXd& physical) const {
        check_columns(physical);
        Eigen::MatrixXd out(physical.rows(), physical.cols());
        for (int j = 0; j < dimension(); ++j) {
            const auto& p = params_[static_cast<std::size_t>(j)];
            out.col(j) = ((physical.col(j).array() - p.lower) / (p.upper - p.lower)).matrix();
        }
        return out;
    }

    /// True when the point lies inside the closed box.
    bool contains(const Eigen::VectorXd& x, double rel_slack = 0.0) const {
        if (x.size() != dimension()) throw ShapeMismatch("contains: wrong point dimension");
        for (int j = 0; j < dimension(); ++j) {
            const auto& p = params_[static_cast<std::size_t>(j)];
            double slack = rel_slack * (p.upper - p.lower);
            if (x[j] < p.lower - slack || x[j] > p.upper + slack) return false;
        }
        return true;
    }

private:
    void check_columns(const Eigen::MatrixXd& m) const {
        if (m.cols() != dimension())
            throw ShapeMismatch("ParameterSpace: expected " + std::to_string(dimension()) +
                                " columns, got " + std::to_string(m.cols()));
    }

    std::vector<Parameter> params_;
};

/// Pick-freeze design in physical coordinates. A and B are independent
/// M x D sample blocks; ab[i] equals A with column i replaced by B's column
/// i, and ba[i] (present only when second-order interactions are requested)
/// equals B with column i taken from A. Evaluating the model on all blocks
/// costs M(D+2) rows, or M(2D+2) with the ba blocks.
struct PickFreezeDesign {
    Eigen::MatrixXd a;
    Eigen::MatrixXd b;
    std::vector<Eigen::MatrixXd> ab;
    std::optional<std::vector<Eigen::MatrixXd>> ba;
    std::uint64_t skip = 0;  // Sobol index of A's first row

    Eigen::Index sample_count() const { return a.rows(); }
    int dimension() const { return static_cast<int>(a.cols()); }
    bool has_second_order_blocks() const { return ba.has_value(); }

    Eigen::Index total_rows() const {
        Eigen::Index blocks = 2 + dimension() + (ba ? dimension() : 0);
        return blocks * sample_count();
    }

    /// All design rows stacked in canonical order: A, B, AB_1..AB_D, then
    /// BA_1..BA_D when present. Every consumer of flattened evaluations
    /// (model runner, realization sampler, estimators) relies on this order.
    Eigen::MatrixXd stacked_rows() const {
        Eigen::MatrixXd out(total_rows(), dimension());
        Eigen::Index m = sample_count();
        Eigen::Index at = 0;
        out.middleRows(at, m) = a;
        at += m;
        out.middleRows(at, m) = b;
        at += m;
        for (const auto& block : ab) {
            out.middleRows(at, m) = block;
            at += m;
        }
        if (ba)
            for (const auto& block : *ba) {
                out.middleRows(at, m) = block;
                at += m;
            }
        return out;
    }

    void validate() const {
        Eigen::Index m = sample_count();
        int d = dimension();
        if (m < 2) throw ShapeMismatch("PickFreezeDesign: need at least 2 samples");
        if (b.rows() != m || b.cols() != d) throw ShapeMismatch("PickFreezeDesign: B shape");
        if (static_cast<int>(ab.size()) != d)
            throw ShapeMismatch("PickFreezeDesign: expected one AB block per dimension");
        for (const auto& block : ab)
            if (block.rows() != m || block.cols() != d)
                throw ShapeMismatch("PickFreezeDesign: AB block shape");
        if (ba) {
            if (static_cast<int>(ba->size()) != d)
                throw ShapeMismatch("PickFreezeDesign: expected one BA block per dimension");
            for (const auto& block : *ba)
                if (block.rows() != m || block.cols() != d)
                    throw ShapeMismatch("PickFreezeDesign: BA block shape");
        }
    }
};

/// Builds a pick-freeze design from one Sobol stream in 2D dimensions:
/// row n of the stream supplies row n of A (first D coordinates) and row n
/// of B (last D coordinates). The estimators integrate over the product
/// space of A and B, so the point set must fill [0,1]^{2D}; carving A and B
/// out of consecutive blocks of a D-dimensional sequence instead couples
/// them coordinate-by-coordinate and collapses the estimates. Different
/// skips give non-overlapping designs from the same stream.
inline PickFreezeDesign build_design(const ParameterSpace& space, Eigen::Index m,
                                     bool second_order_blocks, std::uint64_t skip = 0) {
    if (m < 2) throw std::invalid_argument("build_design: need at least 2 samples");
    int d = space.dimension();
    Eigen::MatrixXd unit = sobol_points(2 * d, m, skip);

    PickFreezeDesign design;
    design.skip = skip;
    Eigen::MatrixXd unit_a = unit.leftCols(d);
    Eigen::MatrixXd unit_b = unit.rightCols(d);
    design.a = space.to_physical(unit_a);
    design.b = space.to_physical(unit_b);
    design.ab.reserve(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        Eigen::MatrixXd block = design.a;
        block.col(i) = design.b.col(i);
        design.ab.push_back(std::move(block));
    }
    if (second_order_blocks) {
        std::vector<Eigen::MatrixXd> ba;
        ba.reserve(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) {
            Eigen::MatrixXd block = design.b;
            block.col(i) = design.a.col(i);
            ba.push_back(std::move(block));
        }
        design.ba = std::move(ba);
    }
    design.validate();
    return design;
}

/// Writes the stacked design with a leading `block` column labelling each
/// row's origin: A, B, AB_i or BA_i with 1-based i.
inline void write_design_csv(const std::string& path, const PickFreezeDesign& design,
                             const ParameterSpace& space,
                             const std::string& config_hash = std::string()) {
    design.validate();
    if (design.dimension() != space.dimension())
        throw ShapeMismatch("write_design_csv: design/space dimension mismatch");

    CsvWriter out(path);
    if (!config_hash.empty()) out.comment("config_hash=" + config_hash);
    std::vector<std::string> header{"block"};
    for (const auto& name : space.names()) header.push_back(name);
    out.header(header);

    auto write_block = [&](const std::string& label, const Eigen::MatrixXd& rows) {
        std::vector<std::string> tokens(static_cast<std::size_t>(rows.cols()) + 1);
        for (Eigen::Index r = 0; r < rows.rows(); ++r) {
            tokens[0] = label;
            for (Eigen::Index c = 0; c < rows.cols(); ++c)
                tokens[static_cast<std::size_t>(c) + 1] = detail::format_double(rows(r, c));
            out.row(tokens);
        }
    };

    write_block("A", design.a);
    write_block("B", design.b);
    for (int i = 0; i < design.dimension(); ++i)
        write_block("AB_" + std::to_string(i + 1), design.ab[static_cast<std::size_t>(i)]);
    if (design.ba)
        for (int i = 0; i < design.dimension(); ++i)
            write_block("BA_" + std::to_string(i + 1), (*design.ba)[static_cast<std::size_t>(i)]);
}

}  // namespace gpsens
