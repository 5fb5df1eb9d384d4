#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gpsens/detail/joe_kuo_table.hpp"
#include "gpsens/errors.hpp"

namespace gpsens {

/// Sobol low-discrepancy sequence in Gray-code order with 52 fractional
/// bits, built on the Joe--Kuo direction numbers embedded in
/// detail/joe_kuo_table.hpp. Unscrambled: point 0 is the origin.
///
/// Gray-code ordering permutes each consecutive power-of-two block of the
/// natural-order sequence, so every 2^k-aligned block keeps the same
/// equidistribution properties while point updates cost one XOR per
/// dimension. The generator is stateless across platforms: a given
/// (dimension, index) pair always yields the same point.
class SobolSequence {
public:
    static constexpr int kBits = 52;

    explicit SobolSequence(int dimension) : dim_(dimension) {
        if (dimension < 1) throw std::invalid_argument("SobolSequence: dimension must be >= 1");
        if (dimension > static_cast<int>(detail::kSobolMaxDimension))
            throw DimensionUnsupported("SobolSequence: dimension " + std::to_string(dimension) +
                                       " exceeds table limit " +
                                       std::to_string(detail::kSobolMaxDimension));
        build_direction_numbers();
        state_.assign(static_cast<std::size_t>(dim_), 0);
        index_ = 0;
    }

    int dimension() const { return dim_; }

    /// Index of the point the next call to next() will emit.
    std::uint64_t index() const { return index_; }

    /// Jumps straight to an arbitrary point index. The point with index n is
    /// the XOR of the direction numbers selected by the bits of the Gray
    /// code n ^ (n >> 1), so seeking costs O(bits * dimension) regardless
    /// of the distance moved.
    void seek(std::uint64_t n) {
        if (n >= (1ull << kBits))
            throw std::invalid_argument("SobolSequence: index exceeds 2^52");
        std::uint64_t gray = n ^ (n >> 1);
        for (int j = 0; j < dim_; ++j) {
            std::uint64_t x = 0;
            for (int k = 0; k < kBits; ++k)
                if (gray & (1ull << k)) x ^= direction(j, k + 1);
            state_[static_cast<std::size_t>(j)] = x;
        }
        index_ = n;
    }

    void skip(std::uint64_t n) { seek(index_ + n); }

    /// Writes the current point into out[0..dimension) and advances.
    void next(double* out) {
        constexpr double scale = 0x1.0p-52;
        for (int j = 0; j < dim_; ++j)
            out[j] = static_cast<double>(state_[static_cast<std::size_t>(j)]) * scale;
        // Advancing from index i to i+1 flips the direction number at the
        // rightmost zero bit of i.
        int c = 0;
        std::uint64_t v = index_;
        while (v & 1ull) {
            v >>= 1;
            ++c;
        }
        for (int j = 0; j < dim_; ++j)
            state_[static_cast<std::size_t>(j)] ^= direction(j, c + 1);
        ++index_;
    }

private:
    std::uint64_t direction(int j, int k) const {
        return dir_[static_cast<std::size_t>(j) * kBits + static_cast<std::size_t>(k - 1)];
    }

    void build_direction_numbers() {
        dir_.assign(static_cast<std::size_t>(dim_) * kBits, 0);
        // First dimension: van der Corput in base 2, all m_k = 1.
        for (int k = 1; k <= kBits; ++k)
            dir_[static_cast<std::size_t>(k - 1)] = 1ull << (kBits - k);

        for (int j = 1; j < dim_; ++j) {
            const auto& entry = detail::kJoeKuoTable[j - 1];
            int degree = 0;
            for (std::uint32_t p = entry.poly; p > 1; p >>= 1) ++degree;

            std::uint64_t m[kBits + 1];
            for (int k = 1; k <= degree && k <= kBits; ++k)
                m[k] = entry.m[static_cast<std::size_t>(k - 1)];
            for (int k = degree + 1; k <= kBits; ++k) {
                // m_k = m_{k-s} ^ (m_{k-s} << s) ^ sum a_t (m_{k-t} << t),
                // a_t the coefficient of x^{s-t} in the primitive polynomial.
                std::uint64_t mk = m[k - degree] ^ (m[k - degree] << degree);
                for (int t = 1; t < degree; ++t)
                    if ((entry.poly >> (degree - t)) & 1u) mk ^= m[k - t] << t;
                m[k] = mk;
            }
            for (int k = 1; k <= kBits; ++k)
                dir_[static_cast<std::size_t>(j) * kBits + static_cast<std::size_t>(k - 1)] =
                    m[k] << (kBits - k);
        }
    }

    int dim_;
    std::uint64_t index_;
    std::vector<std::uint64_t> state_;
    std::vector<std::uint64_t> dir_;
};

/// Returns an m x d matrix whose rows are Sobol points skip, skip+1, ...,
/// skip+m-1 on [0,1)^d.
inline Eigen::MatrixXd sobol_points(int dimension, Eigen::Index m, std::uint64_t skip = 0) {
    if (m < 0) throw std::invalid_argument("sobol_points: negative count");
    SobolSequence seq(dimension);
    seq.seek(skip);
    Eigen::MatrixXd points(m, dimension);
    std::vector<double> row(static_cast<std::size_t>(dimension));
    for (Eigen::Index i = 0; i < m; ++i) {
        seq.next(row.data());
        for (int j = 0; j < dimension; ++j) points(i, j) = row[static_cast<std::size_t>(j)];
    }
    return points;
}

}  // namespace gpsens
