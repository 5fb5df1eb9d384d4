#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace gpsens {

/// SplitMix64 finalizer. Bijective on 64-bit words, good avalanche.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Derives an independent seed for a numbered stream. Counter-based, so the
/// seed for stream k never depends on how many other streams were created or
/// on the order tasks run in.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    return splitmix64(master ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
    return derive_seed(derive_seed(master, a), b);
}

/// Portable random stream. std::mt19937_64 output is fixed by the standard;
/// the distributions below are hand-rolled because the standard leaves
/// std::uniform_real_distribution and std::normal_distribution algorithms
/// unspecified, and we need identical draws on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform on [0, 1) with 53 random bits.
    double u01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller. One draw per call, no caching, so the
    /// stream position is a pure function of the call count.
    double normal() {
        double u1 = static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;        // [0, 1)
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Uniform integer on [0, n). Requires n >= 1.
    std::uint64_t uniform_index(std::uint64_t n) {
        // Multiply-shift rejection-free mapping; bias is < 2^-53 per draw,
        // far below anything a bootstrap of ~1e5 draws can resolve.
        auto r = static_cast<std::uint64_t>(u01() * static_cast<double>(n));
        return r < n ? r : n - 1;
    }

    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

private:
    std::mt19937_64 engine_;
};

}  // namespace gpsens
