#pragma once

// Deterministic randomness. Two rules keep runs bit-for-bit reproducible
// across platforms and toolchains:
//
//  1. The raw bit source is std::mt19937_64 (its output sequence is fixed by
//     the standard), but the scalar conversions are hand-rolled here because
//     std::uniform_real_distribution and std::normal_distribution are
//     implementation-defined.
//  2. Every stage derives its own sub-seed from the root seed via FNV-1a over
//     (root seed as 8 LE bytes, stage label bytes, index as 8 LE bytes); the
//     exact derivation below is part of the contract and is logged in run
//     manifests so alternate implementations can reproduce it.

#include <cstddef>
#include <cstdint>
#include <cmath>
#include <random>
#include <string_view>

namespace saq {

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a64(const unsigned char* bytes, std::size_t n,
                             std::uint64_t h = kFnvOffset) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a64_u64(std::uint64_t value, std::uint64_t h) {
    unsigned char le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
    return fnv1a64(le, 8, h);
}

// subseed = FNV1a(root_le8 || stage_bytes || index_le8)
inline std::uint64_t derive_subseed(std::uint64_t root_seed, std::string_view stage,
                                    std::uint64_t index = 0) {
    std::uint64_t h = fnv1a64_u64(root_seed, kFnvOffset);
    h = fnv1a64(reinterpret_cast<const unsigned char*>(stage.data()), stage.size(), h);
    h = fnv1a64_u64(index, h);
    return h;
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1): top 53 bits scaled by 2^-53.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Standard normal via the classic (non-rejecting) Box-Muller transform so
    // the engine consumption per draw is fixed. The spare is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so the log is finite.
        const double u1 = 1.0 - uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform component index given cumulative weights (last entry ~ 1).
    std::size_t categorical(const double* cumulative, std::size_t k) {
        const double u = uniform01();
        for (std::size_t i = 0; i + 1 < k; ++i)
            if (u < cumulative[i]) return i;
        return k - 1;
    }

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace saq
