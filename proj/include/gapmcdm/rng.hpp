#pragma once

#include <cstdint>
#include <random>

#include "special.hpp"

namespace gapmcdm {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// 53-bit mantissa mapped into the open interval (0,1).
inline double u64_to_unit(std::uint64_t x) {
    return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace detail

// Counter-based stream in the SplittableRandom style: the key is derived from
// up to three ids, draws are splitmix64 of key + counter * golden ratio.
// Streams keyed by (seed, individual, iteration) are independent of scheduling,
// which is what makes threaded fits bit-reproducible.
class CounterRng {
  public:
    explicit CounterRng(std::uint64_t k0, std::uint64_t k1 = 0, std::uint64_t k2 = 0) {
        key_ = detail::splitmix64(k0);
        key_ = detail::splitmix64(key_ ^ (k1 + 0x9e3779b97f4a7c15ULL));
        key_ = detail::splitmix64(key_ ^ (k2 + 0xd1b54a32d192ed03ULL));
    }

    std::uint64_t next_u64() { return detail::splitmix64(key_ + (ctr_++) * 0x9e3779b97f4a7c15ULL); }
    double uniform() { return detail::u64_to_unit(next_u64()); }
    double normal() { return normal_quantile(uniform()); }

  private:
    std::uint64_t key_;
    std::uint64_t ctr_ = 0;
};

// Sequential generator for data simulation and initialization. Uniform and
// normal draws are produced by fixed algorithms (53-bit uniforms, inverse-CDF
// normals) so outputs are identical across platforms and standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : g_(seed) {}

    std::uint64_t next_u64() { return g_(); }
    double uniform() { return detail::u64_to_unit(g_()); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() { return normal_quantile(uniform()); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = g_();
        } while (x >= limit);
        return x % n;
    }

  private:
    std::mt19937_64 g_;
};

}  // namespace gapmcdm
