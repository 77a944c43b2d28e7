#pragma once

// Deterministic random source. Gaussian draws use an explicit Box-Muller so
// the byte stream does not depend on the standard library's distribution
// internals; seeds fan out from one root via FNV-1a tag mixing.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "numerics.hpp"

namespace emocirc {

inline constexpr std::uint64_t kFnvOffsetBasis = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = kFnvOffsetBasis) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffsetBasis) {
    return fnv1a64(s.data(), s.size(), h);
}

// Stage- or purpose-scoped seed derived from one root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
    std::uint64_t h = fnv1a64(tag);
    h ^= root + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of the state.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::size_t uniform_index(std::size_t n) {
        EMOCIRC_CHECK(n > 0, "uniform_index: empty range");
        // modulo bias is irrelevant at these range sizes
        return static_cast<std::size_t>(gen_() % n);
    }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    Vec gaussian_vec(std::size_t n, double sigma = 1.0) {
        Vec v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = sigma * gaussian();
        return v;
    }

    // k distinct indices drawn uniformly from [0, n), in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        EMOCIRC_CHECK(k <= n, "sample_without_replacement: k > n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        std::vector<std::size_t> out;
        out.reserve(k);
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + uniform_index(n - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace emocirc
