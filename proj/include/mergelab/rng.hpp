#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

// Deterministic random numbers. Everything here is defined bit-for-bit so that
// results do not depend on the standard library's distribution implementations.

namespace mergelab {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derive a child seed from a parent seed and a counter.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t counter) {
    return splitmix64(splitmix64(seed) ^ splitmix64(counter + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
    return derive_seed(seed, fnv1a(label));
}

// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit(std::uint64_t x) {
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// xoshiro256** seeded through splitmix64.
class rng {
public:
    explicit rng(std::uint64_t seed) {
        std::uint64_t s = seed;
        for (auto & w : state_) {
            s += 0x9e3779b97f4a7c15ULL;
            w = splitmix64(s);
        }
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    double uniform() { return to_unit(next()); }

    // Unbiased integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = index(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace mergelab
