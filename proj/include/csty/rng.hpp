#ifndef CSTY_RNG_HPP
#define CSTY_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace csty {

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64_bytes(const void* p, size_t n, uint64_t h = 1469598103934665603ull) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Combine a base seed with salts into an independent stream seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt0, uint64_t salt1 = 0, uint64_t salt2 = 0) {
    uint64_t s = seed;
    s ^= 0x9e3779b97f4a7c15ull + salt0;
    (void)splitmix64(s);
    s ^= 0xbf58476d1ce4e5b9ull + salt1;
    (void)splitmix64(s);
    s ^= 0x94d049bb133111ebull + salt2;
    return splitmix64(s);
}

// Deterministic sequential stream; all randomness in the repo flows through this.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}
    Rng(uint64_t seed, std::string_view stream) : state_(mix_seed(seed, fnv1a64(stream))) {}

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in (0, 1]; never 0 so it is safe under log()
    double uniform01() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    float gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = static_cast<float>(r * std::sin(a));
        has_spare_ = true;
        return static_cast<float>(r * std::cos(a));
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    float spare_ = 0.0f;
};

// One gaussian addressed by (seed, key0, key1); independent of any draw order.
inline float gaussian_at(uint64_t seed, uint64_t key0, uint64_t key1) {
    Rng rng(mix_seed(seed, key0, key1));
    return rng.gaussian();
}

} // namespace csty

#endif // CSTY_RNG_HPP
