#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace marlsim {

// Deterministic, compiler-independent random primitives. Standard-library
// distributions are implementation-defined, which would break the
// byte-identical reproducibility contract, so everything here is hand-rolled
// on top of splitmix64.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix_u64(std::uint64_t seed, std::uint64_t value) {
    std::uint64_t s = seed ^ (value + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
    return splitmix64(s);
}

inline std::uint64_t mix_str(std::uint64_t seed, std::string_view text) {
    std::uint64_t h = seed ^ 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
        h = mix_u64(h, c);
    }
    return h;
}

// Small counter-based generator; one instance per independent draw stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in (0, 1); never returns exactly 0 or 1.
    double next_unit() {
        const std::uint64_t bits = next_u64() >> 11;  // 53 bits
        double u = static_cast<double>(bits) * 0x1.0p-53;
        if (u <= 0.0) u = 0x1.0p-53;
        return u;
    }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // Standard normal via Box-Muller (single value per pair; second discarded
    // to keep the stream position independent of usage patterns).
    double next_normal() {
        const double u1 = next_unit();
        const double u2 = next_unit();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

private:
    std::uint64_t state_;
};

}  // namespace marlsim
