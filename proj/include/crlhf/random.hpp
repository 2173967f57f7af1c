#pragma once

// Portable seeded randomness for the simulator.
//
// Engine: std::mt19937_64, whose output sequence is fixed by the standard.
// The standard distributions are implementation-defined, so all draws are
// derived from raw 64-bit outputs here instead.
//
// Streams: independent streams are keyed by (root seed, name, index) and
// seeded through SplitMix64 over an FNV-1a hash of the name:
//   task ground truth     derive_seed(seed, "task", task_index)
//   annotator i           derive_seed(seed, "annotator", i)
//   annotator i on task   derive_seed(annotator.rng_seed, task_id, 0)
//   Pass@k Monte Carlo    derive_seed(seed, "pass-at-k", 0)

#include <cstdint>
#include <random>
#include <string_view>

namespace crlhf {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                                    std::uint64_t index) noexcept {
    return splitmix64(splitmix64(root ^ fnv1a64(stream)) + index);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

    /// Uniform on [0, n) by rejection, so the result is unbiased.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t r = next();
            if (r >= threshold) return r % n;
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace crlhf
