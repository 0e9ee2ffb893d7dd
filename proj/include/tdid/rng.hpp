#pragma once

// SplitMix64 generator. Every random decision in the project draws from it so
// that generated datasets and initializations are reproducible bit-for-bit on
// any platform (std:: distributions are implementation-defined).

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>

namespace tdid {

inline constexpr std::uint64_t kSplitMixIncrement = 0x9E3779B97F4A7C15ull;
inline constexpr std::uint64_t kSplitMixMul1 = 0xBF58476D1CE4E5B9ull;
inline constexpr std::uint64_t kSplitMixMul2 = 0x94D049BB133111EBull;

// The SplitMix64 output function applied to a single value.
constexpr std::uint64_t splitmix_mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * kSplitMixMul1;
    z = (z ^ (z >> 27)) * kSplitMixMul2;
    return z ^ (z >> 31);
}

// Independent stream seed for item `index` of a family rooted at `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix_mix((seed ^ index) + kSplitMixIncrement);
}

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += kSplitMixIncrement;
        return splitmix_mix(state_);
    }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n); n > 0. 128-bit multiply-high (Lemire, no rejection).
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    // Inclusive integer range.
    long range(long lo, long hi) { return lo + static_cast<long>(below(static_cast<std::uint64_t>(hi - lo + 1))); }

    template <typename V>
    void shuffle(std::span<V> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

}  // namespace tdid
