#pragma once

#include <cstdint>
#include <string_view>

namespace gridloc::numkit {

// Counter-based PRNG: SplitMix64 run in counter mode. Draw i is
// finalize(key + (i+1) * 0x9E3779B97F4A7C15); the stream is a pure function
// of (seed, stream, counter), so replay and jump-ahead are exact and the
// sequence is identical on every platform.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();
    /// Uniform double in [0, 1), 53 mantissa bits.
    double next_uniform();
    /// Standard normal via Box-Muller; consumes exactly two uniforms per call.
    double next_gaussian();
    /// Uniform integer in [0, n), n > 0. Rejection-free modulo of a 64-bit draw.
    std::uint64_t next_below(std::uint64_t n);

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Deterministic seed derivation: FNV-1a 64 of the tag folded into the root
/// seed. Every subsystem seed flows from the single run seed through this.
std::uint64_t derive_seed(std::uint64_t root, std::string_view tag);

/// FNV-1a 64-bit over raw bytes; also used for file checksums.
std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);

} // namespace gridloc::numkit
