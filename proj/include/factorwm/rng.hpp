#pragma once

#include <cstdint>
#include <vector>

namespace fwm {

/// Counter-based pseudo-random stream. Each draw hashes (key, counter), so a
/// stream is a pure function of (seed, stream_id, counter) and sequences are
/// bit-identical across runs and platforms. derive() builds statistically
/// independent child streams without consuming parent state.
///
/// Constants are the SplitMix64 finalizer (Stafford variant 13) and the
/// golden-ratio increment 0x9E3779B97F4A7C15.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

    std::uint64_t next_u64();

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform();

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);

    /// Standard normal via Box-Muller (no cached spare; two draws per call).
    double gaussian();

    /// Uniform integer in [0, n). n must be positive.
    int uniform_int(int n);

    /// Fills `out` with i.i.d. standard normal draws.
    void fill_gaussian(std::vector<double>& out);

    /// Child stream keyed on (this stream, child_id); never overlaps the
    /// parent sequence because it uses a distinct hash key.
    RngStream derive(std::uint64_t child_id) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

private:
    RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t key);

    std::uint64_t seed_ = 0;
    std::uint64_t stream_id_ = 0;
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

/// SplitMix64 finalizer; bijective on 64-bit words.
std::uint64_t mix64(std::uint64_t z);

} // namespace fwm
