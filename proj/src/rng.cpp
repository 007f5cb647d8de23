#include "factorwm/rng.hpp"

#include "factorwm/errors.hpp"

#include <cmath>

namespace fwm {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
constexpr double kTwoPi = 6.283185307179586476925286766559;
} // namespace

std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), key_(mix64(seed + kGolden) ^ mix64(stream_id * kGolden + 1)) {}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t key)
    : seed_(seed), stream_id_(stream_id), key_(key) {}

std::uint64_t RngStream::next_u64() {
    ++counter_;
    return mix64(key_ + counter_ * kGolden);
}

double RngStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double RngStream::gaussian() {
    // u1 shifted away from zero so log() stays finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

int RngStream::uniform_int(int n) {
    if (n <= 0) {
        throw DomainError("uniform_int requires n > 0");
    }
    // Multiply-shift; tiny bias is irrelevant next to determinism.
    return static_cast<int>((static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n)) >> 64);
}

void RngStream::fill_gaussian(std::vector<double>& out) {
    for (double& v : out) {
        v = gaussian();
    }
}

RngStream RngStream::derive(std::uint64_t child_id) const {
    return RngStream(seed_, child_id, mix64(key_ ^ mix64(child_id + kGolden)));
}

} // namespace fwm
