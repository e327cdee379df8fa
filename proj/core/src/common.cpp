#include "calm/common.hpp"

#include <cmath>

namespace calm {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

} // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2));
    std::uint64_t r = splitmix64(x);
    x ^= b;
    return r ^ splitmix64(x);
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

Rng::Rng(std::uint64_t seed) : state_(seed) {
    // Warm up so that small seeds diverge immediately.
    for (int i = 0; i < 2; ++i) {
        splitmix64(state_);
        state_ += 0x9e3779b97f4a7c15ull;
    }
}

std::uint64_t Rng::next_u64() {
    return splitmix64(state_);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::exponential(double mean) {
    // 1 - U is in (0, 1], so the log is finite.
    return -mean * std::log(1.0 - uniform());
}

double Rng::normal() {
    if (has_gauss_spare_) {
        has_gauss_spare_ = false;
        return gauss_spare_;
    }
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double radius = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    gauss_spare_ = radius * std::sin(theta);
    has_gauss_spare_ = true;
    return radius * std::cos(theta);
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
    if (n == 0) {
        return 0;
    }
    // Rejection sampling over the smallest covering power-of-two mask.
    std::uint64_t mask = n - 1;
    mask |= mask >> 1;
    mask |= mask >> 2;
    mask |= mask >> 4;
    mask |= mask >> 8;
    mask |= mask >> 16;
    mask |= mask >> 32;
    std::uint64_t v;
    do {
        v = next_u64() & mask;
    } while (v >= n);
    return v;
}

} // namespace calm
