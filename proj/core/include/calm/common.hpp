#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace calm {

// Model math runs in `real`; data pipeline and metrics always use double.
#ifdef CALM_REAL32
using real = float;
#else
using real = double;
#endif

using TokenId = std::uint32_t;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IngestError : Error {
    using Error::Error;
};
struct StreamError : Error {
    using Error::Error;
};
struct MetricError : Error {
    using Error::Error;
};

// SplitMix64 finalizer. Used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// FNV-1a, stable across platforms. Used for config hashes in run metadata.
std::uint64_t fnv1a(const std::string& s);

// Deterministic RNG with hand-rolled transforms so sequences do not depend
// on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    // [0, 1)
    double uniform();
    double uniform(double lo, double hi);
    // mean > 0
    double exponential(double mean);
    double normal();
    // [0, n), unbiased
    std::uint64_t uniform_int(std::uint64_t n);

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = uniform_int(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    template <typename Container>
    void shuffle(Container& c) {
        shuffle(c.begin(), c.end());
    }

private:
    std::uint64_t state_;
    double gauss_spare_ = 0.0;
    bool has_gauss_spare_ = false;
};

} // namespace calm
