#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sqrl {

inline constexpr std::string_view kVersion = "0.1.0";

// Error categories the CLI maps to exit codes (2, 3, 4).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Shape/contract violations inside the numeric core.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// One root seed fans out into named substreams. Every random decision in a run
// derives its stream through this, which is what makes reruns bit-identical
// and lets a resumed run replay the exact shuffles and rollouts it would have
// seen uninterrupted.
inline std::uint64_t substream(std::uint64_t root, std::string_view tag,
                               std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t h = mix64(root ^ fnv1a64(tag));
    h = mix64(h ^ (a + 0x9e3779b97f4a7c15ull));
    h = mix64(h ^ (b + 0x7f4a7c159e3779b9ull));
    return h;
}

// mt19937_64 with hand-rolled draw helpers. The std distributions are
// implementation-defined, so using them would tie outputs to a particular
// standard library build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    // [0, 1), 53-bit resolution
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double normal(double mu = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mu + spare_ * sigma;
        }
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        double z0 = r * std::cos(2.0 * M_PI * u2);
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return mu + z0 * sigma;
    }

    // uniform integer in [0, n), rejection sampled
    std::uint64_t randint(std::uint64_t n) {
        if (n == 0) throw ShapeError("Rng::randint: n must be positive");
        std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(randint(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace sqrl
