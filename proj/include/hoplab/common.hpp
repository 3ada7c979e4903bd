#pragma once
// Shared basics: error types, deterministic RNG, small helpers.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hoplab {

// ----------------------------- errors -----------------------------
// One exception type per contract failure named in the module specs.

struct UnknownToken : std::runtime_error {
    explicit UnknownToken(const std::string& tok)
        : std::runtime_error("unknown token: " + tok) {}
};

struct MismatchedChain : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyRelationSet : std::runtime_error {
    EmptyRelationSet() : std::runtime_error("relation set is empty") {}
};

struct TooSmallWorld : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InsufficientChains : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidPositions : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Diverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SingularSystem : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingBaseline : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----------------------------- rng -----------------------------
// mt19937_64 core with hand-rolled gaussian/bounded draws so results do not
// depend on libstdc++ distribution internals.

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    // uniform integer in [0, n), n > 0
    uint64_t uniform_below(uint64_t n) {
        // rejection sampling keeps the draw exactly uniform
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    int index(size_t n) { return static_cast<int>(uniform_below(static_cast<uint64_t>(n))); }

    // Box-Muller with cached spare
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = uniform_below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_{false};
    double spare_{0.0};
};

// ----------------------------- hashing -----------------------------
// FNV-1a over raw bytes; used for weight checksums in tests and the harness.

inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

// ----------------------------- io -----------------------------
// All artifact writes go through a temp-file rename so re-runs overwrite
// atomically.

void atomic_write_text(const std::string& path, const std::string& content);
void atomic_write_bytes(const std::string& path, const std::vector<char>& bytes);
std::string read_text_file(const std::string& path);

}  // namespace hoplab
