#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace prunelab {

// Error taxonomy. invalid-argument maps to std::invalid_argument; these cover
// the remaining classes the library distinguishes.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidState : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Global strict mode: serializes everything that could introduce run-to-run
// variation. Kernels in this build are sequential either way, so strict mode
// is about locking that guarantee in, not changing numerics.
void set_strict_mode(bool on);
bool strict_mode();

// Deterministic seeded RNG (splitmix64 core). std:: distributions are
// implementation-defined, so all sampling goes through this.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

    // [0, n); modulo draw, bias is negligible for n << 2^64
    int64_t uniform_int(int64_t n) { return int64_t(next_u64() % uint64_t(n)); }

    // standard normal, Box-Muller with pair caching
    double normal();

  private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a 64-bit; used for checkpoint/config/batch digests (equality checks,
// not cryptographic).
class Fnv1a {
  public:
    void update(const void* bytes, size_t n) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    template <typename T>
    void update_pod(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        update(&v, sizeof(v));
    }
    uint64_t value() const { return h_; }
    std::string hex() const;

  private:
    uint64_t h_ = 0xcbf29ce484222325ull;
};

std::string digest_bytes(const void* bytes, size_t n);

} // namespace prunelab
