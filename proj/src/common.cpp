#include "prunelab/common.hpp"

#include <cmath>
#include <cstdio>

namespace prunelab {

namespace {
bool g_strict = false;
}

void set_strict_mode(bool on) { g_strict = on; }
bool strict_mode() { return g_strict; }

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 kept away from 0 so log stays finite
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 1e-300);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

std::string Fnv1a::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h_));
    return std::string(buf);
}

std::string digest_bytes(const void* bytes, size_t n) {
    Fnv1a h;
    h.update(bytes, n);
    return h.hex();
}

} // namespace prunelab
