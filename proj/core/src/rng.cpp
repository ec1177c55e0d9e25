#include "wsgan/rng.hpp"

#include <cmath>

namespace wsgan {

namespace {
// splitmix64
inline uint64_t splitmix(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
constexpr double kTwoPi = 6.283185307179586476925286766559;
}  // namespace

Rng::Rng(uint64_t seed) : state_(seed ^ 0xa02b'dbf7'bb3c'0a7ULL) {
    // Warm up so nearby seeds diverge immediately.
    splitmix(state_);
    splitmix(state_);
}

uint64_t Rng::next_u64() { return splitmix(state_); }

double Rng::uniform() {
    // 53 random bits -> [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int n) {
    WSGAN_CHECK(n > 0, "uniform_int needs positive n");
    // rejection sampling for an unbiased draw
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<int>(x % un);
}

double Rng::normal() {
    if (have_cached_normal_) {
        have_cached_normal_ = false;
        return cached_normal_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    cached_normal_ = r * std::sin(kTwoPi * u2);
    have_cached_normal_ = true;
    return r * std::cos(kTwoPi * u2);
}

double Rng::gamma(double shape) {
    WSGAN_CHECK(shape > 0.0, "gamma shape must be positive");
    if (shape < 1.0) {
        // boost to shape+1 and scale back
        double u = 0.0;
        do {
            u = uniform();
        } while (u <= 0.0);
        return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    // Marsaglia-Tsang
    double d = shape - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        double u = uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

double Rng::beta(double alpha, double beta) {
    WSGAN_CHECK(alpha > 0.0 && beta > 0.0, "beta parameters must be positive");
    double x = gamma(alpha);
    double y = gamma(beta);
    return x / (x + y);
}

Tensor Rng::normal_tensor(Shape shape, double mean, double stddev) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = mean + stddev * normal();
    return t;
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    return t;
}

uint64_t Rng::mix(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix(s);
}

Rng Rng::split(uint64_t tag) const { return Rng(mix(state_, tag)); }

}  // namespace wsgan
