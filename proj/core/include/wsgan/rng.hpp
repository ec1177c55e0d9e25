#pragma once

#include <cstdint>
#include <vector>

#include "wsgan/tensor.hpp"

namespace wsgan {

/// Deterministic random stream. All distributions are implemented on top of
/// the raw 64-bit generator so sequences do not depend on the standard
/// library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();

    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    /// Uniform integer in [0, n). n must be positive.
    int uniform_int(int n);

    /// Standard normal (Box-Muller, cached twin).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Beta(alpha, beta) via gamma ratio.
    double beta(double alpha, double beta);

    Tensor normal_tensor(Shape shape, double mean = 0.0, double stddev = 1.0);
    Tensor uniform_tensor(Shape shape, double lo, double hi);

    /// Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

    /// Derived independent stream; same (seed, tag) always yields the same stream.
    Rng split(uint64_t tag) const;

    static uint64_t mix(uint64_t a, uint64_t b);

private:
    double gamma(double shape);

    uint64_t state_;
    bool have_cached_normal_ = false;
    double cached_normal_ = 0.0;
};

}  // namespace wsgan
