#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dr {

// Seeded RNG used across the project. All stochastic code takes one of these
// explicitly so runs are reproducible from the seed alone.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        std::uniform_int_distribution<int> d(0, n - 1);
        return d(gen_);
    }

    double uniform() {
        std::uniform_real_distribution<double> d(0.0, 1.0);
        return d(gen_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen_);
    }

    // Standard Gumbel noise, derived from a uniform draw.
    double gumbel() {
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        return -std::log(-std::log(u));
    }

    // Sample an index from an unnormalized nonnegative weight vector.
    template <typename Vec>
    int categorical(const Vec& w) {
        double total = 0.0;
        for (int i = 0; i < static_cast<int>(w.size()); ++i) total += w[i];
        double r = uniform() * total;
        double acc = 0.0;
        for (int i = 0; i < static_cast<int>(w.size()); ++i) {
            acc += w[i];
            if (r < acc) return i;
        }
        return static_cast<int>(w.size()) - 1;
    }

    // Derive an independent child stream (for per-worker seeding).
    Rng fork() { return Rng(gen_()); }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace dr
