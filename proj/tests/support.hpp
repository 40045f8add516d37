#pragma once

// Shared fixtures for the unit tests: small models, random data, and
// finite-difference helpers. Everything here is seeded.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "edgerel/data/dataio.hpp"
#include "edgerel/fixedpoint.hpp"
#include "edgerel/matrix.hpp"
#include "edgerel/nn/model.hpp"

namespace edgerel::test {

inline fx::Format fmt(int w, int i, bool is_signed = true) {
    return is_signed ? fx::signed_format(w, i) : fx::unsigned_format(w, i);
}

// Dense chain dims[0] → dims[1] → …, one activation per layer, shared formats.
inline nn::Model chain(std::vector<int> dims, std::vector<nn::Activation> acts, fx::Format weight = fmt(8, 2),
                       fx::Format act = fmt(16, 6), fx::Format input = fmt(12, 1, false), int encoder_len = -1) {
    nn::ModelSpec spec;
    spec.input_format = input;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l)
        spec.layers.push_back({dims[l], dims[l + 1], acts[l], weight, weight, act});
    spec.encoder_len = encoder_len < 0 ? static_cast<int>(spec.layers.size()) : encoder_len;
    return nn::Model(spec);
}

inline std::vector<double> uniform(std::size_t n, double lo, double hi, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi, std::uint64_t seed) {
    return Matrix(rows, cols, uniform(rows * cols, lo, hi, seed));
}

// Random probability vector with a random number of zero cells.
inline std::vector<double> random_distribution(std::size_t n, std::mt19937_64& rng, double zero_fraction = 0.3) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> p(n);
    double s = 0.0;
    for (double& v : p) {
        v = u(rng) < zero_fraction ? 0.0 : u(rng);
        s += v;
    }
    if (s == 0.0) {
        p[0] = 1.0;
        return p;
    }
    for (double& v : p) v /= s;
    return p;
}

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

// Central-difference gradient of a scalar function.
template <class F>
std::vector<double> fd_gradient(F&& f, std::span<const double> x, double h) {
    std::vector<double> g(x.size()), p(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = p[i];
        p[i] = x0 + h;
        const double fp = f(std::span<const double>(p));
        p[i] = x0 - h;
        const double fm = f(std::span<const double>(p));
        p[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

} // namespace edgerel::test
