#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "edgerel/error.hpp"
#include "edgerel/matrix.hpp"
#include "edgerel/nn/loss.hpp"

namespace edgerel::landscape {

struct Eigenpair {
    double value = 0.0;
    std::vector<double> vector;
    double residual = 0.0; // ‖Hv − λv‖ / |λ|
    int iterations = 0;
    bool converged = false;
};

struct HessianSummary {
    std::vector<Eigenpair> eigenpairs; // descending |λ|
    double trace_estimate = 0.0;
    double trace_stderr = 0.0;
    int n_probes = 0;

    std::vector<double> top_eigenvalues() const {
        std::vector<double> v;
        for (const auto& e : eigenpairs) v.push_back(e.value);
        return v;
    }
};

struct PowerIterationOptions {
    int k = 1;
    double tol = 1e-3;
    int max_iters = 200;
    std::uint64_t seed = 0;
};

namespace detail {

inline void orthogonalize(std::span<double> v, const std::vector<Eigenpair>& basis) {
    for (const auto& e : basis) {
        const double c = nn::dot(v, e.vector);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * e.vector[i];
    }
}

inline void normalize(std::span<double> v) {
    const double n = nn::norm2(v);
    for (double& x : v) x /= n;
}

} // namespace detail

// Top-k eigenpairs of the Hessian by power iteration, deflating previously
// found eigenvectors by orthogonal projection. A pair that does not reach
// `tol` within max_iters is still returned with converged = false.
template <nn::Objective F>
std::vector<Eigenpair> hessian_top_eigs(const F& f, std::span<const double> theta, const PowerIterationOptions& opt) {
    if (opt.k < 1) throw Error("hessian_top_eigs: k must be >= 1");
    if (!(opt.tol > 0.0)) throw Error("hessian_top_eigs: tol must be > 0");
    const std::size_t n = theta.size();
    if (static_cast<std::size_t>(opt.k) > n) throw Error("hessian_top_eigs: k exceeds parameter count");
    std::vector<Eigenpair> found;
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int p = 0; p < opt.k; ++p) {
        std::vector<double> v(n);
        for (double& x : v) x = gauss(rng);
        detail::orthogonalize(v, found);
        detail::normalize(v);
        Eigenpair e;
        for (int it = 1; it <= opt.max_iters; ++it) {
            auto hv = nn::hvp(f, theta, v);
            detail::orthogonalize(hv, found);
            const double lambda = nn::dot(v, hv);
            double r2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) r2 += (hv[i] - lambda * v[i]) * (hv[i] - lambda * v[i]);
            e.value = lambda;
            e.vector = v;
            e.iterations = it;
            const double hn = nn::norm2(hv);
            if (hn == 0.0) {
                // The deflated operator annihilates v: eigenvalue 0.
                e.residual = 0.0;
                e.converged = true;
                break;
            }
            e.residual = std::sqrt(r2) / std::abs(lambda);
            if (e.residual <= opt.tol) {
                e.converged = true;
                break;
            }
            for (std::size_t i = 0; i < n; ++i) v[i] = hv[i] / hn;
            detail::orthogonalize(v, found);
            detail::normalize(v);
        }
        found.push_back(std::move(e));
    }
    std::stable_sort(found.begin(), found.end(),
                     [](const Eigenpair& a, const Eigenpair& b) { return std::abs(a.value) > std::abs(b.value); });
    return found;
}

struct TraceEstimate {
    double estimate = 0.0;
    double standard_error = 0.0;
    std::vector<double> samples;
};

// Hutchinson estimator: mean of vᵀHv over Rademacher probes v.
template <nn::Objective F>
TraceEstimate hessian_trace(const F& f, std::span<const double> theta, int n_probes, std::uint64_t seed) {
    if (n_probes < 2) throw Error("hessian_trace: n_probes must be >= 2");
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> v(theta.size());
    TraceEstimate t;
    for (int k = 0; k < n_probes; ++k) {
        for (double& x : v) x = coin(rng) ? 1.0 : -1.0;
        t.samples.push_back(nn::dot(v, nn::hvp(f, theta, v)));
    }
    double mean = 0.0;
    for (double s : t.samples) mean += s;
    mean /= n_probes;
    double var = 0.0;
    for (double s : t.samples) var += (s - mean) * (s - mean);
    var /= (n_probes - 1);
    t.estimate = mean;
    t.standard_error = std::sqrt(var / n_probes);
    return t;
}

template <nn::Objective F>
HessianSummary hessian_summary(const F& f, std::span<const double> theta, const PowerIterationOptions& opt,
                               int n_probes, std::uint64_t trace_seed) {
    HessianSummary s;
    s.eigenpairs = hessian_top_eigs(f, theta, opt);
    const auto t = hessian_trace(f, theta, n_probes, trace_seed);
    s.trace_estimate = t.estimate;
    s.trace_stderr = t.standard_error;
    s.n_probes = n_probes;
    return s;
}

// Parameter range [offset, offset+length) normalized as one unit.
using Block = std::pair<std::size_t, std::size_t>;

struct SliceGrid {
    std::vector<double> d1, d2;
    double extent = 0.0;
    int resolution = 0;
    std::vector<double> coords; // a_i = b_i, symmetric around 0
    Matrix losses;              // losses(i, j) = L(θ + a_i d1 + b_j d2)
    double center_loss = 0.0;
};

// Random direction with each block rescaled to the norm of θ's block.
inline std::vector<double> filter_normalized_direction(std::span<const double> theta, std::span<const Block> blocks,
                                                       std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> d(theta.size());
    for (double& x : d) x = gauss(rng);
    for (const auto& [off, len] : blocks) {
        const double tn = nn::norm2(theta.subspan(off, len));
        if (!(tn > 0.0)) throw Error("loss_slice_2d: parameter block at offset " + std::to_string(off) + " has zero norm");
        const double dn = nn::norm2(std::span<const double>(d).subspan(off, len));
        for (std::size_t i = off; i < off + len; ++i) d[i] *= tn / dn;
    }
    return d;
}

template <class F>
SliceGrid loss_slice_2d(const F& f, std::span<const double> theta, std::span<const Block> blocks, double extent,
                        int resolution, std::uint64_t seed) {
    if (resolution < 1 || resolution % 2 == 0) throw Error("loss_slice_2d: resolution must be odd");
    if (!(extent > 0.0)) throw Error("loss_slice_2d: extent must be > 0");
    std::mt19937_64 rng(seed);
    SliceGrid g;
    g.extent = extent;
    g.resolution = resolution;
    g.d1 = filter_normalized_direction(theta, blocks, rng);
    g.d2 = filter_normalized_direction(theta, blocks, rng);
    const double c = nn::dot(g.d2, g.d1) / nn::dot(g.d1, g.d1);
    for (std::size_t i = 0; i < g.d2.size(); ++i) g.d2[i] -= c * g.d1[i];

    const int half = (resolution - 1) / 2;
    for (int i = 0; i < resolution; ++i)
        g.coords.push_back(half == 0 ? 0.0 : extent * static_cast<double>(i - half) / half);
    g.losses = Matrix(resolution, resolution);
    std::vector<double> p(theta.size());
    for (int i = 0; i < resolution; ++i) {
        for (int j = 0; j < resolution; ++j) {
            const double a = g.coords[i], b = g.coords[j];
            for (std::size_t k = 0; k < p.size(); ++k) p[k] = theta[k] + a * g.d1[k] + b * g.d2[k];
            g.losses(i, j) = f.value(p);
        }
    }
    g.center_loss = g.losses(half, half);
    return g;
}

} // namespace edgerel::landscape
