#pragma once

// Jacobian-norm regularization. R(x) = ‖∂f/∂x‖²_F for the encoder map (or the
// full autoencoder). Gradients treat activation slopes as constant, so only
// weights receive a gradient; biases enter R solely through the slopes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "edgerel/data/dataio.hpp"
#include "edgerel/error.hpp"
#include "edgerel/matrix.hpp"
#include "edgerel/metrics/emd.hpp"
#include "edgerel/nn/forward.hpp"
#include "edgerel/nn/train.hpp"

namespace edgerel::jacreg {

enum class JacobianMode { exact, projection };
enum class JacobianTarget { encoder, full };

inline std::string to_string(JacobianMode m) { return m == JacobianMode::exact ? "exact" : "projection"; }
inline std::string to_string(JacobianTarget t) { return t == JacobianTarget::encoder ? "encoder" : "full"; }

inline JacobianMode jacobian_mode_from_string(const std::string& s) {
    if (s == "exact") return JacobianMode::exact;
    if (s == "projection") return JacobianMode::projection;
    throw Error("unknown jacobian mode '" + s + "'");
}

inline JacobianTarget jacobian_target_from_string(const std::string& s) {
    if (s == "encoder") return JacobianTarget::encoder;
    if (s == "full") return JacobianTarget::full;
    throw Error("unknown jacobian target '" + s + "'");
}

struct JacRegConfig {
    double lambda = 0.0;
    JacobianMode mode = JacobianMode::exact;
    int n_proj = 1;
    JacobianTarget target = JacobianTarget::encoder;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("jacreg: lambda must be >= 0");
        if (mode == JacobianMode::projection && n_proj < 1) throw Error("jacreg: n_proj must be >= 1");
    }
};

inline constexpr int kMaxExactOutputs = 64;

inline std::size_t target_layers(const nn::ModelSpec& spec, JacobianTarget t) {
    return t == JacobianTarget::encoder ? static_cast<std::size_t>(spec.encoder_len) : spec.layers.size();
}

// Rows = outputs of the mapped layers, columns = inputs; one reverse pass per
// output. Fake-quant mode differentiates with the straight-through slopes.
inline Matrix jacobian_exact(const nn::Model& model, std::span<const double> theta, std::span<const double> x,
                             nn::Mode mode, std::size_t layer_end) {
    if (layer_end < 1 || layer_end > model.layer_count()) throw Error("jacobian_exact: layer_end out of range");
    const nn::Network net(model, theta, mode);
    nn::Trace t;
    net.forward(x, t, layer_end);
    const std::size_t out = static_cast<std::size_t>(model.spec.layers[layer_end - 1].out_dim);
    Matrix j(out, x.size());
    std::vector<double> e(out, 0.0);
    for (std::size_t i = 0; i < out; ++i) {
        e[i] = 1.0;
        net.backward(t, e, {}, j.row(i), layer_end);
        e[i] = 0.0;
    }
    return j;
}

inline Matrix jacobian_exact(const nn::Model& model, std::span<const double> theta, std::span<const double> x,
                             nn::Mode mode = nn::Mode::floating, JacobianTarget target = JacobianTarget::encoder) {
    return jacobian_exact(model, theta, x, mode, target_layers(model.spec, target));
}

struct RegValue {
    double value = 0.0;
    std::vector<double> grad;
};

namespace detail {

inline void check_supported(const nn::ModelSpec& spec, std::size_t layers, JacobianMode mode) {
    for (std::size_t l = 0; l < layers; ++l)
        if (spec.layers[l].activation == nn::Activation::sigmoid)
            throw Error("jacfrob_grad: sigmoid activation in layer " + std::to_string(l) +
                        " is not supported; the Jacobian gradient assumes piecewise-linear activations");
    if (mode == JacobianMode::exact && spec.layers[layers - 1].out_dim > kMaxExactOutputs)
        throw Error("jacfrob_grad: exact mode needs at most " + std::to_string(kMaxExactOutputs) +
                    " outputs; use projection mode");
}

// One sample, exact mode: J = D_L W_L Q_L with Q_0 = D_0 and
// Q_{l+1} = D_l W_l Q_l; ∂R/∂W_l = 2 V_l Q_lᵀ with V_{L-1} = D_{L-1} J and
// V_{l-1} = D_{l-1} W_lᵀ V_l.
inline double exact_sample(const nn::ModelSpec& spec, std::span<const double> params, const nn::Trace& t,
                           std::size_t layers, std::span<double> grad, std::vector<Matrix>& q) {
    const std::size_t n_in = t.post[0].size();
    q.resize(layers + 1);
    q[0] = Matrix(n_in, n_in);
    for (std::size_t i = 0; i < n_in; ++i) q[0](i, i) = t.input_pass[i];
    for (std::size_t l = 0; l < layers; ++l) {
        const auto& layer = spec.layers[l];
        const auto w = nn::layer_block(spec, params, l).weights;
        Matrix next(layer.out_dim, n_in);
        for (int o = 0; o < layer.out_dim; ++o) {
            const double s = t.slope[l][o];
            if (s == 0.0) continue;
            auto dst = next.row(o);
            for (int i = 0; i < layer.in_dim; ++i) {
                const double c = s * w[static_cast<std::size_t>(o) * layer.in_dim + i];
                if (c == 0.0) continue;
                const auto src = q[l].row(i);
                for (std::size_t k = 0; k < n_in; ++k) dst[k] += c * src[k];
            }
        }
        q[l + 1] = std::move(next);
    }
    const Matrix& j = q[layers];
    double r = 0.0;
    for (double v : j.data()) r += v * v;
    if (grad.empty()) return r;

    Matrix v = j; // D_{L-1} J = J because J's rows already carry D_{L-1}
    for (std::size_t l = layers; l-- > 0;) {
        const auto& layer = spec.layers[l];
        const auto off = spec.layer_offset(l);
        for (int o = 0; o < layer.out_dim; ++o) {
            const auto vr = v.row(o);
            double* g = grad.data() + off + static_cast<std::size_t>(o) * layer.in_dim;
            for (int i = 0; i < layer.in_dim; ++i) {
                const auto qr = q[l].row(i);
                double s = 0.0;
                for (std::size_t k = 0; k < n_in; ++k) s += vr[k] * qr[k];
                g[i] += 2.0 * s;
            }
        }
        if (l == 0) break;
        const auto w = nn::layer_block(spec, params, l).weights;
        Matrix prev(layer.in_dim, n_in);
        for (int o = 0; o < layer.out_dim; ++o) {
            const auto vr = v.row(o);
            for (int i = 0; i < layer.in_dim; ++i) {
                const double c = w[static_cast<std::size_t>(o) * layer.in_dim + i] * t.slope[l - 1][i];
                if (c == 0.0) continue;
                auto dst = prev.row(i);
                for (std::size_t k = 0; k < n_in; ++k) dst[k] += c * vr[k];
            }
        }
        v = std::move(prev);
    }
    return r;
}

// One sample, one direction u on the output sphere: g = Jᵀu,
// R_u = C‖g‖², ∂R_u/∂W_l = 2C (A_lᵀu)(Q_l g)ᵀ.
inline double projection_sample(const nn::ModelSpec& spec, std::span<const double> params, const nn::Trace& t,
                                std::size_t layers, std::span<const double> u, std::span<double> grad,
                                std::vector<std::vector<double>>& a) {
    a.resize(layers);
    std::vector<double> delta(u.begin(), u.end());
    for (std::size_t l = layers; l-- > 0;) {
        const auto& layer = spec.layers[l];
        for (int o = 0; o < layer.out_dim; ++o) delta[o] *= t.slope[l][o];
        a[l] = delta;
        const auto w = nn::layer_block(spec, params, l).weights;
        std::vector<double> next(layer.in_dim, 0.0);
        for (int o = 0; o < layer.out_dim; ++o) {
            if (delta[o] == 0.0) continue;
            for (int i = 0; i < layer.in_dim; ++i) next[i] += w[static_cast<std::size_t>(o) * layer.in_dim + i] * delta[o];
        }
        delta = std::move(next);
    }
    std::vector<double> g(delta.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = delta[i] * t.input_pass[i];
    double r = 0.0;
    for (double v : g) r += v * v;
    const double c = static_cast<double>(u.size());
    if (grad.empty()) return c * r;

    std::vector<double> b(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) b[i] = g[i] * t.input_pass[i];
    for (std::size_t l = 0; l < layers; ++l) {
        const auto& layer = spec.layers[l];
        const auto off = spec.layer_offset(l);
        for (int o = 0; o < layer.out_dim; ++o) {
            const double ao = 2.0 * c * a[l][o];
            if (ao == 0.0) continue;
            double* gr = grad.data() + off + static_cast<std::size_t>(o) * layer.in_dim;
            for (int i = 0; i < layer.in_dim; ++i) gr[i] += ao * b[i];
        }
        if (l + 1 == layers) break;
        const auto w = nn::layer_block(spec, params, l).weights;
        std::vector<double> next(layer.out_dim, 0.0);
        for (int o = 0; o < layer.out_dim; ++o) {
            const auto row = w.subspan(static_cast<std::size_t>(o) * layer.in_dim, layer.in_dim);
            double s = 0.0;
            for (int i = 0; i < layer.in_dim; ++i) s += row[i] * b[i];
            next[o] = t.slope[l][o] * s;
        }
        b = std::move(next);
    }
    return c * r;
}

inline void unit_sphere(std::mt19937_64& rng, std::span<double> u) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    double n = 0.0;
    do {
        n = 0.0;
        for (double& v : u) v = gauss(rng), n += v * v;
    } while (!(n > 0.0));
    n = std::sqrt(n);
    for (double& v : u) v /= n;
}

} // namespace detail

// R = mean over the batch of ‖J(x)‖²_F (exact) or of C·mean_u ‖Jᵀu‖²
// (projection, unbiased). `grad` is overwritten when non-empty.
inline double jacfrob_value_and_gradient(const nn::Model& model, std::span<const double> theta, const Matrix& batch,
                                         const JacRegConfig& cfg, nn::Mode mode, std::uint64_t stream,
                                         std::span<double> grad) {
    cfg.validate();
    if (batch.rows() == 0) throw Error("jacfrob_grad: empty batch");
    const auto& spec = model.spec;
    const std::size_t layers = target_layers(spec, cfg.target);
    detail::check_supported(spec, layers, cfg.mode);
    const nn::Network net(model, theta, mode);
    const auto params = net.effective_parameters();
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    nn::Trace t;
    std::vector<Matrix> q;
    std::vector<std::vector<double>> a;
    std::vector<double> u(static_cast<std::size_t>(spec.layers[layers - 1].out_dim));
    std::mt19937_64 rng(cfg.seed ^ (stream * 0x9e3779b97f4a7c15ULL));
    double sum = 0.0;
    for (std::size_t n = 0; n < batch.rows(); ++n) {
        net.forward(batch.row(n), t, layers);
        if (cfg.mode == JacobianMode::exact) {
            sum += detail::exact_sample(spec, params, t, layers, grad, q);
            continue;
        }
        for (int p = 0; p < cfg.n_proj; ++p) {
            detail::unit_sphere(rng, u);
            sum += detail::projection_sample(spec, params, t, layers, u, grad, a) / cfg.n_proj;
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.rows());
    if (!grad.empty()) {
        // Projection gradients accumulate once per direction.
        const double ginv = cfg.mode == JacobianMode::projection ? inv / cfg.n_proj : inv;
        for (double& g : grad) g *= ginv;
        net.mask_gradient(grad);
    }
    return sum * inv;
}

inline RegValue jacfrob_grad(const nn::Model& model, std::span<const double> theta, const Matrix& batch,
                             const JacRegConfig& cfg, nn::Mode mode = nn::Mode::floating, std::uint64_t stream = 0) {
    RegValue r;
    r.grad.assign(theta.size(), 0.0);
    r.value = jacfrob_value_and_gradient(model, theta, batch, cfg, mode, stream, r.grad);
    return r;
}

// Minimize MSE + (λ/2)·R. The regularizer is always installed so the λ = 0
// trajectory is the plain trainer's trajectory.
inline nn::TrainResult train_robust(const nn::Model& model, const Matrix& x, const Matrix& target,
                                    const nn::TrainConfig& tcfg, const JacRegConfig& jcfg) {
    jcfg.validate();
    detail::check_supported(model.spec, target_layers(model.spec, jcfg.target), jcfg.mode);
    const nn::Mode mode = tcfg.mode();
    nn::Regularizer reg;
    reg.weight = jcfg.lambda;
    reg.term = [&model, &jcfg, mode](std::span<const double> theta, const Matrix& batch, std::uint64_t step,
                                     std::span<double> grad) {
        return jacfrob_value_and_gradient(model, theta, batch, jcfg, mode, step, grad);
    };
    return nn::train(model, x, target, tcfg, &reg);
}

inline nn::TrainResult train_robust(const nn::Model& model, const Matrix& x, const nn::TrainConfig& tcfg,
                                    const JacRegConfig& jcfg) {
    return train_robust(model, x, x, tcfg, jcfg);
}

// Per-sample EMD between reference rows and the model's reconstruction of
// `inputs`, the reconstruction clamped and normalized into a distribution.
inline std::vector<double> reconstruction_emd(const nn::Model& model, std::span<const double> theta,
                                              const Matrix& inputs, const Matrix& reference, nn::Mode mode,
                                              const data::GridGeometry& geometry) {
    if (inputs.rows() != reference.rows()) throw Error("reconstruction_emd: input/reference sample counts differ");
    const auto out = nn::forward(model, theta, inputs, mode).output();
    metrics::EmdSolver solver(geometry);
    std::vector<double> d(out.cols()), emd(inputs.rows());
    for (std::size_t n = 0; n < inputs.rows(); ++n) {
        metrics::to_distribution(out.row(n), d);
        emd[n] = solver.cost(reference.row(n), d);
    }
    return emd;
}

inline double mean(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline double sample_std(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

struct RobustnessPoint {
    double clean = 0.0;
    double noisy = 0.0;
};

// Mean EMD on clean inputs and on noised inputs, both against the clean rows.
inline RobustnessPoint evaluate_robustness(const nn::Model& model, std::span<const double> theta, const Matrix& x,
                                           const data::GridGeometry& geometry, const data::NoiseSpec& noise,
                                           std::span<const double> noise_scale, nn::Mode mode) {
    RobustnessPoint p;
    p.clean = mean(reconstruction_emd(model, theta, x, x, mode, geometry));
    const Matrix xn = data::add_noise(x, noise, noise_scale);
    p.noisy = mean(reconstruction_emd(model, theta, xn, x, mode, geometry));
    return p;
}

struct CurveEntry {
    double lambda = 0.0;
    std::vector<std::uint64_t> seeds;
    std::vector<double> clean;  // per seed
    std::vector<double> noisy;  // per seed
    double clean_mean = 0.0;
    double noisy_mean = 0.0;
    double noisy_std = 0.0;
    double noisy_median = 0.0;
};

struct RobustnessCurve {
    double noise_level = 0.0;
    std::vector<CurveEntry> entries; // requested λ order
};

struct CurveConfig {
    std::vector<double> lambdas{0.0, 1e-3, 1e-2, 1e-1};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    nn::TrainConfig train;
    JacRegConfig jacreg; // lambda and seed overwritten per job
    data::NoiseSpec noise;
    int threads = 1;
};

// Train one model per (λ, seed) on `train_x` and evaluate on `eval_x`. The
// noise draw depends only on noise.seed, so every λ sees the same corruption.
inline RobustnessCurve noise_robustness_curve(const nn::Model& model, const Matrix& train_x, const Matrix& eval_x,
                                              const data::GridGeometry& geometry, const CurveConfig& cfg) {
    if (cfg.seeds.empty()) throw Error("robustness_curve: no seeds");
    const auto scale = data::cell_rms(train_x);
    const nn::Mode mode = cfg.train.mode();
    const std::size_t nl = cfg.lambdas.size(), ns = cfg.seeds.size();
    std::vector<RobustnessPoint> pts(nl * ns);
    std::vector<std::exception_ptr> errors(nl * ns);
    auto job = [&](std::size_t k) {
        try {
            nn::TrainConfig tc = cfg.train;
            tc.seed = cfg.seeds[k % ns];
            JacRegConfig jc = cfg.jacreg;
            jc.lambda = cfg.lambdas[k / ns];
            jc.seed = tc.seed;
            const auto r = train_robust(model, train_x, tc, jc);
            pts[k] = evaluate_robustness(model, r.theta, eval_x, geometry, cfg.noise, scale, mode);
        } catch (...) {
            errors[k] = std::current_exception();
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(cfg.threads, 1)), 1, nl * ns);
    if (workers <= 1) {
        for (std::size_t k = 0; k < nl * ns; ++k) job(k);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t k = w; k < nl * ns; k += workers) job(k);
            });
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    RobustnessCurve c;
    c.noise_level = cfg.noise.level;
    for (std::size_t li = 0; li < nl; ++li) {
        CurveEntry e;
        e.lambda = cfg.lambdas[li];
        e.seeds = cfg.seeds;
        for (std::size_t si = 0; si < ns; ++si) {
            e.clean.push_back(pts[li * ns + si].clean);
            e.noisy.push_back(pts[li * ns + si].noisy);
        }
        e.clean_mean = mean(e.clean);
        e.noisy_mean = mean(e.noisy);
        e.noisy_std = sample_std(e.noisy);
        e.noisy_median = median(e.noisy);
        c.entries.push_back(std::move(e));
    }
    return c;
}

inline void write_curve_csv(std::ostream& out, const RobustnessCurve& c) {
    out << "lambda,clean,noisy_mean,noisy_std\n";
    for (const auto& e : c.entries)
        out << data::format_double(e.lambda) << ',' << data::format_double(e.clean_mean) << ','
            << data::format_double(e.noisy_mean) << ',' << data::format_double(e.noisy_std) << '\n';
}

} // namespace edgerel::jacreg
