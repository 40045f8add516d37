#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "edgerel/error.hpp"
#include "edgerel/fixedpoint.hpp"
#include "edgerel/matrix.hpp"
#include "edgerel/nn/model.hpp"

namespace edgerel::nn {

enum class Mode { floating, fake_quant, bit_exact };

inline std::string to_string(Mode m) {
    switch (m) {
    case Mode::floating: return "float";
    case Mode::fake_quant: return "fake-quant";
    case Mode::bit_exact: return "bit-exact";
    }
    return "?";
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Per-sample record of a real-valued forward pass.
struct Trace {
    std::vector<std::vector<double>> post; // post[0] = input as seen, post[l+1] = layer l output
    std::vector<std::vector<double>> pre;  // pre-activations per layer
    std::vector<std::vector<double>> slope; // d post / d pre, zero where the quantizer saturates
    std::vector<double> input_pass;         // d post[0] / d x
    std::vector<double> delta, next;        // reverse-pass scratch
};

// Real-valued evaluator bound to one parameter vector. In fake-quant mode
// parameters, inputs, and activations pass through quantize() and gradients
// use the straight-through estimator (1 inside the representable range, 0
// where saturated).
class Network {
public:
    Network(const Model& model, std::span<const double> theta, Mode mode)
        : model_(&model), mode_(mode), params_(theta.begin(), theta.end()), pass_(theta.size(), 1.0) {
        if (mode == Mode::bit_exact) throw Error("Network: bit-exact mode runs on integer codes, use forward_codes");
        if (theta.size() != model.parameter_count())
            throw Error("Network: θ has length " + std::to_string(theta.size()) + ", model needs " +
                        std::to_string(model.parameter_count()));
        if (mode == Mode::fake_quant) {
            for (std::size_t i = 0; i < params_.size(); ++i) {
                const auto& fmt = model.spec.parameter_format(i);
                pass_[i] = fx::in_range(theta[i], fmt) ? 1.0 : 0.0;
                params_[i] = fx::quantize(theta[i], fmt);
            }
        }
    }

    const Model& model() const noexcept { return *model_; }
    Mode mode() const noexcept { return mode_; }
    std::span<const double> effective_parameters() const noexcept { return params_; }

    // Zero the gradient entries of saturated parameters (STE).
    void mask_gradient(std::span<double> grad) const {
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= pass_[i];
    }

    void forward(std::span<const double> x, Trace& t, std::size_t layer_end) const {
        const auto& spec = model_->spec;
        if (x.size() != static_cast<std::size_t>(spec.input_dim()))
            throw Error("forward: input has " + std::to_string(x.size()) + " values, model expects " +
                        std::to_string(spec.input_dim()));
        t.post.resize(layer_end + 1);
        t.pre.resize(layer_end);
        t.slope.resize(layer_end);
        t.post[0].assign(x.begin(), x.end());
        t.input_pass.assign(x.size(), 1.0);
        if (mode_ == Mode::fake_quant) {
            for (std::size_t i = 0; i < x.size(); ++i) {
                t.input_pass[i] = fx::in_range(x[i], spec.input_format) ? 1.0 : 0.0;
                t.post[0][i] = fx::quantize(x[i], spec.input_format);
            }
        }
        const std::span<const double> theta(params_);
        for (std::size_t l = 0; l < layer_end; ++l) {
            const auto& layer = spec.layers[l];
            const auto block = layer_block(spec, theta, l);
            const auto& in = t.post[l];
            auto& z = t.pre[l];
            auto& a = t.post[l + 1];
            auto& s = t.slope[l];
            z.resize(layer.out_dim);
            a.resize(layer.out_dim);
            s.resize(layer.out_dim);
            for (int o = 0; o < layer.out_dim; ++o) {
                double acc = block.biases[o];
                const auto row = block.weights.subspan(static_cast<std::size_t>(o) * layer.in_dim, layer.in_dim);
                for (int i = 0; i < layer.in_dim; ++i) acc += row[i] * in[i];
                z[o] = acc;
                activate(l, acc, a[o], s[o]);
            }
        }
    }

    // Reverse pass from dL/d(output of layer_end-1). Accumulates parameter
    // gradients into `grad` (unmasked) and writes dL/dx into `dinput` when
    // the respective span is non-empty.
    void backward(Trace& t, std::span<const double> dout, std::span<double> grad, std::span<double> dinput,
                  std::size_t layer_end) const {
        const auto& spec = model_->spec;
        const std::span<const double> theta(params_);
        t.delta.assign(dout.begin(), dout.end());
        for (std::size_t l = layer_end; l-- > 0;) {
            const auto& layer = spec.layers[l];
            const auto block = layer_block(spec, theta, l);
            const auto& in = t.post[l];
            for (int o = 0; o < layer.out_dim; ++o) t.delta[o] *= t.slope[l][o];
            if (!grad.empty()) {
                const auto off = spec.layer_offset(l);
                for (int o = 0; o < layer.out_dim; ++o) {
                    const double d = t.delta[o];
                    if (d == 0.0) continue;
                    double* g = grad.data() + off + static_cast<std::size_t>(o) * layer.in_dim;
                    for (int i = 0; i < layer.in_dim; ++i) g[i] += d * in[i];
                    grad[off + layer.weight_count() + o] += d;
                }
            }
            if (l == 0 && dinput.empty()) break;
            t.next.assign(layer.in_dim, 0.0);
            for (int o = 0; o < layer.out_dim; ++o) {
                const double d = t.delta[o];
                if (d == 0.0) continue;
                const auto row = block.weights.subspan(static_cast<std::size_t>(o) * layer.in_dim, layer.in_dim);
                for (int i = 0; i < layer.in_dim; ++i) t.next[i] += row[i] * d;
            }
            t.delta.swap(t.next);
        }
        if (!dinput.empty())
            for (std::size_t i = 0; i < dinput.size(); ++i) dinput[i] = t.delta[i] * t.input_pass[i];
    }

private:
    void activate(std::size_t l, double z, double& out, double& slope) const {
        const auto& layer = model_->spec.layers[l];
        double a = z;
        switch (layer.activation) {
        case Activation::relu:
            a = z > 0.0 ? z : 0.0;
            slope = z > 0.0 ? 1.0 : 0.0;
            break;
        case Activation::sigmoid:
            a = sigmoid(z);
            slope = a * (1.0 - a);
            break;
        case Activation::linear:
            slope = 1.0;
            break;
        }
        if (mode_ == Mode::fake_quant) {
            const auto& fmt = layer.activation_format;
            if (!fx::in_range(a, fmt)) slope = 0.0;
            if (layer.activation == Activation::sigmoid)
                a = fx::to_real(model_->tables[l].codes[SigmoidTable::index_of_real(z)], fmt);
            else
                a = fx::quantize(a, fmt);
        }
        out = a;
    }

    const Model* model_;
    Mode mode_;
    std::vector<double> params_;
    std::vector<double> pass_;
};

// Integer interpreter state for one sample: accumulators and output codes.
struct CodeTrace {
    std::vector<std::vector<std::int64_t>> acc;  // per layer, at the layer's accumulator scale
    std::vector<std::vector<std::int64_t>> post; // post[0] = input codes
};

inline std::int64_t activate_code(const Model& model, std::size_t l, std::int64_t acc, int acc_frac) {
    const auto& layer = model.spec.layers[l];
    switch (layer.activation) {
    case Activation::relu: return fx::rescale(acc > 0 ? acc : 0, acc_frac, layer.activation_format);
    case Activation::linear: return fx::rescale(acc, acc_frac, layer.activation_format);
    case Activation::sigmoid: return model.tables[l].codes[SigmoidTable::index_of_code(acc, acc_frac)];
    }
    return 0;
}

// One layer of integer inference; the emitted C mirrors this exactly.
inline void layer_codes(const Model& model, std::span<const std::int64_t> codes, std::size_t l,
                        std::span<const std::int64_t> in, std::vector<std::int64_t>& acc,
                        std::vector<std::int64_t>& out) {
    const auto& spec = model.spec;
    const auto& layer = spec.layers[l];
    const auto& in_fmt = spec.input_format_of(l);
    const int acc_frac = layer.accumulator_frac(in_fmt);
    const int prod_shift = acc_frac - layer.weight_format.frac_bits() - in_fmt.frac_bits();
    const int bias_shift = acc_frac - layer.bias_format.frac_bits();
    const auto block = layer_block(spec, codes, l);
    acc.resize(layer.out_dim);
    out.resize(layer.out_dim);
    for (int o = 0; o < layer.out_dim; ++o) {
        const auto row = block.weights.subspan(static_cast<std::size_t>(o) * layer.in_dim, layer.in_dim);
        std::int64_t sum = 0;
        for (int i = 0; i < layer.in_dim; ++i) sum += row[i] * in[i];
        const std::int64_t a = (sum << prod_shift) + (block.biases[o] << bias_shift);
        acc[o] = a;
        out[o] = activate_code(model, l, a, acc_frac);
    }
}

// Bit-exact inference of layers [0, layer_end) on integer codes.
inline void forward_codes(const Model& model, std::span<const std::int64_t> codes,
                          std::span<const std::int64_t> input, CodeTrace& t, std::size_t layer_end) {
    const auto& spec = model.spec;
    if (codes.size() != spec.parameter_count()) throw Error("forward_codes: parameter code vector has wrong length");
    if (input.size() != static_cast<std::size_t>(spec.input_dim()))
        throw Error("forward_codes: input has " + std::to_string(input.size()) + " codes, model expects " +
                    std::to_string(spec.input_dim()));
    t.acc.resize(layer_end);
    t.post.resize(layer_end + 1);
    t.post[0].assign(input.begin(), input.end());
    for (std::size_t l = 0; l < layer_end; ++l) layer_codes(model, codes, l, t.post[l], t.acc[l], t.post[l + 1]);
}

inline std::vector<std::int64_t> encode_input(const ModelSpec& spec, std::span<const double> x) {
    std::vector<std::int64_t> c(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) c[i] = fx::to_code(x[i], spec.input_format);
    return c;
}

// Per-layer activations (rows = samples); activations[0] is the input as the
// network sees it.
struct ForwardResult {
    std::vector<Matrix> activations;
    const Matrix& output() const { return activations.back(); }
};

inline ForwardResult forward(const Model& model, std::span<const double> theta, const Matrix& x, Mode mode,
                             std::size_t layer_end) {
    const auto& spec = model.spec;
    if (layer_end > spec.layers.size()) throw Error("forward: layer_end exceeds layer count");
    if (x.cols() != static_cast<std::size_t>(spec.input_dim()))
        throw Error("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                    std::to_string(spec.input_dim()));
    ForwardResult r;
    r.activations.emplace_back(x.rows(), x.cols());
    for (std::size_t l = 0; l < layer_end; ++l) r.activations.emplace_back(x.rows(), spec.layers[l].out_dim);

    if (mode == Mode::bit_exact) {
        const auto codes = encode_parameters(spec, theta);
        CodeTrace t;
        for (std::size_t n = 0; n < x.rows(); ++n) {
            forward_codes(model, codes, encode_input(spec, x.row(n)), t, layer_end);
            for (std::size_t l = 0; l <= layer_end; ++l) {
                const auto& fmt = l == 0 ? spec.input_format : spec.layers[l - 1].activation_format;
                auto dst = r.activations[l].row(n);
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = fx::to_real(t.post[l][k], fmt);
            }
        }
        return r;
    }

    const Network net(model, theta, mode);
    Trace t;
    for (std::size_t n = 0; n < x.rows(); ++n) {
        net.forward(x.row(n), t, layer_end);
        for (std::size_t l = 0; l <= layer_end; ++l) std::copy(t.post[l].begin(), t.post[l].end(), r.activations[l].row(n).begin());
    }
    return r;
}

inline ForwardResult forward(const Model& model, std::span<const double> theta, const Matrix& x, Mode mode) {
    return forward(model, theta, x, mode, model.layer_count());
}

} // namespace edgerel::nn
