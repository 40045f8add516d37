#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "edgerel/error.hpp"
#include "edgerel/fixedpoint.hpp"

namespace edgerel::nn {

enum class Activation { relu, sigmoid, linear };

inline std::string to_string(Activation a) {
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::linear: return "linear";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "linear") return Activation::linear;
    throw Error("unknown activation '" + s + "'");
}

struct DenseLayerSpec {
    int in_dim = 0;
    int out_dim = 0;
    Activation activation = Activation::linear;
    fx::Format weight_format;
    fx::Format bias_format;
    fx::Format activation_format;

    std::size_t weight_count() const noexcept { return static_cast<std::size_t>(in_dim) * out_dim; }
    std::size_t parameter_count() const noexcept { return weight_count() + static_cast<std::size_t>(out_dim); }

    // Fractional bits of the integer accumulator for this layer.
    int accumulator_frac(const fx::Format& input_format) const noexcept {
        const int prod = weight_format.frac_bits() + input_format.frac_bits();
        return prod > bias_format.frac_bits() ? prod : bias_format.frac_bits();
    }

    friend bool operator==(const DenseLayerSpec&, const DenseLayerSpec&) = default;
};

struct ModelSpec {
    std::vector<DenseLayerSpec> layers;
    fx::Format input_format = fx::unsigned_format(12, 1);
    // Layers [0, encoder_len) form the encoder (the deployed device).
    int encoder_len = 0;

    int input_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
    int output_dim() const { return layers.empty() ? 0 : layers.back().out_dim; }

    // Format of the activations feeding layer l.
    const fx::Format& input_format_of(std::size_t l) const {
        return l == 0 ? input_format : layers[l - 1].activation_format;
    }

    std::size_t parameter_count() const noexcept {
        std::size_t p = 0;
        for (const auto& l : layers) p += l.parameter_count();
        return p;
    }

    // Offset of layer l's block (weights row-major, then biases) in θ.
    std::size_t layer_offset(std::size_t l) const noexcept {
        std::size_t p = 0;
        for (std::size_t k = 0; k < l; ++k) p += layers[k].parameter_count();
        return p;
    }

    // Format of the parameter at flat index i.
    const fx::Format& parameter_format(std::size_t i) const {
        for (const auto& l : layers) {
            if (i < l.weight_count()) return l.weight_format;
            if (i < l.parameter_count()) return l.bias_format;
            i -= l.parameter_count();
        }
        throw Error("parameter index out of range");
    }

    void validate() const {
        if (layers.empty()) throw Error("model: no layers");
        input_format.validate();
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const auto& l = layers[k];
            if (l.in_dim < 1 || l.out_dim < 1)
                throw Error("model: layer " + std::to_string(k) + " has non-positive dimensions");
            if (k + 1 < layers.size() && l.out_dim != layers[k + 1].in_dim)
                throw Error("model: layer " + std::to_string(k) + " out_dim " + std::to_string(l.out_dim) +
                            " does not chain into in_dim " + std::to_string(layers[k + 1].in_dim));
            l.weight_format.validate();
            l.bias_format.validate();
            l.activation_format.validate();
            const int acc_frac = l.accumulator_frac(input_format_of(k));
            if (acc_frac > 62) throw Error("model: layer " + std::to_string(k) + " accumulator needs too many bits");
        }
        if (encoder_len < 1 || encoder_len > static_cast<int>(layers.size()))
            throw Error("model: encoder_len must be in [1, layer count]");
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// 256-entry sigmoid lookup over [-8, 8) in steps of 1/16; entries are codes in
// the layer's activation format. Shared by fake-quant, bit-exact, and C paths.
struct SigmoidTable {
    static constexpr int size = 256;
    static constexpr int domain_log2_step = 4; // step 2^-4
    static constexpr int domain_min = -8;

    std::vector<std::int64_t> codes;

    static SigmoidTable build(const fx::Format& fmt) {
        SigmoidTable t;
        t.codes.resize(size);
        for (int k = 0; k < size; ++k) {
            const double z = domain_min + (k + 0.5) / (1 << domain_log2_step);
            t.codes[k] = fx::to_code(1.0 / (1.0 + std::exp(-z)), fmt);
        }
        return t;
    }

    static int index_of_real(double z) {
        const double pos = std::floor((z - domain_min) * (1 << domain_log2_step));
        if (pos < 0) return 0;
        if (pos >= size) return size - 1;
        return static_cast<int>(pos);
    }

    // Same index as index_of_real for z = acc * 2^-frac, in integer arithmetic.
    static int index_of_code(std::int64_t acc, int frac) {
        const std::int64_t shifted = acc - (std::int64_t{domain_min} << frac); // acc + 8·2^frac
        const int shift = frac - domain_log2_step;
        const std::int64_t pos = shift >= 0 ? (shifted >> shift) : (shifted << (-shift));
        if (pos < 0) return 0;
        if (pos >= size) return size - 1;
        return static_cast<int>(pos);
    }

    friend bool operator==(const SigmoidTable&, const SigmoidTable&) = default;
};

// A model description together with its derived lookup tables.
struct Model {
    ModelSpec spec;
    std::vector<SigmoidTable> tables; // one per layer, empty unless sigmoid

    Model() = default;
    explicit Model(ModelSpec s) : spec(std::move(s)) {
        spec.validate();
        tables.resize(spec.layers.size());
        for (std::size_t l = 0; l < spec.layers.size(); ++l)
            if (spec.layers[l].activation == Activation::sigmoid)
                tables[l] = SigmoidTable::build(spec.layers[l].activation_format);
    }

    std::size_t parameter_count() const noexcept { return spec.parameter_count(); }
    std::size_t layer_count() const noexcept { return spec.layers.size(); }
};

// Read-only view of one layer's block inside θ.
template <class T>
struct LayerBlock {
    std::span<T> weights; // out_dim rows of in_dim
    std::span<T> biases;
};

template <class T>
LayerBlock<T> layer_block(const ModelSpec& spec, std::span<T> theta, std::size_t l) {
    const auto off = spec.layer_offset(l);
    const auto& layer = spec.layers[l];
    return {theta.subspan(off, layer.weight_count()), theta.subspan(off + layer.weight_count(), layer.out_dim)};
}

struct BenchmarkOptions {
    int input_dim = 48;
    int hidden = 31;
    int latent = 16;
    int weight_bits = 6;
    int weight_int_bits = 1;
    fx::Format input_format = fx::unsigned_format(12, 1);
    fx::Format activation_format = fx::signed_format(16, 6);
    Activation latent_activation = Activation::linear;
    Activation output_activation = Activation::linear;
};

// Dense autoencoder: encoder in→hidden→latent, decoder latent→hidden→in.
// Weights and biases share one uniform width so every stored parameter has
// the same number of bits.
inline ModelSpec benchmark_spec(const BenchmarkOptions& o = {}) {
    const auto wf = fx::signed_format(o.weight_bits, o.weight_int_bits);
    auto layer = [&](int in, int out, Activation a) {
        return DenseLayerSpec{in, out, a, wf, wf, o.activation_format};
    };
    ModelSpec spec;
    spec.input_format = o.input_format;
    spec.layers = {
        layer(o.input_dim, o.hidden, Activation::relu),
        layer(o.hidden, o.latent, o.latent_activation),
        layer(o.latent, o.hidden, Activation::relu),
        layer(o.hidden, o.input_dim, o.output_activation),
    };
    spec.encoder_len = 2;
    spec.validate();
    return spec;
}

// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
inline std::vector<double> initialize(const ModelSpec& spec, std::uint64_t seed) {
    std::vector<double> theta(spec.parameter_count(), 0.0);
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const auto& layer = spec.layers[l];
        const double limit = std::sqrt(6.0 / (layer.in_dim + layer.out_dim));
        std::uniform_real_distribution<double> dist(-limit, limit);
        auto block = layer_block(spec, std::span<double>(theta), l);
        for (auto& w : block.weights) w = dist(rng);
    }
    return theta;
}

// Stored integer codes for θ under each parameter's format.
inline std::vector<std::int64_t> encode_parameters(const ModelSpec& spec, std::span<const double> theta) {
    if (theta.size() != spec.parameter_count()) throw Error("encode_parameters: θ has wrong length");
    std::vector<std::int64_t> codes(theta.size());
    std::size_t i = 0;
    for (const auto& l : spec.layers) {
        for (std::size_t k = 0; k < l.weight_count(); ++k, ++i) codes[i] = fx::to_code(theta[i], l.weight_format);
        for (int k = 0; k < l.out_dim; ++k, ++i) codes[i] = fx::to_code(theta[i], l.bias_format);
    }
    return codes;
}

inline std::vector<double> decode_parameters(const ModelSpec& spec, std::span<const std::int64_t> codes) {
    if (codes.size() != spec.parameter_count()) throw Error("decode_parameters: code vector has wrong length");
    std::vector<double> theta(codes.size());
    std::size_t i = 0;
    for (const auto& l : spec.layers) {
        for (std::size_t k = 0; k < l.weight_count(); ++k, ++i) theta[i] = fx::to_real(codes[i], l.weight_format);
        for (int k = 0; k < l.out_dim; ++k, ++i) theta[i] = fx::to_real(codes[i], l.bias_format);
    }
    return theta;
}

} // namespace edgerel::nn
