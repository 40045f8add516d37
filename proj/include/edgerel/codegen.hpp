#pragma once

// C99 emitter for the integer interpreter. The inference file includes only
// <stdint.h>; every helper mirrors fx::rescale and activate_code exactly and
// avoids implementation-defined shifts of negative values.

#include <cctype>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "edgerel/data/dataio.hpp"
#include "edgerel/error.hpp"
#include "edgerel/fixedpoint.hpp"
#include "edgerel/model_io.hpp"
#include "edgerel/nn/forward.hpp"

namespace edgerel::codegen {

struct Options {
    int layer_end = -1; // -1: the encoder
    bool strict = false; // reject master parameters that saturated when encoded
    std::string prefix = "edgerel_model";
};

struct GoldenVectors {
    std::vector<std::vector<std::int64_t>> inputs;
    std::vector<std::vector<std::int64_t>> expected;
};

struct EmittedSource {
    std::string header;  // model.h
    std::string model;   // model.c
    std::string harness; // harness.c
    nlohmann::json manifest;
    GoldenVectors vectors;
};

namespace detail {

inline bool fits_int32(const fx::Format& f) {
    return f.min_code() >= INT32_MIN && f.max_code() <= INT32_MAX;
}

inline std::string i64(std::int64_t v) {
    // INT64_MIN has no literal; it is never emitted (codes fit in 32 bits).
    return v < 0 ? "(" + std::to_string(v) + ")" : std::to_string(v);
}

inline std::string pow2(int k) { return "((int64_t)1 << " + std::to_string(k) + ")"; }

template <class It>
void emit_list(std::ostringstream& o, It first, It last, const std::string& indent) {
    std::size_t k = 0;
    for (auto it = first; it != last; ++it, ++k) {
        if (k % 16 == 0) o << (k ? ",\n" : "") << indent;
        else o << ", ";
        o << *it;
    }
    o << '\n';
}

// Scales of one emitted layer; all shifts are relative to the accumulator.
struct LayerPlan {
    std::size_t index;
    nn::DenseLayerSpec layer;
    int acc_frac;
    int prod_shift;
    int bias_shift;
    int out_shift; // acc_frac - activation frac
};

} // namespace detail

inline void check_emittable(const io::ModelFile& mf, std::size_t layer_end, bool strict) {
    const auto& spec = mf.model.spec;
    if (layer_end < 1 || layer_end > spec.layers.size()) throw Error("codegen: layer range out of bounds");
    if (!detail::fits_int32(spec.input_format)) throw Error("codegen: input format does not fit int32 codes");
    for (std::size_t l = 0; l < layer_end; ++l) {
        const auto& layer = spec.layers[l];
        const std::string name = "layer " + std::to_string(l);
        if (!detail::fits_int32(layer.weight_format) || !detail::fits_int32(layer.bias_format) ||
            !detail::fits_int32(layer.activation_format))
            throw Error("codegen: " + name + " has a format whose codes do not fit int32");
        const int acc_frac = layer.accumulator_frac(spec.input_format_of(l));
        if (acc_frac > 62) throw Error("codegen: " + name + " accumulator scale exceeds 62 fractional bits");
    }
    if (strict && mf.theta) {
        for (std::size_t i = 0; i < spec.layer_offset(layer_end); ++i) {
            const auto& f = spec.parameter_format(i);
            if (!fx::in_range((*mf.theta)[i], f))
                throw Error("codegen: strict mode: parameter " + std::to_string(i) + " value " +
                            data::format_double((*mf.theta)[i]) + " saturates in its format (stored code " +
                            std::to_string(mf.codes[i]) + ")");
        }
    }
}

inline std::string emit_header(const io::ModelFile& mf, std::size_t layer_end, const std::string& prefix) {
    const auto& spec = mf.model.spec;
    std::string guard = prefix + "_H";
    for (char& c : guard) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    std::ostringstream o;
    o << "/* Generated; bit-exact integer inference. */\n"
      << "#ifndef " << guard << "\n#define " << guard << "\n\n#include <stdint.h>\n\n"
      << "#define " << guard.substr(0, guard.size() - 2) << "_INPUTS " << spec.input_dim() << "\n"
      << "#define " << guard.substr(0, guard.size() - 2) << "_OUTPUTS " << spec.layers[layer_end - 1].out_dim << "\n\n"
      << "void " << prefix << "_infer(const int32_t *in, int32_t *out);\n\n#endif\n";
    return o.str();
}

inline std::string emit_model_source(const io::ModelFile& mf, std::size_t layer_end, const std::string& prefix) {
    const auto& spec = mf.model.spec;
    std::vector<detail::LayerPlan> plan;
    bool need_rne = false, need_floor = false, need_sat = false, need_wrap = false;
    for (std::size_t l = 0; l < layer_end; ++l) {
        const auto& layer = spec.layers[l];
        const auto& in_fmt = spec.input_format_of(l);
        detail::LayerPlan p{l, layer, layer.accumulator_frac(in_fmt), 0, 0, 0};
        p.prod_shift = p.acc_frac - layer.weight_format.frac_bits() - in_fmt.frac_bits();
        p.bias_shift = p.acc_frac - layer.bias_format.frac_bits();
        p.out_shift = p.acc_frac - layer.activation_format.frac_bits();
        plan.push_back(p);
        if (layer.activation == nn::Activation::sigmoid) {
            need_floor |= p.acc_frac > nn::SigmoidTable::domain_log2_step;
            continue;
        }
        const auto& f = layer.activation_format;
        if (p.out_shift > 0) {
            need_floor = true;
            need_rne |= f.rounding == fx::Rounding::half_even;
        }
        (f.overflow == fx::Overflow::saturate ? need_sat : need_wrap) = true;
    }

    std::ostringstream o;
    o << "/* Generated; bit-exact integer inference. Do not edit. */\n#include <stdint.h>\n\n"
      << "void " << prefix << "_infer(const int32_t *in, int32_t *out);\n\n";
    if (need_floor) {
        o << "/* floor(v / 2^s) without shifting a negative operand */\n"
          << "static int64_t floor_shift(int64_t v, int s)\n{\n"
          << "    return v >= 0 ? (v >> s) : -((-v - 1) >> s) - 1;\n}\n\n";
    }
    if (need_rne) {
        o << "static int64_t rshift_rne(int64_t v, int s)\n{\n"
          << "    int64_t q = floor_shift(v, s);\n"
          << "    int64_t rem = v - q * ((int64_t)1 << s);\n"
          << "    int64_t half = (int64_t)1 << (s - 1);\n"
          << "    if (rem > half || (rem == half && (q & 1) != 0)) q += 1;\n"
          << "    return q;\n}\n\n";
    }
    if (need_sat) {
        o << "static int64_t saturate(int64_t v, int64_t lo, int64_t hi)\n{\n"
          << "    return v < lo ? lo : (v > hi ? hi : v);\n}\n\n";
    }
    if (need_wrap) {
        o << "static int64_t wrap(int64_t v, int bits, int is_signed)\n{\n"
          << "    uint64_t mask = ((uint64_t)1 << bits) - 1u;\n"
          << "    uint64_t u = (uint64_t)v & mask;\n"
          << "    if (is_signed && (u >> (bits - 1)) != 0u) return (int64_t)u - ((int64_t)1 << bits);\n"
          << "    return (int64_t)u;\n}\n\n";
    }

    for (const auto& p : plan) {
        const auto b = nn::layer_block(spec, std::span<const std::int64_t>(mf.codes), p.index);
        const auto L = std::to_string(p.index);
        o << "static const int32_t W" << L << "[" << p.layer.out_dim << "][" << p.layer.in_dim << "] = {\n";
        for (int r = 0; r < p.layer.out_dim; ++r) {
            o << "    {\n";
            const auto row = b.weights.subspan(static_cast<std::size_t>(r) * p.layer.in_dim, p.layer.in_dim);
            detail::emit_list(o, row.begin(), row.end(), "        ");
            o << "    }" << (r + 1 < p.layer.out_dim ? "," : "") << "\n";
        }
        o << "};\n\nstatic const int32_t B" << L << "[" << p.layer.out_dim << "] = {\n";
        detail::emit_list(o, b.biases.begin(), b.biases.end(), "    ");
        o << "};\n\n";
        if (p.layer.activation == nn::Activation::sigmoid) {
            const auto& t = mf.model.tables[p.index].codes;
            o << "static const int32_t S" << L << "[" << nn::SigmoidTable::size << "] = {\n";
            detail::emit_list(o, t.begin(), t.end(), "    ");
            o << "};\n\n";
        }
    }

    o << "void " << prefix << "_infer(const int32_t *in, int32_t *out)\n{\n";
    for (std::size_t l = 0; l + 1 < plan.size(); ++l)
        o << "    int32_t a" << l + 1 << "[" << plan[l].layer.out_dim << "];\n";
    o << "    int o, i;\n";
    for (std::size_t l = 0; l < plan.size(); ++l) {
        const auto& p = plan[l];
        const auto L = std::to_string(l);
        const std::string src = l == 0 ? "in" : "a" + L;
        const std::string dst = l + 1 == plan.size() ? "out" : "a" + std::to_string(l + 1);
        const auto& f = p.layer.activation_format;
        o << "\n    /* layer " << L << ": " << p.layer.in_dim << " -> " << p.layer.out_dim << ", "
          << nn::to_string(p.layer.activation) << " */\n"
          << "    for (o = 0; o < " << p.layer.out_dim << "; ++o) {\n"
          << "        int64_t acc = 0;\n"
          << "        for (i = 0; i < " << p.layer.in_dim << "; ++i) acc += (int64_t)W" << L << "[o][i] * (int64_t)"
          << src << "[i];\n";
        o << "        acc = acc" << (p.prod_shift ? " * " + detail::pow2(p.prod_shift) : "") << " + (int64_t)B" << L
          << "[o]" << (p.bias_shift ? " * " + detail::pow2(p.bias_shift) : "") << ";\n";
        if (p.layer.activation == nn::Activation::sigmoid) {
            const int shift = p.acc_frac - nn::SigmoidTable::domain_log2_step;
            const std::string offset = "acc + " + std::to_string(-nn::SigmoidTable::domain_min) + " * " +
                                       detail::pow2(p.acc_frac);
            o << "        {\n            int64_t pos = ";
            if (shift > 0) o << "floor_shift(" << offset << ", " << shift << ");\n";
            else if (shift < 0) o << "(" << offset << ") * " << detail::pow2(-shift) << ";\n";
            else o << offset << ";\n";
            o << "            if (pos < 0) pos = 0;\n"
              << "            if (pos > " << nn::SigmoidTable::size - 1 << ") pos = " << nn::SigmoidTable::size - 1 << ";\n"
              << "            " << dst << "[o] = S" << L << "[pos];\n        }\n    }\n";
            continue;
        }
        if (p.layer.activation == nn::Activation::relu) o << "        if (acc < 0) acc = 0;\n";
        std::string v = "acc";
        if (p.out_shift > 0)
            v = (f.rounding == fx::Rounding::half_even ? "rshift_rne(acc, " : "floor_shift(acc, ") +
                std::to_string(p.out_shift) + ")";
        else if (p.out_shift < 0)
            v = "acc * " + detail::pow2(-p.out_shift);
        if (f.overflow == fx::Overflow::saturate)
            v = "saturate(" + v + ", " + detail::i64(f.min_code()) + ", " + detail::i64(f.max_code()) + ")";
        else
            v = "wrap(" + v + ", " + std::to_string(f.total_bits) + ", " + (f.is_signed ? "1" : "0") + ")";
        o << "        " << dst << "[o] = (int32_t)" << v << ";\n    }\n";
    }
    o << "}\n";
    return o.str();
}

// Uniform random input codes over the input format and the interpreter's
// output codes for them.
inline GoldenVectors golden_vectors(const io::ModelFile& mf, std::size_t layer_end, std::size_t n, std::uint64_t seed) {
    if (n < 1) throw Error("codegen: harness needs at least one vector");
    const auto& spec = mf.model.spec;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int64_t> dist(spec.input_format.min_code(), spec.input_format.max_code());
    GoldenVectors g;
    nn::CodeTrace t;
    for (std::size_t k = 0; k < n; ++k) {
        std::vector<std::int64_t> in(static_cast<std::size_t>(spec.input_dim()));
        for (auto& c : in) c = dist(rng);
        nn::forward_codes(mf.model, mf.codes, in, t, layer_end);
        g.expected.push_back(t.post[layer_end]);
        g.inputs.push_back(std::move(in));
    }
    return g;
}

inline std::string emit_harness(const GoldenVectors& g, const std::string& prefix) {
    if (g.inputs.empty() || g.inputs.size() != g.expected.size()) throw Error("codegen: malformed golden vectors");
    const std::size_t n_in = g.inputs[0].size(), n_out = g.expected[0].size();
    std::ostringstream o;
    o << "/* Generated conformance harness. */\n#include <stdint.h>\n#include <stdio.h>\n\n"
      << "void " << prefix << "_infer(const int32_t *in, int32_t *out);\n\n"
      << "#define N_VECTORS " << g.inputs.size() << "\n#define N_IN " << n_in << "\n#define N_OUT " << n_out << "\n\n"
      << "static const int32_t inputs[N_VECTORS][N_IN] = {\n";
    for (std::size_t k = 0; k < g.inputs.size(); ++k) {
        o << "    {\n";
        detail::emit_list(o, g.inputs[k].begin(), g.inputs[k].end(), "        ");
        o << "    }" << (k + 1 < g.inputs.size() ? "," : "") << "\n";
    }
    o << "};\n\nstatic const int32_t expected[N_VECTORS][N_OUT] = {\n";
    for (std::size_t k = 0; k < g.expected.size(); ++k) {
        o << "    {\n";
        detail::emit_list(o, g.expected[k].begin(), g.expected[k].end(), "        ");
        o << "    }" << (k + 1 < g.expected.size() ? "," : "") << "\n";
    }
    o << "};\n\n"
      << "int main(void)\n{\n"
      << "    int32_t out[N_OUT];\n"
      << "    long v, i;\n"
      << "    for (v = 0; v < N_VECTORS; ++v) {\n"
      << "        " << prefix << "_infer(inputs[v], out);\n"
      << "        for (i = 0; i < N_OUT; ++i) {\n"
      << "            if (out[i] != expected[v][i]) {\n"
      << "                printf(\"mismatch vector=%ld index=%ld got=%ld want=%ld\\n\", v, i, (long)out[i], "
         "(long)expected[v][i]);\n"
      << "                return 1;\n"
      << "            }\n"
      << "        }\n"
      << "    }\n"
      << "    printf(\"ok %d vectors\\n\", N_VECTORS);\n"
      << "    return 0;\n}\n";
    return o.str();
}

inline EmittedSource emit(const io::ModelFile& mf, std::size_t n_vectors, std::uint64_t seed, const Options& opt = {}) {
    const auto& spec = mf.model.spec;
    const std::size_t layer_end = opt.layer_end < 0 ? static_cast<std::size_t>(spec.encoder_len)
                                                    : static_cast<std::size_t>(opt.layer_end);
    check_emittable(mf, layer_end, opt.strict);
    EmittedSource e;
    e.header = emit_header(mf, layer_end, opt.prefix);
    e.model = emit_model_source(mf, layer_end, opt.prefix);
    e.vectors = golden_vectors(mf, layer_end, n_vectors, seed);
    e.harness = emit_harness(e.vectors, opt.prefix);
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < layer_end; ++l) {
        const auto& layer = spec.layers[l];
        layers.push_back({{"in_dim", layer.in_dim},
                          {"out_dim", layer.out_dim},
                          {"activation", nn::to_string(layer.activation)},
                          {"weight_format", io::format_to_json(layer.weight_format)},
                          {"bias_format", io::format_to_json(layer.bias_format)},
                          {"activation_format", io::format_to_json(layer.activation_format)}});
    }
    e.manifest = {{"model_hash", io::model_hash(mf)},
                  {"input_format", io::format_to_json(spec.input_format)},
                  {"layers", layers},
                  {"vector_count", n_vectors},
                  {"seed", seed},
                  {"function", opt.prefix + "_infer"},
                  {"files", {"model.h", "model.c", "harness.c"}}};
    return e;
}

} // namespace edgerel::codegen
