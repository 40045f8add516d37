#pragma once

// Model file: one JSON document holding the layer spec, every format,
// integer parameter codes per layer, the sigmoid tables, and optionally the
// real-valued master parameters the codes were derived from.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "edgerel/error.hpp"
#include "edgerel/fixedpoint.hpp"
#include "edgerel/nn/model.hpp"

namespace edgerel::io {

using json = nlohmann::json;

inline constexpr int kModelFileVersion = 1;

// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// nlohmann::json objects iterate keys in sorted order, so dump() is canonical.
inline std::string json_hash(const json& j) { return fnv1a_hex(j.dump()); }

inline json format_to_json(const fx::Format& f) {
    return {{"W", f.total_bits},
            {"I", f.int_bits},
            {"signed", f.is_signed},
            {"round", f.rounding == fx::Rounding::half_even ? "rne" : "trn"},
            {"overflow", f.overflow == fx::Overflow::saturate ? "sat" : "wrap"}};
}

namespace detail {

inline void require_keys(const json& j, std::initializer_list<const char*> required,
                         std::initializer_list<const char*> optional, const std::string& where) {
    if (!j.is_object()) throw Error(where + ": expected a JSON object");
    std::string unknown;
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : required) ok |= it.key() == k;
        for (const char* k : optional) ok |= it.key() == k;
        if (!ok) unknown += (unknown.empty() ? "" : ", ") + it.key();
    }
    if (!unknown.empty()) throw Error(where + ": unknown keys: " + unknown);
    for (const char* k : required)
        if (!j.contains(k)) throw Error(where + ": missing key '" + k + "'");
}

} // namespace detail

inline fx::Format format_from_json(const json& j, const std::string& where = "format") {
    detail::require_keys(j, {"W", "I"}, {"signed", "round", "overflow"}, where);
    fx::Format f;
    try {
        f.total_bits = j.at("W").get<int>();
        f.int_bits = j.at("I").get<int>();
        f.is_signed = j.value("signed", true);
        const auto r = j.value("round", std::string("rne"));
        const auto o = j.value("overflow", std::string("sat"));
        if (r == "rne") f.rounding = fx::Rounding::half_even;
        else if (r == "trn") f.rounding = fx::Rounding::truncate;
        else throw Error(where + ": unknown rounding '" + r + "' (rne|trn)");
        if (o == "sat") f.overflow = fx::Overflow::saturate;
        else if (o == "wrap") f.overflow = fx::Overflow::wrap;
        else throw Error(where + ": unknown overflow '" + o + "' (sat|wrap)");
    } catch (const json::exception& e) {
        throw Error(where + ": " + e.what());
    }
    f.validate();
    return f;
}

inline json spec_to_json(const nn::ModelSpec& spec) {
    json layers = json::array();
    for (const auto& l : spec.layers)
        layers.push_back({{"in_dim", l.in_dim},
                          {"out_dim", l.out_dim},
                          {"activation", nn::to_string(l.activation)},
                          {"weight_format", format_to_json(l.weight_format)},
                          {"bias_format", format_to_json(l.bias_format)},
                          {"activation_format", format_to_json(l.activation_format)}});
    return {{"input_format", format_to_json(spec.input_format)}, {"encoder_len", spec.encoder_len}, {"layers", layers}};
}

inline nn::ModelSpec spec_from_json(const json& j) {
    detail::require_keys(j, {"input_format", "encoder_len", "layers"}, {}, "spec");
    nn::ModelSpec spec;
    spec.input_format = format_from_json(j.at("input_format"), "spec.input_format");
    try {
        spec.encoder_len = j.at("encoder_len").get<int>();
        std::size_t k = 0;
        for (const auto& lj : j.at("layers")) {
            const std::string where = "spec.layers[" + std::to_string(k++) + "]";
            detail::require_keys(lj, {"in_dim", "out_dim", "activation", "weight_format", "bias_format", "activation_format"},
                                 {}, where);
            nn::DenseLayerSpec l;
            l.in_dim = lj.at("in_dim").get<int>();
            l.out_dim = lj.at("out_dim").get<int>();
            l.activation = nn::activation_from_string(lj.at("activation").get<std::string>());
            l.weight_format = format_from_json(lj.at("weight_format"), where + ".weight_format");
            l.bias_format = format_from_json(lj.at("bias_format"), where + ".bias_format");
            l.activation_format = format_from_json(lj.at("activation_format"), where + ".activation_format");
            spec.layers.push_back(l);
        }
    } catch (const json::exception& e) {
        throw Error(std::string("spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

// A stored model: the deployable integer codes plus optional master θ.
struct ModelFile {
    nn::Model model;
    std::vector<std::int64_t> codes;
    std::optional<std::vector<double>> theta;
    std::string config_hash; // provenance; empty when unknown
};

inline ModelFile make_model_file(const nn::Model& model, std::span<const double> theta) {
    return {model, nn::encode_parameters(model.spec, theta), std::vector<double>(theta.begin(), theta.end()), {}};
}

inline json model_to_json(const ModelFile& mf) {
    const auto& spec = mf.model.spec;
    json params = json::array();
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const auto b = nn::layer_block(spec, std::span<const std::int64_t>(mf.codes), l);
        params.push_back({{"weights", std::vector<std::int64_t>(b.weights.begin(), b.weights.end())},
                          {"biases", std::vector<std::int64_t>(b.biases.begin(), b.biases.end())}});
    }
    json tables = json::array();
    for (const auto& t : mf.model.tables) tables.push_back(t.codes.empty() ? json(nullptr) : json(t.codes));
    json j = {{"version", kModelFileVersion}, {"spec", spec_to_json(spec)}, {"parameters", params}, {"sigmoid_tables", tables}};
    if (mf.theta) j["theta"] = *mf.theta;
    if (!mf.config_hash.empty()) j["config_hash"] = mf.config_hash;
    return j;
}

// Validates layout, code ranges, and table contents.
inline ModelFile model_from_json(const json& j) {
    detail::require_keys(j, {"version", "spec", "parameters", "sigmoid_tables"}, {"theta", "config_hash"}, "model");
    if (j.at("version") != kModelFileVersion) throw Error("model: unsupported version " + j.at("version").dump());
    ModelFile mf;
    mf.model = nn::Model(spec_from_json(j.at("spec")));
    const auto& spec = mf.model.spec;
    try {
        const auto& params = j.at("parameters");
        if (!params.is_array() || params.size() != spec.layers.size())
            throw Error("model: parameters must hold one entry per layer");
        for (std::size_t l = 0; l < spec.layers.size(); ++l) {
            const auto& layer = spec.layers[l];
            const std::string where = "model.parameters[" + std::to_string(l) + "]";
            detail::require_keys(params[l], {"weights", "biases"}, {}, where);
            const auto w = params[l].at("weights").get<std::vector<std::int64_t>>();
            const auto b = params[l].at("biases").get<std::vector<std::int64_t>>();
            if (w.size() != layer.weight_count() || b.size() != static_cast<std::size_t>(layer.out_dim))
                throw Error(where + ": wrong number of codes");
            auto check = [&](std::int64_t c, const fx::Format& f, const char* what) {
                if (c < f.min_code() || c > f.max_code())
                    throw Error(where + ": " + what + " code " + std::to_string(c) + " outside its format");
            };
            for (auto c : w) check(c, layer.weight_format, "weight");
            for (auto c : b) check(c, layer.bias_format, "bias");
            mf.codes.insert(mf.codes.end(), w.begin(), w.end());
            mf.codes.insert(mf.codes.end(), b.begin(), b.end());
        }
        const auto& tables = j.at("sigmoid_tables");
        if (!tables.is_array() || tables.size() != spec.layers.size())
            throw Error("model: sigmoid_tables must hold one entry per layer");
        for (std::size_t l = 0; l < spec.layers.size(); ++l) {
            const auto& layer = spec.layers[l];
            const std::string where = "model.sigmoid_tables[" + std::to_string(l) + "]";
            if (layer.activation != nn::Activation::sigmoid) {
                if (!tables[l].is_null()) throw Error(where + ": table present for a non-sigmoid layer");
                continue;
            }
            auto codes = tables[l].get<std::vector<std::int64_t>>();
            if (codes.size() != static_cast<std::size_t>(nn::SigmoidTable::size))
                throw Error(where + ": table must have " + std::to_string(nn::SigmoidTable::size) + " entries");
            for (auto c : codes)
                if (c < layer.activation_format.min_code() || c > layer.activation_format.max_code())
                    throw Error(where + ": entry outside the activation format");
            mf.model.tables[l].codes = std::move(codes);
        }
        if (j.contains("theta")) {
            auto theta = j.at("theta").get<std::vector<double>>();
            if (theta.size() != spec.parameter_count()) throw Error("model: theta has wrong length");
            mf.theta = std::move(theta);
        }
        if (j.contains("config_hash")) mf.config_hash = j.at("config_hash").get<std::string>();
    } catch (const json::exception& e) {
        throw Error(std::string("model: ") + e.what());
    }
    return mf;
}

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path + "'");
    out << text;
    if (!out) throw Error("write failed for '" + path + "'");
}

inline json parse_json(const std::string& text, const std::string& where) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw Error(where + ": " + e.what());
    }
}

inline ModelFile load_model(const std::string& path) { return model_from_json(parse_json(read_text(path), path)); }

inline void save_model(const std::string& path, const ModelFile& mf) { write_text(path, model_to_json(mf).dump(1) + "\n"); }

inline std::string model_hash(const ModelFile& mf) { return json_hash(model_to_json(mf)); }

} // namespace edgerel::io
