#pragma once

// Run configuration. Defaults live in one JSON document; a user file is
// merged over it key by key, and any key absent from the defaults is an
// error. The resolved document is what gets hashed and written next to
// every artifact.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "edgerel/data/dataio.hpp"
#include "edgerel/error.hpp"
#include "edgerel/fault.hpp"
#include "edgerel/jacreg.hpp"
#include "edgerel/landscape.hpp"
#include "edgerel/model_io.hpp"
#include "edgerel/nn/model.hpp"
#include "edgerel/nn/train.hpp"

namespace edgerel::cli {

using json = nlohmann::json;

inline json default_config() {
    return json::parse(R"({
  "seed": 1,
  "model": {
    "hidden": 31,
    "latent": 16,
    "weight_bits": 6,
    "weight_int_bits": 1,
    "input_format": {"W": 12, "I": 1, "signed": false, "round": "rne", "overflow": "sat"},
    "activation_format": {"W": 16, "I": 6, "signed": true, "round": "rne", "overflow": "sat"},
    "latent_activation": "linear",
    "output_activation": "linear"
  },
  "data": {
    "n": 2048,
    "eval_n": 256,
    "grid_x": 8,
    "grid_y": 6,
    "csv": "",
    "eval_csv": "",
    "geometry": "",
    "min_blobs": 1,
    "max_blobs": 3,
    "min_width": 0.5,
    "max_width": 2.0,
    "min_amplitude": 20.0,
    "max_amplitude": 200.0,
    "poisson": true
  },
  "train": {
    "lr": 0.003,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "batch_size": 32,
    "epochs": 20,
    "val_fraction": 0.2,
    "qat": true
  },
  "noise": {"level": 0.05, "seed": 7},
  "fault": {
    "metric": "emd",
    "tau": 0.01,
    "sampled": 0,
    "budget": 0.06,
    "rank_k": 8,
    "rank_tol": 0.001,
    "rank_max_iters": 200,
    "recall_k": [100, 500, 1000, 2000]
  },
  "landscape": {
    "k": 3,
    "tol": 0.001,
    "max_iters": 200,
    "probes": 100,
    "samples": 256,
    "extent": 1.0,
    "resolution": 21,
    "hessian_mode": "float",
    "slice_mode": "fake-quant"
  },
  "jacreg": {
    "lambda": 0.0,
    "mode": "exact",
    "n_proj": 1,
    "target": "encoder",
    "lambdas": [0.0, 0.001, 0.01, 0.1],
    "seeds": [1, 2, 3, 4, 5]
  },
  "study": {
    "widths": [2, 4, 6, 8],
    "seeds": [1, 2, 3],
    "lambdas": [0.0, 0.01]
  },
  "codegen": {"vectors": 1000, "strict": false, "layers": "encoder"}
})");
}

namespace detail {

inline void merge(json& base, const json& user, const std::string& path, std::vector<std::string>& unknown) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) {
            unknown.push_back(key);
            continue;
        }
        auto& slot = base[it.key()];
        if (slot.is_object()) {
            if (!it->is_object()) throw Error("config: '" + key + "' must be an object");
            merge(slot, *it, key, unknown);
        } else {
            slot = *it;
        }
    }
}

} // namespace detail

// Merge `user` over the defaults; every unknown key is reported at once.
inline json resolve_config(const json& user) {
    json cfg = default_config();
    if (user.is_null()) return cfg;
    if (!user.is_object()) throw Error("config: top level must be a JSON object");
    std::vector<std::string> unknown;
    detail::merge(cfg, user, "", unknown);
    if (!unknown.empty()) {
        std::string msg = "config: unknown keys:";
        for (const auto& k : unknown) msg += " " + k;
        throw Error(msg);
    }
    return cfg;
}

inline std::string config_hash(const json& resolved) { return io::json_hash(resolved); }

// Typed view of a resolved configuration.
struct RunConfig {
    json raw;
    std::string hash;
    std::uint64_t seed = 1;

    nn::BenchmarkOptions model;
    data::BlobConfig blobs;
    std::size_t n = 2048;
    std::size_t eval_n = 256;
    int grid_x = 8, grid_y = 6;
    std::string csv, eval_csv, geometry;

    nn::TrainConfig train;
    data::NoiseSpec noise;

    fault::Metric fault_metric = fault::Metric::emd;
    double tau = 0.01;
    std::size_t sampled = 0;
    double budget = 0.06;
    landscape::PowerIterationOptions rank_power;
    std::vector<std::size_t> recall_k;

    landscape::PowerIterationOptions power;
    int probes = 100;
    std::size_t landscape_samples = 256;
    double extent = 1.0;
    int resolution = 21;
    nn::Mode hessian_mode = nn::Mode::floating;
    nn::Mode slice_mode = nn::Mode::fake_quant;

    jacreg::JacRegConfig jacreg;
    std::vector<double> jacreg_lambdas;
    std::vector<std::uint64_t> jacreg_seeds;

    std::vector<int> study_widths;
    std::vector<std::uint64_t> study_seeds;
    std::vector<double> study_lambdas;

    std::size_t codegen_vectors = 1000;
    bool codegen_strict = false;
    bool codegen_full = false;
};

inline nn::Mode mode_from_string(const std::string& s) {
    if (s == "float") return nn::Mode::floating;
    if (s == "fake-quant") return nn::Mode::fake_quant;
    if (s == "bit-exact") return nn::Mode::bit_exact;
    throw Error("unknown mode '" + s + "' (float|fake-quant|bit-exact)");
}

inline RunConfig typed_config(const json& resolved) {
    RunConfig c;
    c.raw = resolved;
    c.hash = config_hash(resolved);
    try {
        const auto& j = resolved;
        c.seed = j.at("seed").get<std::uint64_t>();

        const auto& m = j.at("model");
        c.model.hidden = m.at("hidden").get<int>();
        c.model.latent = m.at("latent").get<int>();
        c.model.weight_bits = m.at("weight_bits").get<int>();
        c.model.weight_int_bits = m.at("weight_int_bits").get<int>();
        c.model.input_format = io::format_from_json(m.at("input_format"), "model.input_format");
        c.model.activation_format = io::format_from_json(m.at("activation_format"), "model.activation_format");
        c.model.latent_activation = nn::activation_from_string(m.at("latent_activation").get<std::string>());
        c.model.output_activation = nn::activation_from_string(m.at("output_activation").get<std::string>());

        const auto& d = j.at("data");
        c.n = d.at("n").get<std::size_t>();
        c.eval_n = d.at("eval_n").get<std::size_t>();
        c.grid_x = d.at("grid_x").get<int>();
        c.grid_y = d.at("grid_y").get<int>();
        c.csv = d.at("csv").get<std::string>();
        c.eval_csv = d.at("eval_csv").get<std::string>();
        c.geometry = d.at("geometry").get<std::string>();
        c.blobs.min_blobs = d.at("min_blobs").get<int>();
        c.blobs.max_blobs = d.at("max_blobs").get<int>();
        c.blobs.min_width = d.at("min_width").get<double>();
        c.blobs.max_width = d.at("max_width").get<double>();
        c.blobs.min_amplitude = d.at("min_amplitude").get<double>();
        c.blobs.max_amplitude = d.at("max_amplitude").get<double>();
        c.blobs.poisson = d.at("poisson").get<bool>();

        const auto& t = j.at("train");
        c.train.adam.lr = t.at("lr").get<double>();
        c.train.adam.beta1 = t.at("beta1").get<double>();
        c.train.adam.beta2 = t.at("beta2").get<double>();
        c.train.adam.eps = t.at("eps").get<double>();
        c.train.batch_size = t.at("batch_size").get<int>();
        c.train.epochs = t.at("epochs").get<int>();
        c.train.val_fraction = t.at("val_fraction").get<double>();
        c.train.qat = t.at("qat").get<bool>();
        c.train.seed = c.seed;
        c.train.validate();

        const auto& nz = j.at("noise");
        c.noise.level = nz.at("level").get<double>();
        c.noise.seed = nz.at("seed").get<std::uint64_t>();
        if (!(c.noise.level >= 0.0)) throw Error("config: noise.level must be >= 0");

        const auto& f = j.at("fault");
        c.fault_metric = fault::metric_from_string(f.at("metric").get<std::string>());
        c.tau = f.at("tau").get<double>();
        c.sampled = f.at("sampled").get<std::size_t>();
        c.budget = f.at("budget").get<double>();
        c.rank_power.k = f.at("rank_k").get<int>();
        c.rank_power.tol = f.at("rank_tol").get<double>();
        c.rank_power.max_iters = f.at("rank_max_iters").get<int>();
        c.rank_power.seed = c.seed;
        c.recall_k = f.at("recall_k").get<std::vector<std::size_t>>();

        const auto& l = j.at("landscape");
        c.power.k = l.at("k").get<int>();
        c.power.tol = l.at("tol").get<double>();
        c.power.max_iters = l.at("max_iters").get<int>();
        c.power.seed = c.seed;
        c.probes = l.at("probes").get<int>();
        c.landscape_samples = l.at("samples").get<std::size_t>();
        c.extent = l.at("extent").get<double>();
        c.resolution = l.at("resolution").get<int>();
        c.hessian_mode = mode_from_string(l.at("hessian_mode").get<std::string>());
        c.slice_mode = mode_from_string(l.at("slice_mode").get<std::string>());

        const auto& jr = j.at("jacreg");
        c.jacreg.lambda = jr.at("lambda").get<double>();
        c.jacreg.mode = jacreg::jacobian_mode_from_string(jr.at("mode").get<std::string>());
        c.jacreg.n_proj = jr.at("n_proj").get<int>();
        c.jacreg.target = jacreg::jacobian_target_from_string(jr.at("target").get<std::string>());
        c.jacreg.seed = c.seed;
        c.jacreg.validate();
        c.jacreg_lambdas = jr.at("lambdas").get<std::vector<double>>();
        c.jacreg_seeds = jr.at("seeds").get<std::vector<std::uint64_t>>();

        const auto& s = j.at("study");
        c.study_widths = s.at("widths").get<std::vector<int>>();
        c.study_seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
        c.study_lambdas = s.at("lambdas").get<std::vector<double>>();

        const auto& g = j.at("codegen");
        c.codegen_vectors = g.at("vectors").get<std::size_t>();
        c.codegen_strict = g.at("strict").get<bool>();
        const auto layers = g.at("layers").get<std::string>();
        if (layers != "encoder" && layers != "full") throw Error("config: codegen.layers must be encoder|full");
        c.codegen_full = layers == "full";
    } catch (const json::exception& e) {
        throw Error(std::string("config: ") + e.what());
    }
    for (double lam : c.jacreg_lambdas)
        if (!(lam >= 0.0)) throw Error("config: jacreg.lambdas must be >= 0");
    for (double lam : c.study_lambdas)
        if (!(lam >= 0.0)) throw Error("config: study.lambdas must be >= 0");
    for (int w : c.study_widths)
        if (w < 2 || w > 32) throw Error("config: study.widths entries must be in [2, 32]");
    if (!(c.tau >= 0.0)) throw Error("config: fault.tau must be >= 0");
    if (!(c.budget >= 0.0 && c.budget <= 1.0)) throw Error("config: fault.budget must be in [0, 1]");
    return c;
}

} // namespace edgerel::cli
