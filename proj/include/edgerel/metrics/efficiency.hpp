#pragma once

// Neural efficiency: entropy (bits) of the observed binary activation
// patterns of a layer divided by its neuron count. Neurons are "on" when
// ReLU > 0, sigmoid > 0.5, or linear > that neuron's median over the data.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "edgerel/error.hpp"
#include "edgerel/matrix.hpp"
#include "edgerel/nn/forward.hpp"

namespace edgerel::metrics {

struct EfficiencyReport {
    std::vector<double> per_layer;
    double aggregate = 0.0; // geometric mean of per_layer
};

inline double layer_efficiency(const Matrix& activations, nn::Activation kind) {
    const std::size_t n = activations.rows(), neurons = activations.cols();
    if (n == 0) throw Error("neural_efficiency: empty dataset");
    if (neurons == 0) return 0.0;
    std::vector<double> threshold(neurons, kind == nn::Activation::sigmoid ? 0.5 : 0.0);
    if (kind == nn::Activation::linear) {
        std::vector<double> col(n);
        for (std::size_t j = 0; j < neurons; ++j) {
            for (std::size_t i = 0; i < n; ++i) col[i] = activations(i, j);
            std::sort(col.begin(), col.end());
            threshold[j] = n % 2 ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]);
        }
    }
    std::map<std::string, std::size_t> counts;
    std::string pattern(neurons, '0');
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < neurons; ++j) pattern[j] = activations(i, j) > threshold[j] ? '1' : '0';
        ++counts[pattern];
    }
    double h = 0.0;
    for (const auto& [_, c] : counts) {
        const double p = static_cast<double>(c) / static_cast<double>(n);
        h -= p * std::log2(p);
    }
    return std::clamp(h / static_cast<double>(neurons), 0.0, 1.0);
}

inline double geometric_mean(std::span<const double> v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) {
        if (x <= 0.0) return 0.0;
        s += std::log(x);
    }
    return std::exp(s / static_cast<double>(v.size()));
}

inline EfficiencyReport neural_efficiency(const nn::Model& model, std::span<const double> theta, const Matrix& x,
                                          nn::Mode mode) {
    if (x.rows() == 0) throw Error("neural_efficiency: empty dataset");
    const auto fr = nn::forward(model, theta, x, mode);
    EfficiencyReport r;
    for (std::size_t l = 0; l < model.layer_count(); ++l)
        r.per_layer.push_back(layer_efficiency(fr.activations[l + 1], model.spec.layers[l].activation));
    r.aggregate = geometric_mean(r.per_layer);
    return r;
}

} // namespace edgerel::metrics
