#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "edgerel/error.hpp"
#include "edgerel/matrix.hpp"
#include "edgerel/nn/loss.hpp"
#include "edgerel/nn/model.hpp"

namespace edgerel::nn {

struct AdamConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    AdamConfig adam;
    int batch_size = 32;
    int epochs = 20;
    std::uint64_t seed = 1;
    double val_fraction = 0.2;
    bool qat = true;

    Mode mode() const noexcept { return qat ? Mode::fake_quant : Mode::floating; }

    void validate() const {
        // lr == 0 is allowed: it freezes θ at its initialization.
        if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw Error("train: learning rate must be >= 0");
        if (batch_size < 1) throw Error("train: batch_size must be >= 1");
        if (epochs < 0) throw Error("train: epochs must be >= 0");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw Error("train: val_fraction must be in [0, 1)");
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = std::numeric_limits<double>::quiet_NaN(); // NaN when there is no validation split
};

struct StepRecord {
    int epoch = 0;
    int step = 0;
    double mse = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

struct TrainResult {
    std::vector<double> theta;
    std::vector<double> initial;
    std::vector<EpochRecord> history;
    std::vector<StepRecord> steps;
};

// Extra term added to the training objective: total = mse + (weight/2)·R.
// The callback returns R for the minibatch and overwrites `grad` with ∇R.
struct Regularizer {
    double weight = 0.0;
    std::function<double(std::span<const double> theta, const Matrix& batch, std::uint64_t step, std::span<double> grad)>
        term;
};

class Adam {
public:
    Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::span<double> theta, std::span<const double> grad) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
            theta[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
        }
    }

private:
    AdamConfig cfg_;
    std::vector<double> m_, v_;
    int t_ = 0;
};

// Deterministic train/validation split of n samples.
struct Split {
    std::vector<std::size_t> train, val;
};

inline Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed ^ 0x5eed5917ULL);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
    if (n_val >= n) n_val = n - 1;
    Split s;
    s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::sort(s.val.begin(), s.val.end());
    return s;
}

// Minibatch Adam on MSE(x → target), starting from the seeded Glorot
// initialization. QAT uses the fake-quant forward with STE gradients.
inline TrainResult train(const Model& model, const Matrix& x, const Matrix& target, const TrainConfig& cfg,
                         const Regularizer* reg = nullptr) {
    cfg.validate();
    if (x.rows() == 0) throw Error("train: empty dataset");
    if (x.rows() != target.rows()) throw Error("train: inputs and targets differ in sample count");
    const Mode mode = cfg.mode();
    TrainResult r;
    r.theta = initialize(model.spec, cfg.seed);
    r.initial = r.theta;

    const Split split = split_indices(x.rows(), cfg.val_fraction, cfg.seed);
    const Matrix xv = x.select_rows(split.val), tv = target.select_rows(split.val);
    std::vector<std::size_t> order = split.train;
    std::mt19937_64 rng(cfg.seed);
    Adam opt(r.theta.size(), cfg.adam);
    std::vector<double> grad(r.theta.size()), reg_grad(r.theta.size());
    std::uint64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const Matrix xb = x.select_rows(idx), tb = target.select_rows(idx);
            const double mse = mse_value_and_gradient(model, r.theta, xb, tb, mode, grad);
            double rv = 0.0;
            if (reg != nullptr) {
                rv = reg->term(r.theta, xb, step, reg_grad);
                const double half = reg->weight / 2.0;
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += half * reg_grad[i];
            }
            const double total = reg != nullptr ? mse + (reg->weight / 2.0) * rv : mse;
            if (!std::isfinite(total)) throw DivergenceError(epoch, "train: non-finite loss");
            r.steps.push_back({epoch, static_cast<int>(step), mse, rv, total});
            epoch_sum += mse * static_cast<double>(idx.size());
            opt.step(r.theta, grad);
            ++step;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_sum / static_cast<double>(order.size());
        if (xv.rows() > 0) rec.val_loss = mse_value_and_gradient(model, r.theta, xv, tv, mode, {});
        if (!std::isfinite(rec.train_loss) || (xv.rows() > 0 && !std::isfinite(rec.val_loss)))
            throw DivergenceError(epoch, "train: non-finite loss");
        r.history.push_back(rec);
    }
    return r;
}

// Autoencoder convenience: reconstruct the inputs.
inline TrainResult train(const Model& model, const Matrix& x, const TrainConfig& cfg) {
    return train(model, x, x, cfg);
}

} // namespace edgerel::nn
