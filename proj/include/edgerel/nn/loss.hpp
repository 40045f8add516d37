#pragma once

#include <cmath>
#include <concepts>
#include <limits>
#include <span>
#include <vector>

#include "edgerel/error.hpp"
#include "edgerel/matrix.hpp"
#include "edgerel/nn/forward.hpp"

namespace edgerel::nn {

// A differentiable scalar function of a flat parameter vector.
template <class F>
concept Objective = requires(const F& f, std::span<const double> theta, std::span<double> grad) {
    { f.dimension() } -> std::convertible_to<std::size_t>;
    { f.value(theta) } -> std::convertible_to<double>;
    { f.value_and_gradient(theta, grad) } -> std::convertible_to<double>;
};

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

// Mean squared error over samples and output cells, accumulated in sample
// order. `grad` is overwritten.
inline double mse_value_and_gradient(const Model& model, std::span<const double> theta, const Matrix& x,
                                     const Matrix& target, Mode mode, std::span<double> grad) {
    if (x.rows() == 0) throw Error("loss_and_grad: empty batch");
    if (target.rows() != x.rows() || target.cols() != static_cast<std::size_t>(model.spec.output_dim()))
        throw Error("loss_and_grad: target shape does not match batch/model output");
    if (mode == Mode::bit_exact) throw Error("loss_and_grad: gradients need float or fake-quant mode");
    const Network net(model, theta, mode);
    const std::size_t layers = model.layer_count();
    const double scale = 1.0 / (static_cast<double>(x.rows()) * static_cast<double>(target.cols()));
    const bool want_grad = !grad.empty();
    if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
    Trace t;
    std::vector<double> dout(target.cols());
    double sum = 0.0;
    for (std::size_t n = 0; n < x.rows(); ++n) {
        net.forward(x.row(n), t, layers);
        const auto& y = t.post[layers];
        const auto tr = target.row(n);
        for (std::size_t k = 0; k < y.size(); ++k) {
            const double e = y[k] - tr[k];
            sum += e * e;
            dout[k] = 2.0 * e * scale;
        }
        if (want_grad) net.backward(t, dout, grad, {}, layers);
    }
    if (want_grad) net.mask_gradient(grad);
    return sum * scale;
}

inline LossGrad loss_and_grad(const Model& model, std::span<const double> theta, const Matrix& x,
                              const Matrix& target, Mode mode) {
    LossGrad r;
    r.grad.assign(theta.size(), 0.0);
    r.loss = mse_value_and_gradient(model, theta, x, target, mode, r.grad);
    return r;
}

// MSE of a model on a fixed batch, as an Objective.
class MseObjective {
public:
    MseObjective(const Model& model, const Matrix& x, const Matrix& target, Mode mode)
        : model_(&model), x_(&x), target_(&target), mode_(mode) {}

    std::size_t dimension() const { return model_->parameter_count(); }
    double value(std::span<const double> theta) const {
        return mse_value_and_gradient(*model_, theta, *x_, *target_, mode_, {});
    }
    double value_and_gradient(std::span<const double> theta, std::span<double> grad) const {
        return mse_value_and_gradient(*model_, theta, *x_, *target_, mode_, grad);
    }

    // Per-layer parameter ranges (used for filter normalization of slices).
    std::vector<std::pair<std::size_t, std::size_t>> blocks() const {
        std::vector<std::pair<std::size_t, std::size_t>> b;
        for (std::size_t l = 0; l < model_->layer_count(); ++l)
            b.emplace_back(model_->spec.layer_offset(l), model_->spec.layers[l].parameter_count());
        return b;
    }

private:
    const Model* model_;
    const Matrix* x_;
    const Matrix* target_;
    Mode mode_;
};

static_assert(Objective<MseObjective>);

inline double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// Hessian-vector product by central differences of the gradient:
// (∇L(θ+εv) − ∇L(θ−εv)) / 2ε with ε = sqrt(eps)·(1+‖θ‖)/‖v‖.
template <Objective F>
std::vector<double> hvp(const F& f, std::span<const double> theta, std::span<const double> v) {
    const double vn = norm2(v);
    if (!(vn > 0.0)) throw Error("hvp: direction vector has zero norm");
    if (v.size() != theta.size() || theta.size() != f.dimension()) throw Error("hvp: dimension mismatch");
    const double eps = std::sqrt(std::numeric_limits<double>::epsilon()) * (1.0 + norm2(theta)) / vn;
    std::vector<double> plus(theta.begin(), theta.end()), minus(theta.begin(), theta.end());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        plus[i] += eps * v[i];
        minus[i] -= eps * v[i];
    }
    std::vector<double> gp(theta.size()), gm(theta.size());
    f.value_and_gradient(plus, gp);
    f.value_and_gradient(minus, gm);
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] = (gp[i] - gm[i]) / (2.0 * eps);
    return gp;
}

} // namespace edgerel::nn
