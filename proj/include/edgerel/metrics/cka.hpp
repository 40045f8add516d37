#pragma once

#include <cmath>
#include <vector>

#include "edgerel/error.hpp"
#include "edgerel/matrix.hpp"

namespace edgerel::metrics {

struct CkaResult {
    double value = 0.0;
    std::size_t samples = 0;
    int layer_a = -1; // layers compared, when taken from models
    int layer_b = -1;
};

namespace detail {

inline Matrix centered(const Matrix& x) {
    Matrix c = x;
    for (std::size_t j = 0; j < x.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < x.rows(); ++i) mean += x(i, j);
        mean /= static_cast<double>(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i) c(i, j) -= mean;
    }
    return c;
}

// ‖AᵀB‖²_F for two n-row matrices.
inline double cross_frobenius_sq(const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
        for (std::size_t k = 0; k < b.cols(); ++k) {
            double v = 0.0;
            for (std::size_t i = 0; i < a.rows(); ++i) v += a(i, j) * b(i, k);
            s += v * v;
        }
    }
    return s;
}

} // namespace detail

// Linear CKA: ‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F) on column-centered activations.
inline CkaResult linear_cka(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows()) throw Error("cka: sample counts differ");
    if (x.rows() < 2) throw Error("cka: needs at least 2 samples");
    const Matrix xc = detail::centered(x), yc = detail::centered(y);
    const double xx = std::sqrt(detail::cross_frobenius_sq(xc, xc));
    const double yy = std::sqrt(detail::cross_frobenius_sq(yc, yc));
    if (!(xx > 0.0) || !(yy > 0.0)) throw Error("cka: input has zero variance");
    return {detail::cross_frobenius_sq(yc, xc) / (xx * yy), x.rows()};
}

} // namespace edgerel::metrics
