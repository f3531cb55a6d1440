#include "gcp/kernels.hpp"

#include <algorithm>
#include <cmath>

// Reference kernels. These define the semantics; the AVX2 variants must agree
// with them (bitwise for elementwise ops, up to reassociation for reductions).
namespace gcp::kernels::detail {

void affine_scalar(const double* w, const double* bias, const double* x,
                   double* y, std::size_t rows, std::size_t cols) noexcept {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* wr = w + r * cols;
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
        y[r] = bias ? acc + bias[r] : acc;
    }
}

void matvec_t_accum_scalar(const double* w, const double* dy, double* dx,
                           std::size_t rows, std::size_t cols) noexcept {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* wr = w + r * cols;
        const double a = dy[r];
        for (std::size_t c = 0; c < cols; ++c) dx[c] = std::fma(a, wr[c], dx[c]);
    }
}

void rank1_bias_accum_scalar(double* dw, double* db, const double* dy,
                             const double* x, std::size_t rows,
                             std::size_t cols) noexcept {
    for (std::size_t r = 0; r < rows; ++r) {
        double* dwr = dw + r * cols;
        const double a = dy[r];
        for (std::size_t c = 0; c < cols; ++c) dwr[c] = std::fma(a, x[c], dwr[c]);
        if (db) db[r] += a;
    }
}

double dot_scalar(const double* a, const double* b, std::size_t n) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double squared_distance_scalar(const double* a, const double* b,
                               std::size_t n) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

void axpy_scalar(double a, const double* x, double* y, std::size_t n) noexcept {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

void scale_scalar(double a, double* x, std::size_t n) noexcept {
    for (std::size_t i = 0; i < n; ++i) x[i] *= a;
}

double reduce_max_scalar(const double* x, std::size_t n) noexcept {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

double reduce_sum_scalar(const double* x, std::size_t n) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

void adamw_update_scalar(double* w, double* m, double* v, const double* g,
                         std::size_t n, double lr, double beta1, double beta2,
                         double eps, double weight_decay, double bias_c1,
                         double bias_c2) noexcept {
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = std::fma(beta1, m[i], (1.0 - beta1) * g[i]);
        v[i] = std::fma(beta2, v[i], (1.0 - beta2) * (g[i] * g[i]));
        const double mhat = m[i] / bias_c1;
        const double vhat = v[i] / bias_c2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + eps)) + lr * weight_decay * w[i];
    }
}

double relief_gain_scalar(const double* row, const double* dmin,
                          std::size_t n) noexcept {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::max(0.0, dmin[i] - row[i]);
    return acc;
}

float relief_gain_f_scalar(const float* row, const float* dmin,
                           std::size_t n) noexcept {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += std::max(0.0f, dmin[i] - row[i]);
    return acc;
}

void min_inplace_scalar(double* dmin, const double* row, std::size_t n) noexcept {
    for (std::size_t i = 0; i < n; ++i) dmin[i] = std::min(dmin[i], row[i]);
}

void min_inplace_f_scalar(float* dmin, const float* row, std::size_t n) noexcept {
    for (std::size_t i = 0; i < n; ++i) dmin[i] = std::min(dmin[i], row[i]);
}

} // namespace gcp::kernels::detail
