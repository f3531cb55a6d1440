#pragma once

#include <cstddef>

// Numeric inner loops used by training, scoring and clustering. Every kernel
// has a scalar reference implementation and, on x86-64 with AVX2+FMA, a
// vectorized variant selected once at runtime. Elementwise kernels produce
// bit-identical results across variants (scalar paths use std::fma wherever
// the vector path fuses); reduction kernels may differ by rounding order.
namespace gcp::kernels {

enum class Isa { Scalar, Avx2 };

// Variant picked for this process (queried lazily on first kernel call).
Isa active_isa() noexcept;

// Test hook: force a variant. Forcing Avx2 on hardware without it is ignored.
void force_isa(Isa isa) noexcept;

bool avx2_supported() noexcept;

// y = W x + b. W is rows x cols, row-major. bias may be null.
void affine(const double* w, const double* bias, const double* x, double* y,
            std::size_t rows, std::size_t cols) noexcept;

// dx += W^T dy
void matvec_t_accum(const double* w, const double* dy, double* dx,
                    std::size_t rows, std::size_t cols) noexcept;

// dW += dy (x) x outer product; db += dy. db may be null.
void rank1_bias_accum(double* dw, double* db, const double* dy, const double* x,
                      std::size_t rows, std::size_t cols) noexcept;

double dot(const double* a, const double* b, std::size_t n) noexcept;
double squared_distance(const double* a, const double* b, std::size_t n) noexcept;

// y += a * x
void axpy(double a, const double* x, double* y, std::size_t n) noexcept;
void scale(double a, double* x, std::size_t n) noexcept;

double reduce_max(const double* x, std::size_t n) noexcept; // n >= 1
double reduce_sum(const double* x, std::size_t n) noexcept;

// Decoupled-weight-decay adaptive moment step over one flat parameter array.
// bias_c1/bias_c2 are the step's bias-correction divisors (1 - beta^t).
void adamw_update(double* w, double* m, double* v, const double* g,
                  std::size_t n, double lr, double beta1, double beta2,
                  double eps, double weight_decay, double bias_c1,
                  double bias_c2) noexcept;

// sum_j max(0, dmin[j] - row[j]); the gain of adding a candidate medoid.
double relief_gain(const double* row, const double* dmin, std::size_t n) noexcept;
float relief_gain_f(const float* row, const float* dmin, std::size_t n) noexcept;

// dmin[j] = min(dmin[j], row[j])
void min_inplace(double* dmin, const double* row, std::size_t n) noexcept;
void min_inplace_f(float* dmin, const float* row, std::size_t n) noexcept;

} // namespace gcp::kernels
