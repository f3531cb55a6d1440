// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma and must only be entered after a runtime cpuid check.
#if defined(__x86_64__) || defined(_M_X64)

#include "gcp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <immintrin.h>

namespace gcp::kernels::detail {

namespace {

inline double hsum(__m256d v) noexcept {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    __m128d s = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(s, s);
    return _mm_cvtsd_f64(_mm_add_sd(s, sh));
}

inline float hsum(__m256 v) noexcept {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
    return _mm_cvtss_f32(s);
}

} // namespace

void affine_avx2(const double* w, const double* bias, const double* x,
                 double* y, std::size_t rows, std::size_t cols) noexcept {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* wr = w + r * cols;
        __m256d acc = _mm256_setzero_pd();
        std::size_t c = 0;
        for (; c + 4 <= cols; c += 4) {
            acc = _mm256_fmadd_pd(_mm256_loadu_pd(wr + c),
                                  _mm256_loadu_pd(x + c), acc);
        }
        double tail = 0.0;
        for (; c < cols; ++c) tail += wr[c] * x[c];
        const double total = hsum(acc) + tail;
        y[r] = bias ? total + bias[r] : total;
    }
}

void matvec_t_accum_avx2(const double* w, const double* dy, double* dx,
                         std::size_t rows, std::size_t cols) noexcept {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* wr = w + r * cols;
        const double a = dy[r];
        const __m256d av = _mm256_set1_pd(a);
        std::size_t c = 0;
        for (; c + 4 <= cols; c += 4) {
            __m256d d = _mm256_loadu_pd(dx + c);
            d = _mm256_fmadd_pd(av, _mm256_loadu_pd(wr + c), d);
            _mm256_storeu_pd(dx + c, d);
        }
        for (; c < cols; ++c) dx[c] = std::fma(a, wr[c], dx[c]);
    }
}

void rank1_bias_accum_avx2(double* dw, double* db, const double* dy,
                           const double* x, std::size_t rows,
                           std::size_t cols) noexcept {
    for (std::size_t r = 0; r < rows; ++r) {
        double* dwr = dw + r * cols;
        const double a = dy[r];
        const __m256d av = _mm256_set1_pd(a);
        std::size_t c = 0;
        for (; c + 4 <= cols; c += 4) {
            __m256d d = _mm256_loadu_pd(dwr + c);
            d = _mm256_fmadd_pd(av, _mm256_loadu_pd(x + c), d);
            _mm256_storeu_pd(dwr + c, d);
        }
        for (; c < cols; ++c) dwr[c] = std::fma(a, x[c], dwr[c]);
        if (db) db[r] += a;
    }
}

double dot_avx2(const double* a, const double* b, std::size_t n) noexcept {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i),
                               acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4),
                               _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i),
                               acc0);
    }
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double squared_distance_avx2(const double* a, const double* b,
                             std::size_t n) noexcept {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256d d0 = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
        __m256d d1 = _mm256_sub_pd(_mm256_loadu_pd(a + i + 4),
                                   _mm256_loadu_pd(b + i + 4));
        acc0 = _mm256_fmadd_pd(d0, d0, acc0);
        acc1 = _mm256_fmadd_pd(d1, d1, acc1);
    }
    for (; i + 4 <= n; i += 4) {
        __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
        acc0 = _mm256_fmadd_pd(d, d, acc0);
    }
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

void axpy_avx2(double a, const double* x, double* y, std::size_t n) noexcept {
    const __m256d av = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d yv = _mm256_loadu_pd(y + i);
        yv = _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), yv);
        _mm256_storeu_pd(y + i, yv);
    }
    for (; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

void scale_avx2(double a, double* x, std::size_t n) noexcept {
    const __m256d av = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(x + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
    }
    for (; i < n; ++i) x[i] *= a;
}

double reduce_max_avx2(const double* x, std::size_t n) noexcept {
    if (n < 4) {
        double m = x[0];
        for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
        return m;
    }
    __m256d acc = _mm256_loadu_pd(x);
    std::size_t i = 4;
    for (; i + 4 <= n; i += 4) acc = _mm256_max_pd(acc, _mm256_loadu_pd(x + i));
    __m128d lo = _mm256_castpd256_pd128(acc);
    __m128d hi = _mm256_extractf128_pd(acc, 1);
    __m128d m2 = _mm_max_pd(lo, hi);
    double m = std::max(_mm_cvtsd_f64(m2),
                        _mm_cvtsd_f64(_mm_unpackhi_pd(m2, m2)));
    for (; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

double reduce_sum_avx2(const double* x, std::size_t n) noexcept {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
    double s = hsum(acc);
    for (; i < n; ++i) s += x[i];
    return s;
}

void adamw_update_avx2(double* w, double* m, double* v, const double* g,
                       std::size_t n, double lr, double beta1, double beta2,
                       double eps, double weight_decay, double bias_c1,
                       double bias_c2) noexcept {
    const __m256d b1 = _mm256_set1_pd(beta1);
    const __m256d b2 = _mm256_set1_pd(beta2);
    const __m256d ob1 = _mm256_set1_pd(1.0 - beta1);
    const __m256d ob2 = _mm256_set1_pd(1.0 - beta2);
    const __m256d c1 = _mm256_set1_pd(bias_c1);
    const __m256d c2 = _mm256_set1_pd(bias_c2);
    const __m256d lrv = _mm256_set1_pd(lr);
    const __m256d epsv = _mm256_set1_pd(eps);
    const __m256d lrwd = _mm256_set1_pd(lr * weight_decay);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d gv = _mm256_loadu_pd(g + i);
        __m256d mv = _mm256_loadu_pd(m + i);
        __m256d vv = _mm256_loadu_pd(v + i);
        mv = _mm256_fmadd_pd(b1, mv, _mm256_mul_pd(ob1, gv));
        vv = _mm256_fmadd_pd(b2, vv, _mm256_mul_pd(ob2, _mm256_mul_pd(gv, gv)));
        _mm256_storeu_pd(m + i, mv);
        _mm256_storeu_pd(v + i, vv);
        const __m256d mhat = _mm256_div_pd(mv, c1);
        const __m256d vhat = _mm256_div_pd(vv, c2);
        const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), epsv);
        __m256d wv = _mm256_loadu_pd(w + i);
        const __m256d step = _mm256_add_pd(
            _mm256_mul_pd(lrv, _mm256_div_pd(mhat, denom)),
            _mm256_mul_pd(lrwd, wv));
        _mm256_storeu_pd(w + i, _mm256_sub_pd(wv, step));
    }
    for (; i < n; ++i) {
        m[i] = std::fma(beta1, m[i], (1.0 - beta1) * g[i]);
        v[i] = std::fma(beta2, v[i], (1.0 - beta2) * (g[i] * g[i]));
        const double mhat = m[i] / bias_c1;
        const double vhat = v[i] / bias_c2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + eps)) +
                (lr * weight_decay) * w[i];
    }
}

double relief_gain_avx2(const double* row, const double* dmin,
                        std::size_t n) noexcept {
    const __m256d zero = _mm256_setzero_pd();
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d d = _mm256_sub_pd(_mm256_loadu_pd(dmin + i),
                                  _mm256_loadu_pd(row + i));
        acc = _mm256_add_pd(acc, _mm256_max_pd(zero, d));
    }
    double s = hsum(acc);
    for (; i < n; ++i) s += std::max(0.0, dmin[i] - row[i]);
    return s;
}

float relief_gain_f_avx2(const float* row, const float* dmin,
                         std::size_t n) noexcept {
    const __m256 zero = _mm256_setzero_ps();
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 d = _mm256_sub_ps(_mm256_loadu_ps(dmin + i),
                                 _mm256_loadu_ps(row + i));
        acc = _mm256_add_ps(acc, _mm256_max_ps(zero, d));
    }
    float s = hsum(acc);
    for (; i < n; ++i) s += std::max(0.0f, dmin[i] - row[i]);
    return s;
}

void min_inplace_avx2(double* dmin, const double* row, std::size_t n) noexcept {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d d = _mm256_min_pd(_mm256_loadu_pd(row + i),
                                  _mm256_loadu_pd(dmin + i));
        _mm256_storeu_pd(dmin + i, d);
    }
    for (; i < n; ++i) dmin[i] = std::min(dmin[i], row[i]);
}

void min_inplace_f_avx2(float* dmin, const float* row, std::size_t n) noexcept {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 d = _mm256_min_ps(_mm256_loadu_ps(row + i),
                                 _mm256_loadu_ps(dmin + i));
        _mm256_storeu_ps(dmin + i, d);
    }
    for (; i < n; ++i) dmin[i] = std::min(dmin[i], row[i]);
}

} // namespace gcp::kernels::detail

#endif // x86-64
