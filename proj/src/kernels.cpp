#include "gcp/kernels.hpp"

namespace gcp::kernels {

namespace detail {

// scalar reference (kernels_scalar.cpp)
void affine_scalar(const double*, const double*, const double*, double*,
                   std::size_t, std::size_t) noexcept;
void matvec_t_accum_scalar(const double*, const double*, double*, std::size_t,
                           std::size_t) noexcept;
void rank1_bias_accum_scalar(double*, double*, const double*, const double*,
                             std::size_t, std::size_t) noexcept;
double dot_scalar(const double*, const double*, std::size_t) noexcept;
double squared_distance_scalar(const double*, const double*, std::size_t) noexcept;
void axpy_scalar(double, const double*, double*, std::size_t) noexcept;
void scale_scalar(double, double*, std::size_t) noexcept;
double reduce_max_scalar(const double*, std::size_t) noexcept;
double reduce_sum_scalar(const double*, std::size_t) noexcept;
void adamw_update_scalar(double*, double*, double*, const double*, std::size_t,
                         double, double, double, double, double, double,
                         double) noexcept;
double relief_gain_scalar(const double*, const double*, std::size_t) noexcept;
float relief_gain_f_scalar(const float*, const float*, std::size_t) noexcept;
void min_inplace_scalar(double*, const double*, std::size_t) noexcept;
void min_inplace_f_scalar(float*, const float*, std::size_t) noexcept;

#if defined(__x86_64__) || defined(_M_X64)
// vector variants (kernels_avx2.cpp)
void affine_avx2(const double*, const double*, const double*, double*,
                 std::size_t, std::size_t) noexcept;
void matvec_t_accum_avx2(const double*, const double*, double*, std::size_t,
                         std::size_t) noexcept;
void rank1_bias_accum_avx2(double*, double*, const double*, const double*,
                           std::size_t, std::size_t) noexcept;
double dot_avx2(const double*, const double*, std::size_t) noexcept;
double squared_distance_avx2(const double*, const double*, std::size_t) noexcept;
void axpy_avx2(double, const double*, double*, std::size_t) noexcept;
void scale_avx2(double, double*, std::size_t) noexcept;
double reduce_max_avx2(const double*, std::size_t) noexcept;
double reduce_sum_avx2(const double*, std::size_t) noexcept;
void adamw_update_avx2(double*, double*, double*, const double*, std::size_t,
                       double, double, double, double, double, double,
                       double) noexcept;
double relief_gain_avx2(const double*, const double*, std::size_t) noexcept;
float relief_gain_f_avx2(const float*, const float*, std::size_t) noexcept;
void min_inplace_avx2(double*, const double*, std::size_t) noexcept;
void min_inplace_f_avx2(float*, const float*, std::size_t) noexcept;
#endif

} // namespace detail

namespace {

struct KernelTable {
    void (*affine)(const double*, const double*, const double*, double*,
                   std::size_t, std::size_t) noexcept;
    void (*matvec_t_accum)(const double*, const double*, double*, std::size_t,
                           std::size_t) noexcept;
    void (*rank1_bias_accum)(double*, double*, const double*, const double*,
                             std::size_t, std::size_t) noexcept;
    double (*dot)(const double*, const double*, std::size_t) noexcept;
    double (*squared_distance)(const double*, const double*, std::size_t) noexcept;
    void (*axpy)(double, const double*, double*, std::size_t) noexcept;
    void (*scale)(double, double*, std::size_t) noexcept;
    double (*reduce_max)(const double*, std::size_t) noexcept;
    double (*reduce_sum)(const double*, std::size_t) noexcept;
    void (*adamw_update)(double*, double*, double*, const double*, std::size_t,
                         double, double, double, double, double, double,
                         double) noexcept;
    double (*relief_gain)(const double*, const double*, std::size_t) noexcept;
    float (*relief_gain_f)(const float*, const float*, std::size_t) noexcept;
    void (*min_inplace)(double*, const double*, std::size_t) noexcept;
    void (*min_inplace_f)(float*, const float*, std::size_t) noexcept;
};

constexpr KernelTable kScalarTable = {
    detail::affine_scalar,        detail::matvec_t_accum_scalar,
    detail::rank1_bias_accum_scalar,
    detail::dot_scalar,           detail::squared_distance_scalar,
    detail::axpy_scalar,          detail::scale_scalar,
    detail::reduce_max_scalar,    detail::reduce_sum_scalar,
    detail::adamw_update_scalar,  detail::relief_gain_scalar,
    detail::relief_gain_f_scalar, detail::min_inplace_scalar,
    detail::min_inplace_f_scalar,
};

#if defined(__x86_64__) || defined(_M_X64)
constexpr KernelTable kAvx2Table = {
    detail::affine_avx2,        detail::matvec_t_accum_avx2,
    detail::rank1_bias_accum_avx2,
    detail::dot_avx2,           detail::squared_distance_avx2,
    detail::axpy_avx2,          detail::scale_avx2,
    detail::reduce_max_avx2,    detail::reduce_sum_avx2,
    detail::adamw_update_avx2,  detail::relief_gain_avx2,
    detail::relief_gain_f_avx2, detail::min_inplace_avx2,
    detail::min_inplace_f_avx2,
};
#endif

Isa g_isa = []() {
#if defined(__x86_64__) || defined(_M_X64)
    if (avx2_supported()) return Isa::Avx2;
#endif
    return Isa::Scalar;
}();

const KernelTable* g_table = []() {
#if defined(__x86_64__) || defined(_M_X64)
    if (g_isa == Isa::Avx2) return &kAvx2Table;
#endif
    return &kScalarTable;
}();

} // namespace

bool avx2_supported() noexcept {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Isa active_isa() noexcept { return g_isa; }

void force_isa(Isa isa) noexcept {
    if (isa == Isa::Avx2 && !avx2_supported()) return;
    g_isa = isa;
#if defined(__x86_64__) || defined(_M_X64)
    g_table = (isa == Isa::Avx2) ? &kAvx2Table : &kScalarTable;
#else
    g_table = &kScalarTable;
#endif
}

void affine(const double* w, const double* bias, const double* x, double* y,
            std::size_t rows, std::size_t cols) noexcept {
    g_table->affine(w, bias, x, y, rows, cols);
}

void matvec_t_accum(const double* w, const double* dy, double* dx,
                    std::size_t rows, std::size_t cols) noexcept {
    g_table->matvec_t_accum(w, dy, dx, rows, cols);
}

void rank1_bias_accum(double* dw, double* db, const double* dy, const double* x,
                      std::size_t rows, std::size_t cols) noexcept {
    g_table->rank1_bias_accum(dw, db, dy, x, rows, cols);
}

double dot(const double* a, const double* b, std::size_t n) noexcept {
    return g_table->dot(a, b, n);
}

double squared_distance(const double* a, const double* b, std::size_t n) noexcept {
    return g_table->squared_distance(a, b, n);
}

void axpy(double a, const double* x, double* y, std::size_t n) noexcept {
    g_table->axpy(a, x, y, n);
}

void scale(double a, double* x, std::size_t n) noexcept {
    g_table->scale(a, x, n);
}

double reduce_max(const double* x, std::size_t n) noexcept {
    return g_table->reduce_max(x, n);
}

double reduce_sum(const double* x, std::size_t n) noexcept {
    return g_table->reduce_sum(x, n);
}

void adamw_update(double* w, double* m, double* v, const double* g,
                  std::size_t n, double lr, double beta1, double beta2,
                  double eps, double weight_decay, double bias_c1,
                  double bias_c2) noexcept {
    g_table->adamw_update(w, m, v, g, n, lr, beta1, beta2, eps, weight_decay,
                          bias_c1, bias_c2);
}

double relief_gain(const double* row, const double* dmin, std::size_t n) noexcept {
    return g_table->relief_gain(row, dmin, n);
}

float relief_gain_f(const float* row, const float* dmin, std::size_t n) noexcept {
    return g_table->relief_gain_f(row, dmin, n);
}

void min_inplace(double* dmin, const double* row, std::size_t n) noexcept {
    g_table->min_inplace(dmin, row, n);
}

void min_inplace_f(float* dmin, const float* row, std::size_t n) noexcept {
    g_table->min_inplace_f(dmin, row, n);
}

} // namespace gcp::kernels
