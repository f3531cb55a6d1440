#include <doctest.h>

#include "gcp/kernels.hpp"
#include "gcp/rng.hpp"

#include <cmath>
#include <vector>

using namespace gcp;
namespace k = gcp::kernels;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-scale, scale);
    return v;
}

double rel_diff(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-30});
    return std::fabs(a - b) / denom;
}

struct IsaGuard {
    k::Isa saved = k::active_isa();
    ~IsaGuard() { k::force_isa(saved); }
};

// Runs `fn` under both variants and hands the two results to `check`.
template <typename Fn, typename Check>
void with_both_isas(Fn&& fn, Check&& check) {
    IsaGuard guard;
    k::force_isa(k::Isa::Scalar);
    auto scalar = fn();
    if (!k::avx2_supported()) return;
    k::force_isa(k::Isa::Avx2);
    auto vec = fn();
    check(scalar, vec);
}

} // namespace

TEST_CASE("affine matches a naive loop and is consistent across variants") {
    Rng rng(7);
    for (std::size_t rows : {1u, 3u, 8u, 17u}) {
        for (std::size_t cols : {1u, 4u, 5u, 33u}) {
            auto w = random_vec(rng, rows * cols);
            auto b = random_vec(rng, rows);
            auto x = random_vec(rng, cols);

            std::vector<double> naive(rows, 0.0);
            for (std::size_t r = 0; r < rows; ++r) {
                double acc = b[r];
                for (std::size_t c = 0; c < cols; ++c) acc += w[r * cols + c] * x[c];
                naive[r] = acc;
            }
            with_both_isas(
                [&] {
                    std::vector<double> y(rows);
                    k::affine(w.data(), b.data(), x.data(), y.data(), rows, cols);
                    return y;
                },
                [&](const auto& s, const auto& v) {
                    for (std::size_t r = 0; r < rows; ++r) {
                        CHECK(rel_diff(s[r], naive[r]) < 1e-12);
                        CHECK(rel_diff(s[r], v[r]) < 1e-13);
                    }
                });
        }
    }
}

TEST_CASE("elementwise kernels are bit-identical across variants") {
    Rng rng(11);
    const std::size_t n = 103; // odd length exercises the remainder loop

    SUBCASE("axpy") {
        auto x = random_vec(rng, n);
        auto y0 = random_vec(rng, n);
        with_both_isas(
            [&] {
                auto y = y0;
                k::axpy(0.37, x.data(), y.data(), n);
                return y;
            },
            [&](const auto& s, const auto& v) {
                for (std::size_t i = 0; i < n; ++i) CHECK(s[i] == v[i]);
            });
    }

    SUBCASE("scale") {
        auto x0 = random_vec(rng, n);
        with_both_isas(
            [&] {
                auto x = x0;
                k::scale(-1.7, x.data(), n);
                return x;
            },
            [&](const auto& s, const auto& v) {
                for (std::size_t i = 0; i < n; ++i) CHECK(s[i] == v[i]);
            });
    }

    SUBCASE("matvec_t_accum") {
        const std::size_t rows = 9, cols = 21;
        auto w = random_vec(rng, rows * cols);
        auto dy = random_vec(rng, rows);
        auto dx0 = random_vec(rng, cols);
        with_both_isas(
            [&] {
                auto dx = dx0;
                k::matvec_t_accum(w.data(), dy.data(), dx.data(), rows, cols);
                return dx;
            },
            [&](const auto& s, const auto& v) {
                for (std::size_t i = 0; i < cols; ++i) CHECK(s[i] == v[i]);
            });
    }

    SUBCASE("rank1_bias_accum") {
        const std::size_t rows = 6, cols = 13;
        auto dy = random_vec(rng, rows);
        auto x = random_vec(rng, cols);
        auto dw0 = random_vec(rng, rows * cols);
        auto db0 = random_vec(rng, rows);
        with_both_isas(
            [&] {
                auto dw = dw0;
                auto db = db0;
                k::rank1_bias_accum(dw.data(), db.data(), dy.data(), x.data(),
                                    rows, cols);
                dw.insert(dw.end(), db.begin(), db.end());
                return dw;
            },
            [&](const auto& s, const auto& v) {
                for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == v[i]);
            });
    }

    SUBCASE("adamw_update") {
        auto w0 = random_vec(rng, n);
        auto m0 = random_vec(rng, n, 0.01);
        std::vector<double> v0(n);
        for (double& x : v0) x = rng.uniform(0.0, 0.01);
        auto g = random_vec(rng, n);
        with_both_isas(
            [&] {
                auto w = w0;
                auto m = m0;
                auto v = v0;
                k::adamw_update(w.data(), m.data(), v.data(), g.data(), n, 1e-3,
                                0.9, 0.999, 1e-8, 0.01, 0.1, 0.001);
                w.insert(w.end(), m.begin(), m.end());
                w.insert(w.end(), v.begin(), v.end());
                return w;
            },
            [&](const auto& s, const auto& v) {
                for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == v[i]);
            });
    }

    SUBCASE("min_inplace double and float") {
        auto a0 = random_vec(rng, n);
        auto b = random_vec(rng, n);
        with_both_isas(
            [&] {
                auto a = a0;
                k::min_inplace(a.data(), b.data(), n);
                return a;
            },
            [&](const auto& s, const auto& v) {
                for (std::size_t i = 0; i < n; ++i) CHECK(s[i] == v[i]);
            });

        std::vector<float> fa0(n), fb(n);
        for (std::size_t i = 0; i < n; ++i) {
            fa0[i] = static_cast<float>(a0[i]);
            fb[i] = static_cast<float>(b[i]);
        }
        with_both_isas(
            [&] {
                auto fa = fa0;
                k::min_inplace_f(fa.data(), fb.data(), n);
                return fa;
            },
            [&](const auto& s, const auto& v) {
                for (std::size_t i = 0; i < n; ++i) CHECK(s[i] == v[i]);
            });
    }
}

TEST_CASE("reduction kernels agree across variants within rounding") {
    Rng rng(23);
    for (std::size_t n : {1u, 3u, 4u, 7u, 64u, 257u, 1000u}) {
        auto a = random_vec(rng, n);
        auto b = random_vec(rng, n);

        with_both_isas([&] { return k::dot(a.data(), b.data(), n); },
                       [&](double s, double v) { CHECK(rel_diff(s, v) < 1e-13); });
        with_both_isas(
            [&] { return k::squared_distance(a.data(), b.data(), n); },
            [&](double s, double v) { CHECK(rel_diff(s, v) < 1e-13); });
        with_both_isas([&] { return k::reduce_sum(a.data(), n); },
                       [&](double s, double v) { CHECK(rel_diff(s, v) < 1e-12); });
        with_both_isas([&] { return k::reduce_max(a.data(), n); },
                       [&](double s, double v) { CHECK(s == v); });

        // against plain accumulation
        double dref = 0.0, sref = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dref += a[i] * b[i];
            const double d = a[i] - b[i];
            sref += d * d;
        }
        CHECK(rel_diff(k::dot(a.data(), b.data(), n), dref) < 1e-12);
        CHECK(rel_diff(k::squared_distance(a.data(), b.data(), n), sref) < 1e-12);
    }
}

TEST_CASE("relief_gain computes the clamped improvement sum") {
    Rng rng(31);
    const std::size_t n = 77;
    auto row = random_vec(rng, n, 2.0);
    auto dmin = random_vec(rng, n, 2.0);

    double ref = 0.0;
    for (std::size_t i = 0; i < n; ++i) ref += std::max(0.0, dmin[i] - row[i]);

    with_both_isas([&] { return k::relief_gain(row.data(), dmin.data(), n); },
                   [&](double s, double v) {
                       CHECK(rel_diff(s, v) < 1e-13);
                       CHECK(rel_diff(s, ref) < 1e-12);
                   });

    std::vector<float> frow(n), fdmin(n);
    for (std::size_t i = 0; i < n; ++i) {
        frow[i] = static_cast<float>(row[i]);
        fdmin[i] = static_cast<float>(dmin[i]);
    }
    with_both_isas(
        [&] { return k::relief_gain_f(frow.data(), fdmin.data(), n); },
        [&](float s, float v) { CHECK(rel_diff(s, v) < 1e-5); });
}

TEST_CASE("forcing an unavailable variant is a no-op") {
    k::force_isa(k::Isa::Scalar);
    CHECK(k::active_isa() == k::Isa::Scalar);
    k::force_isa(k::Isa::Avx2);
    if (k::avx2_supported()) {
        CHECK(k::active_isa() == k::Isa::Avx2);
    } else {
        CHECK(k::active_isa() == k::Isa::Scalar);
    }
}
