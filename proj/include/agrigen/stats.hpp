#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "agrigen/common.hpp"

namespace agrigen {

/// Sample Pearson correlation. Requires length >= 2 and nonzero variance in
/// both inputs.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw RuntimeError("pearson: length mismatch");
    const size_t n = a.size();
    if (n < 2) throw DegenerateDataError("pearson: need at least 2 samples");
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa == 0.0 || sbb == 0.0)
        throw DegenerateDataError("pearson: undefined for zero-variance input");
    return sab / std::sqrt(saa * sbb);
}

// ----------------------------------------------------------------------------
// Regularized incomplete beta via Lentz's continued fraction; feeds the
// Student-t tail probability. Implemented directly so the statistics used for
// the reported comparisons carry no external dependency.
// ----------------------------------------------------------------------------

namespace detail {

inline double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    throw NumericsError("incomplete beta: continued fraction did not converge");
}

} // namespace detail

/// I_x(a, b), the regularized incomplete beta function.
inline double incomplete_beta(double a, double b, double x) {
    if (x < 0.0 || x > 1.0) throw NumericsError("incomplete_beta: x outside [0, 1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::betacf(a, b, x) / a;
    return 1.0 - std::exp(std::lgamma(a + b) - std::lgamma(b) - std::lgamma(a) +
                          b * std::log(1.0 - x) + a * std::log(x)) *
                     detail::betacf(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability of Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, int64_t df) {
    if (df < 1) throw RuntimeError("student t: df must be >= 1");
    const double x = static_cast<double>(df) / (static_cast<double>(df) + t * t);
    return incomplete_beta(static_cast<double>(df) / 2.0, 0.5, x);
}

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    int64_t df = 0;
};

/// Paired t-test on differences d = a - b. Throws DegenerateDataError when the
/// differences have zero variance.
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw RuntimeError("paired_t_test: length mismatch");
    const size_t n = a.size();
    if (n < 2) throw DegenerateDataError("paired_t_test: need at least 2 pairs");
    std::vector<double> d(n);
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) {
        d[i] = a[i] - b[i];
        mean += d[i];
    }
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double dd = d[i] - mean;
        ss += dd * dd;
    }
    if (ss == 0.0) {
        if (mean == 0.0) return {0.0, 1.0, static_cast<int64_t>(n) - 1};
        throw DegenerateDataError("paired_t_test: zero-variance nonzero differences");
    }
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    TTestResult r;
    r.df = static_cast<int64_t>(n) - 1;
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    r.p = student_t_two_sided_p(r.t, r.df);
    return r;
}

} // namespace agrigen
