#pragma once

// Dense double-precision kernels and small statistics helpers shared by the
// whole library. Summations are sequential and index-ascending so that results
// are reproducible run to run; none of this aims at BLAS throughput.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"

namespace emocirc {

using Vec = std::vector<double>;

// Norms below this are treated as degenerate (below unit-scale rounding noise).
inline constexpr double kNormEpsilon = 1e-8;

// Row-major dense matrix.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }

    double* row(std::size_t r) { return a.data() + r * cols; }
    const double* row(std::size_t r) const { return a.data() + r * cols; }

    Vec row_vec(std::size_t r) const { return Vec(row(r), row(r) + cols); }
    Vec col_vec(std::size_t c) const {
        Vec out(rows);
        for (std::size_t r = 0; r < rows; ++r) out[r] = at(r, c);
        return out;
    }

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }
};

inline double dot(const Vec& u, const Vec& v) {
    EMOCIRC_CHECK(u.size() == v.size(), "dot: length mismatch " + std::to_string(u.size()) +
                                            " vs " + std::to_string(v.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline double norm2(const Vec& v) { return std::sqrt(dot(v, v)); }

// Root-mean-square of the entries: sqrt(mean(v_i^2)).
inline double rms(const Vec& v) {
    EMOCIRC_CHECK(!v.empty(), "rms: empty vector");
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s / static_cast<double>(v.size()));
}

inline Vec l2_normalize(const Vec& v) {
    const double n = norm2(v);
    if (!(n > kNormEpsilon))
        throw DegenerateDirection("l2_normalize: norm " + std::to_string(n) + " below threshold");
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

inline double cosine(const Vec& u, const Vec& v) {
    EMOCIRC_CHECK(u.size() == v.size(), "cosine: length mismatch");
    const double nu = norm2(u);
    const double nv = norm2(v);
    if (!(nu > kNormEpsilon) || !(nv > kNormEpsilon))
        throw DegenerateDirection("cosine: degenerate input");
    const double c = dot(u, v) / (nu * nv);
    return std::clamp(c, -1.0, 1.0);
}

// y = M v   (rows x cols) * (cols) -> (rows)
inline Vec matvec(const Mat& m, const Vec& v) {
    EMOCIRC_CHECK(m.cols == v.size(), "matvec: shape mismatch (" + std::to_string(m.rows) + "x" +
                                          std::to_string(m.cols) + ") * " +
                                          std::to_string(v.size()));
    Vec out(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c) s += mr[c] * v[c];
        out[r] = s;
    }
    return out;
}

// y = M^T v  (rows x cols)^T * (rows) -> (cols), without materializing M^T.
inline Vec matvec_T(const Mat& m, const Vec& v) {
    EMOCIRC_CHECK(m.rows == v.size(), "matvec_T: shape mismatch (" + std::to_string(m.rows) + "x" +
                                          std::to_string(m.cols) + ")^T * " +
                                          std::to_string(v.size()));
    Vec out(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.row(r);
        const double vr = v[r];
        for (std::size_t c = 0; c < m.cols; ++c) out[c] += mr[c] * vr;
    }
    return out;
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
    EMOCIRC_CHECK(x.size() == y.size(), "axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vec sub(const Vec& u, const Vec& v) {
    EMOCIRC_CHECK(u.size() == v.size(), "sub: length mismatch");
    Vec out(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] - v[i];
    return out;
}

inline Vec add(const Vec& u, const Vec& v) {
    EMOCIRC_CHECK(u.size() == v.size(), "add: length mismatch");
    Vec out(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) out[i] = u[i] + v[i];
    return out;
}

inline Vec scaled(const Vec& v, double alpha) {
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = alpha * v[i];
    return out;
}

// ---- sample statistics ----------------------------------------------------

inline double mean(const std::vector<double>& xs) {
    EMOCIRC_CHECK(!xs.empty(), "mean: empty sample");
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

inline double sample_stddev(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

// Half-width of a normal-approximation 95% confidence interval.
inline double ci95_half_width(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    return 1.96 * sample_stddev(xs) / std::sqrt(static_cast<double>(xs.size()));
}

// Average ranks, ties get the mean rank.
inline std::vector<double> fractional_ranks(const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && xs[idx[j + 1]] == xs[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

// Spearman rank correlation (Pearson correlation of fractional ranks).
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    EMOCIRC_CHECK(xs.size() == ys.size() && xs.size() >= 2, "spearman: need two equal samples");
    const std::vector<double> rx = fractional_ranks(xs);
    const std::vector<double> ry = fractional_ranks(ys);
    const double mx = mean(rx), my = mean(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 1.0;  // constant rankings: treat as fully concordant
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace emocirc
