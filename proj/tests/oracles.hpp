#pragma once

// Reference implementations used only by tests. They are written for
// clarity, not speed, and share no code with the library.

#include "mergelab/checkpoint.hpp"
#include "mergelab/matrix.hpp"
#include "mergelab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

namespace oracle {

inline std::filesystem::path temp_dir(const std::string & name) {
    auto p = std::filesystem::temp_directory_path() / ("mergelab_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline mergelab::matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    mergelab::rng g(seed);
    mergelab::matrix m{r, c, std::vector<double>(r * c)};
    for (auto & v : m.data) v = g.normal();
    return m;
}

// Checkpoint with two layers of float parameters drawn from N(0, scale^2).
inline mergelab::checkpoint random_checkpoint(std::uint64_t seed, float scale = 1.0f) {
    mergelab::rng g(seed);
    auto fill = [&](std::size_t n) {
        std::vector<float> v(n);
        for (auto & x : v) x = static_cast<float>(g.normal()) * scale;
        return v;
    };
    mergelab::checkpoint c;
    c.tensors["layer_0.w"] = mergelab::tensor({4, 3}, fill(12));
    c.tensors["layer_0.b"] = mergelab::tensor({4}, fill(4));
    c.tensors["layer_1.w"] = mergelab::tensor({2, 4}, fill(8));
    c.tensors["layer_1.b"] = mergelab::tensor({2}, fill(2));
    return c;
}

inline double pearson(const std::vector<double> & x, const std::vector<double> & y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        syy += y[i] * y[i];
        sxy += x[i] * y[i];
    }
    return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

// Rank = 1 + #smaller + (#equal - 1) / 2.
inline std::vector<double> ranks(const std::vector<double> & v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0, equal = 0;
        for (double w : v) {
            if (w < v[i]) less += 1;
            if (w == v[i]) equal += 1;
        }
        r[i] = 1 + less + (equal - 1) / 2;
    }
    return r;
}

inline double spearman(const std::vector<double> & x, const std::vector<double> & y) {
    return pearson(ranks(x), ranks(y));
}

// Student-t density and a two-sided tail by Simpson quadrature of the density.
inline double t_density(double t, double df) {
    return std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI) *
           std::pow(1 + t * t / df, -(df + 1) / 2);
}

inline double t_two_sided(double t, double df) {
    t = std::abs(t);
    const int n = 20000; // even
    const double h = t / n;
    double s = t_density(0, df) + t_density(t, df);
    for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * t_density(i * h, df);
    const double central = s * h / 3; // P(0 <= T <= t)
    return 1 - 2 * central;
}

// HSIC formulation: CKA = <HKH, HLH> / (||HKH|| ||HLH||) with K = XX^T, L = YY^T.
inline double cka_gram(const mergelab::matrix & x, const mergelab::matrix & y) {
    const std::size_t n = x.rows;
    auto gram = [&](const mergelab::matrix & a) {
        std::vector<double> k(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t c = 0; c < a.cols; ++c) k[i * n + j] += a(i, c) * a(j, c);
        // center: H K H with H = I - 11^T/n
        std::vector<double> row(n, 0.0), col(n, 0.0);
        double all = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                row[i] += k[i * n + j] / n;
                col[j] += k[i * n + j] / n;
                all += k[i * n + j] / (n * n);
            }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) k[i * n + j] += all - row[i] - col[j];
        return k;
    };
    const auto k = gram(x);
    const auto l = gram(y);
    double kl = 0, kk = 0, ll = 0;
    for (std::size_t i = 0; i < n * n; ++i) {
        kl += k[i] * l[i];
        kk += k[i] * k[i];
        ll += l[i] * l[i];
    }
    return kl / std::sqrt(kk * ll);
}

// TIES by explicit sorting on one tensor of deltas (one vector per expert),
// keeping `keep` entries per expert.
inline std::vector<double> ties_reference(const std::vector<std::vector<double>> & deltas, std::size_t keep) {
    const std::size_t n = deltas.front().size();
    std::vector<std::vector<double>> trimmed;
    for (const auto & d : deltas) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (std::abs(d[a]) != std::abs(d[b])) return std::abs(d[a]) > std::abs(d[b]);
            return a < b;
        });
        std::vector<double> t(n, 0.0);
        for (std::size_t i = 0; i < keep && i < n; ++i) t[idx[i]] = d[idx[i]];
        trimmed.push_back(t);
    }
    std::vector<double> out(n, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
        double sum = 0;
        for (const auto & t : trimmed) sum += t[p];
        const double sign = sum >= 0 ? 1.0 : -1.0;
        double acc = 0;
        int count = 0;
        for (const auto & t : trimmed) {
            if (t[p] != 0 && (t[p] > 0) == (sign > 0)) {
                acc += t[p];
                ++count;
            }
        }
        out[p] = count ? acc / count : 0.0;
    }
    return out;
}

} // namespace oracle
