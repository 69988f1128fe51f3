#include "doctest.h"
#include "oracles.hpp"

#include "mergelab/error.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/stats.hpp"

#include <cmath>

using namespace mergelab;

TEST_CASE("merge delta") {
    CHECK(merge_delta({0.9, 0.8}, {0.9, 0.8}).delta == 0.0);
    CHECK(merge_delta({0.99, 0.98}, {0.60, 0.52}).delta == doctest::Approx(0.425).epsilon(1e-12));
    CHECK(merge_delta({0.5, 0.5}, {0.6, 0.6}).delta == doctest::Approx(-0.1).epsilon(1e-12));
    CHECK_THROWS_AS(merge_delta({1.2, 0.5}, {0.5, 0.5}), error);
}

TEST_CASE("coefficient of variation") {
    const std::vector<double> c{5, 5, 5};
    CHECK(cv_percent(c) == 0.0);
    const std::vector<double> v{1, 2, 3};
    CHECK(cv_percent(v) == doctest::Approx(50.0).epsilon(1e-12));
    const std::vector<double> z{-1, 1};
    CHECK_THROWS_AS(cv_percent(z), error);
}

TEST_CASE("bootstrap") {
    const std::vector<double> same{1, 1, 1, 1};
    const auto b = bootstrap(same);
    CHECK(b.se == 0.0);
    CHECK(b.ci_low == 1.0);
    CHECK(b.ci_high == 1.0);

    const std::vector<double> items{0, 1};
    const auto x = bootstrap(items, 1000, 42);
    const auto y = bootstrap(items, 1000, 42, 8);
    CHECK(x.mean == 0.5);
    CHECK(x.se == y.se);
    CHECK(x.ci_low == y.ci_low);
    CHECK(x.ci_high == doctest::Approx(x.mean + 1.96 * x.se).epsilon(1e-15));
    // se of a two-point mean is near sqrt(0.25 / 2)
    CHECK(x.se == doctest::Approx(std::sqrt(0.125)).epsilon(0.08));

    // reference: resample r uses its own generator
    double s = 0, ss = 0;
    for (int r = 0; r < 1000; ++r) {
        rng g(derive_seed(42, static_cast<std::uint64_t>(r)));
        double m = 0;
        for (int i = 0; i < 2; ++i) m += items[g.index(2)];
        m /= 2;
        s += m;
        ss += m * m;
    }
    const double mm = s / 1000;
    CHECK(x.se == doctest::Approx(std::sqrt((ss - 1000 * mm * mm) / 999)).epsilon(1e-9));
}

TEST_CASE("pearson") {
    const std::vector<double> x{1, 2, 3, 4, 5};
    std::vector<double> y2, yneg;
    for (double v : x) {
        y2.push_back(2 * v + 1);
        yneg.push_back(-v);
    }
    const auto p = pearson(x, y2);
    CHECK(p.coef == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.p < 1e-6);
    CHECK(pearson(x, yneg).coef == doctest::Approx(-1.0).epsilon(1e-12));

    const std::vector<double> y{2, 1, 4, 3, 5};
    const auto r = pearson(x, y);
    const double ref = oracle::pearson(x, y);
    CHECK(std::abs(r.coef - ref) <= 1e-10);
    const double t = ref * std::sqrt(3.0 / (1 - ref * ref));
    CHECK(std::abs(r.p - oracle::t_two_sided(t, 3)) <= 1e-6);

    const std::vector<double> flat{1, 1, 1, 1, 1};
    CHECK_THROWS_AS(pearson(x, flat), error);
}

TEST_CASE("spearman") {
    const std::vector<double> x{1, 2, 3, 4, 5};
    const std::vector<double> inc{0.1, 0.5, 2, 10, 11};
    const std::vector<double> dec{5, 4, 3, 2, 1};
    CHECK(spearman(x, inc).coef == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(spearman(x, dec).coef == doctest::Approx(-1.0).epsilon(1e-12));

    const std::vector<double> tx{1, 2, 2, 4};
    const std::vector<double> ty{3, 1, 1, 2};
    CHECK(average_ranks(tx) == std::vector<double>{1, 2.5, 2.5, 4});
    CHECK(average_ranks(ty) == std::vector<double>{4, 1.5, 1.5, 3});
    CHECK(std::abs(spearman(tx, ty).coef - oracle::spearman(tx, ty)) <= 1e-10);

    // without ties the classic 1 - 6 sum d^2 / (n (n^2 - 1)) applies
    const std::vector<double> a{3, 1, 4, 1.5, 5, 9, 2.6};
    const std::vector<double> b{2, 7, 1, 8, 2.8, 1.8, 2.85};
    const auto ra = oracle::ranks(a), rb = oracle::ranks(b);
    double d2 = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
    const double n = static_cast<double>(a.size());
    CHECK(std::abs(spearman(a, b).coef - (1 - 6 * d2 / (n * (n * n - 1)))) <= 1e-10);
}

TEST_CASE("correlation oracles on random data with ties") {
    for (std::uint64_t s = 0; s < 50; ++s) {
        rng g(s);
        const std::size_t n = 5 + g.index(40);
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = static_cast<double>(g.index(6));
            y[i] = x[i] * 0.3 + g.normal();
        }
        if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) continue;
        CHECK(std::abs(pearson(x, y).coef - oracle::pearson(x, y)) <= 1e-10);
        CHECK(std::abs(spearman(x, y).coef - oracle::spearman(x, y)) <= 1e-10);
    }
}

TEST_CASE("p-value against a quadrature t tail") {
    for (double r : {0.1, 0.35, 0.6, -0.8}) {
        for (std::size_t n : {5u, 12u, 45u}) {
            const double df = static_cast<double>(n) - 2;
            const double t = r * std::sqrt(df / (1 - r * r));
            CHECK(std::abs(correlation_p_value(r, n) - oracle::t_two_sided(t, df)) <= 1e-6);
        }
    }
    CHECK(correlation_p_value(1.0, 10) == 0.0);
}

TEST_CASE("permutation p-value") {
    const std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8};
    const std::vector<double> y{1, 2, 3, 4, 5, 6, 7, 8};
    const double p = permutation_p_value(x, y, correlation_kind::spearman, 2000, 3);
    // only the identity and its reversal reach |rho| = 1 among 8! orderings
    CHECK(p < 0.01);
    CHECK(p >= 1.0 / 2001);
    CHECK(p == permutation_p_value(x, y, correlation_kind::spearman, 2000, 3));
}

TEST_CASE("correlate measures") {
    const std::vector<double> d{0.1, 0.4, 0.2, 0.9, 0.5};
    const auto self = correlate_measures("same", d, d);
    CHECK(self.spearman_rho == doctest::Approx(1.0));
    CHECK(self.pearson_r == doctest::Approx(1.0));
    CHECK(self.n == 5);
    const std::vector<double> flat{1, 1, 1, 1, 1};
    CHECK_THROWS_AS(correlate_measures("flat", flat, d), error);
}

TEST_CASE("planted correlation is recovered") {
    rng g(2024);
    std::vector<double> x(45), y(45);
    for (std::size_t i = 0; i < 45; ++i) {
        x[i] = g.normal();
        y[i] = 0.5 * x[i] + std::sqrt(0.75) * g.normal();
    }
    CHECK(std::abs(pearson(x, y).coef - 0.5) <= 0.15);
}

TEST_CASE("score tables") {
    const auto t = parse_score_table("model_id,task_id,item_id,score\nm,t,1,1\nm,t,2,0\nm,u,1,1\n");
    CHECK(t.items("m", "t") == std::vector<double>{1, 0});
    CHECK_THROWS_AS(t.items("m", "zzz"), error);
    CHECK_THROWS_AS(parse_score_table("model_id,task_id,item_id,score\nm,t,1,2\n"), error);
    CHECK_THROWS_AS(parse_score_table("model,task\nm,t\n"), error);
}
