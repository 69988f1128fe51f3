#include "doctest.h"
#include "oracles.hpp"

#include "mergelab/error.hpp"
#include "mergelab/similarity.hpp"

#include <cmath>

using namespace mergelab;

namespace {

matrix from_rows(std::size_t r, std::size_t c, std::vector<double> v) {
    return matrix{r, c, std::move(v)};
}

// Random orthogonal matrix by Gram-Schmidt.
matrix random_orthogonal(std::size_t n, std::uint64_t seed) {
    matrix q = oracle::random_matrix(n, n, seed);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < j; ++k) {
            double dot = 0;
            for (std::size_t i = 0; i < n; ++i) dot += q(i, j) * q(i, k);
            for (std::size_t i = 0; i < n; ++i) q(i, j) -= dot * q(i, k);
        }
        double norm = 0;
        for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < n; ++i) q(i, j) /= norm;
    }
    return q;
}

matrix matmul(const matrix & a, const matrix & b) {
    matrix c{a.rows, b.cols, std::vector<double>(a.rows * b.cols, 0.0)};
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k)
            for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += a(i, k) * b(k, j);
    return c;
}

checkpoint two_layer(std::vector<float> l0, std::vector<float> l1) {
    checkpoint c;
    c.tensors["layer_0.w"] = tensor({2, 2}, std::move(l0));
    c.tensors["layer_1.w"] = tensor({2, 2}, std::move(l1));
    return c;
}

} // namespace

TEST_CASE("layer grouping") {
    const layer_grouping g("layer_{}");
    CHECK(g.layer_of("layer_3.w") == 3);
    CHECK(g.layer_of("encoder.layer_12.attn") == 12);
    CHECK(g.layer_of("embed") == other_layer);
    const layer_grouping hf("model.layers.{}.");
    CHECK(hf.layer_of("model.layers.7.mlp.weight") == 7);
    CHECK(hf.layer_of("model_layers_7_mlp") == other_layer); // dots are literal
    CHECK_THROWS_AS(layer_grouping("layer"), error);
}

TEST_CASE("cosine") {
    const auto a = oracle::random_checkpoint(1);
    for (const auto & lv : cosine_layerwise(a, a, layer_grouping())) CHECK(lv.value == doctest::Approx(1.0));

    checkpoint x, y;
    x.tensors["layer_0.w"] = tensor({2}, {1, 0});
    y.tensors["layer_0.w"] = tensor({2}, {0, 1});
    CHECK(cosine_layerwise(x, y, layer_grouping()).at(0).value == 0.0);
    x.tensors["layer_0.w"] = tensor({2}, {1, 2});
    y.tensors["layer_0.w"] = tensor({2}, {2, 4});
    CHECK(cosine_layerwise(x, y, layer_grouping()).at(0).value == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("stable rank analytic cases") {
    for (std::size_t n : {2u, 5u, 16u}) {
        matrix eye{n, n, std::vector<double>(n * n, 0.0)};
        for (std::size_t i = 0; i < n; ++i) eye(i, i) = 1.0;
        CHECK(stable_rank_of(eye).value == static_cast<double>(n));
    }
    CHECK(stable_rank_of(from_rows(2, 2, {2, 0, 0, 1})).value == doctest::Approx(1.25).epsilon(1e-6));

    const std::vector<double> u{1, -2, 3}, v{0.5, 4, -1, 2};
    matrix outer{3, 4, std::vector<double>(12)};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) outer(i, j) = u[i] * v[j];
    CHECK(std::abs(stable_rank_of(outer).value - 1.0) <= 1e-6);

    CHECK_THROWS_AS(stable_rank_of(matrix{2, 2, {0, 0, 0, 0}}), error);
    CHECK_THROWS_AS(stable_rank_of(matrix{1, 3, {1, 2, 3}}), error);
}

TEST_CASE("stable rank is scale invariant and converges") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const matrix w = oracle::random_matrix(32, 32, s);
        const auto r = stable_rank_of(w);
        CHECK(r.converged);
        CHECK(r.iterations <= 1000);
        matrix w3 = w;
        for (auto & x : w3.data) x *= 3.5;
        CHECK(std::abs(stable_rank_of(w3).value - r.value) <= 1e-8);
    }
}

TEST_CASE("parametric diff") {
    const auto a = oracle::random_checkpoint(7);
    const auto self = parametric_diff(a, a, layer_grouping());
    for (const auto & l : self.per_layer) {
        CHECK(*l.cosine == doctest::Approx(1.0));
        CHECK(*l.l2_norm_diff == 0.0);
        CHECK(*l.stable_rank_diff == 0.0);
    }

    auto b = a;
    for (auto & [_, t] : b.tensors)
        for (auto & v : t.data) v *= 2.0f;
    const auto scaled = parametric_diff(a, b, layer_grouping());
    for (const auto & l : scaled.per_layer) {
        double norm = 0;
        for (const auto & [name, t] : a.tensors) {
            if (layer_grouping().layer_of(name) != l.layer) continue;
            for (float v : t.data) norm += double(v) * v;
        }
        CHECK(*l.cosine == doctest::Approx(1.0));
        CHECK(*l.l2_norm_diff == doctest::Approx(std::sqrt(norm)).epsilon(1e-9));
        CHECK(std::abs(*l.stable_rank_diff) <= 1e-8);
    }
}

TEST_CASE("parametric diff matches a hand reference") {
    const auto a = two_layer({1, 0, 0, 1}, {2, 0, 0, 1});
    const auto b = two_layer({0, 1, 1, 0}, {1, 1, 1, 1});
    const auto r = parametric_diff(a, b, layer_grouping());
    REQUIRE(r.per_layer.size() == 2);
    // layer 0: orthogonal vectors of equal norm; identity and swap both have stable rank 2
    CHECK(*r.per_layer[0].cosine == 0.0);
    CHECK(*r.per_layer[0].l2_norm_diff == 0.0);
    CHECK(*r.per_layer[0].stable_rank_diff == doctest::Approx(0.0));
    // layer 1: cos = 3 / (sqrt5 * 2); norms sqrt5 vs 2; stable ranks 1.25 vs 1
    CHECK(*r.per_layer[1].cosine == doctest::Approx(3.0 / (std::sqrt(5.0) * 2.0)));
    CHECK(*r.per_layer[1].l2_norm_diff == doctest::Approx(std::sqrt(5.0) - 2.0));
    CHECK(*r.per_layer[1].stable_rank_diff == doctest::Approx(0.25));
    CHECK(*r.mean_cosine == doctest::Approx(1.5 / (std::sqrt(5.0) * 2.0)));
    CHECK_FALSE(r.mean_cka.has_value());
}

TEST_CASE("other bucket is excluded from means by default") {
    auto a = two_layer({1, 0, 0, 1}, {1, 0, 0, 1});
    auto b = a;
    a.tensors["embed"] = tensor({2}, {1, 0});
    b.tensors["embed"] = tensor({2}, {0, 1});
    CHECK(*parametric_diff(a, b, layer_grouping()).mean_cosine == doctest::Approx(1.0));
    CHECK(*parametric_diff(a, b, layer_grouping(), true).mean_cosine == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("linear cka") {
    const matrix x = oracle::random_matrix(20, 6, 1);
    CHECK(std::abs(linear_cka(x, x) - 1.0) <= 1e-9);

    const matrix q = random_orthogonal(6, 2);
    CHECK(std::abs(linear_cka(x, matmul(x, q)) - 1.0) <= 1e-6);
    matrix x7 = x;
    for (auto & v : x7.data) v *= 7.0;
    const matrix y = oracle::random_matrix(20, 4, 3);
    CHECK(std::abs(linear_cka(x7, y) - linear_cka(x, y)) <= 1e-6);

    const matrix hx = from_rows(4, 2, {1, 2, 0, 1, 3, -1, 2, 2});
    const matrix hy = from_rows(4, 2, {0, 1, 1, 1, -2, 0, 1, 3});
    CHECK(std::abs(linear_cka(hx, hy) - oracle::cka_gram(hx, hy)) <= 1e-12);

    for (std::uint64_t s = 0; s < 20; ++s) {
        const matrix a = oracle::random_matrix(10, 5, 100 + s);
        const matrix b = oracle::random_matrix(10, 5, 200 + s);
        CHECK(std::abs(linear_cka(a, b) - oracle::cka_gram(a, b)) <= 1e-8);
    }

    matrix constant{5, 2, std::vector<double>(10, 3.0)};
    CHECK_THROWS_AS(linear_cka(constant, oracle::random_matrix(5, 2, 9)), error);
    CHECK_THROWS_AS(linear_cka(x, oracle::random_matrix(19, 6, 9)), error);
}

TEST_CASE("cka profile") {
    activation_set a{"probe", {oracle::random_matrix(30, 4, 1), oracle::random_matrix(30, 3, 2)}};
    const auto self = cka_profile(a, a);
    for (const auto & v : self.per_layer) CHECK(*v == doctest::Approx(1.0));
    CHECK(*self.mean == doctest::Approx(1.0));

    activation_set b{"probe", {oracle::random_matrix(30, 4, 3), oracle::random_matrix(30, 5, 4)}};
    const auto ref = cka_profile(a, b);
    // permuting feature columns does not change the profile
    activation_set p = b;
    for (auto & m : p.layers) {
        matrix r = m;
        for (std::size_t i = 0; i < m.rows; ++i)
            for (std::size_t j = 0; j < m.cols; ++j) r(i, j) = m(i, m.cols - 1 - j);
        m = r;
    }
    const auto perm = cka_profile(a, p);
    for (std::size_t l = 0; l < ref.per_layer.size(); ++l) {
        CHECK(std::abs(*perm.per_layer[l] - *ref.per_layer[l]) <= 1e-12);
        CHECK(std::abs(*ref.per_layer[l] - oracle::cka_gram(a.layers[l], b.layers[l])) <= 1e-8);
    }

    // a degenerate layer is missing rather than fatal
    activation_set z = b;
    z.layers[1] = matrix{30, 5, std::vector<double>(150, 1.0)};
    const auto partial = cka_profile(a, z);
    CHECK(partial.per_layer[0].has_value());
    CHECK_FALSE(partial.per_layer[1].has_value());
    CHECK(*partial.mean == doctest::Approx(*partial.per_layer[0]));

    activation_set other = b;
    other.probe_id = "different";
    CHECK_THROWS_AS(cka_profile(a, other), error);
}

TEST_CASE("activation set file round trip") {
    activation_set a{"flores", {oracle::random_matrix(8, 3, 1), oracle::random_matrix(8, 2, 2)}};
    const auto dir = oracle::temp_dir("acts");
    save_activation_set(a, dir / "a.safetensors");
    const auto back = load_activation_set(dir / "a.safetensors");
    CHECK(back.probe_id == "flores");
    REQUIRE(back.layers.size() == 2);
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t i = 0; i < a.layers[l].data.size(); ++i) {
            CHECK(back.layers[l].data[i] == static_cast<double>(static_cast<float>(a.layers[l].data[i])));
        }
    }
}

TEST_CASE("row subsampling") {
    const auto rows = subsample_rows(100, 10, 3);
    CHECK(rows.size() == 10);
    CHECK(std::is_sorted(rows.begin(), rows.end()));
    CHECK(std::adjacent_find(rows.begin(), rows.end()) == rows.end());
    CHECK(rows == subsample_rows(100, 10, 3));
    CHECK(subsample_rows(5, 10, 3).size() == 5);
}

TEST_CASE("report csv") {
    const auto a = oracle::random_checkpoint(7);
    const auto r = parametric_diff(a, a, layer_grouping());
    const auto csv = similarity_report_csv(r, false);
    CHECK(csv.rfind("layer,cosine,stable_rank_diff,l2_norm_diff\n", 0) == 0);
    CHECK(csv.find("\nmean,") != std::string::npos);
    CHECK(csv.find("cka") == std::string::npos);
}
