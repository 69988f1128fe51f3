#include "mergelab/error.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/toy.hpp"

#include <cmath>
#include <limits>

namespace mergelab::toy {

void task_spec::validate() const {
    if (input_dim < 1 || n_classes < 2 || n_train < 1 || n_eval < 1 || clusters_per_class < 1) {
        fail(error_kind::argument, "task needs input_dim >= 1, n_classes >= 2 and non-empty splits");
    }
    if (!(separation > 0.0) || !(noise > 0.0)) {
        fail(error_kind::argument, "task separation and noise must be positive");
    }
    if (family != "gaussian_clusters") {
        fail(error_kind::argument, "unknown task family '" + family + "'");
    }
}

static double min_pairwise_distance(const matrix & c) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < c.rows; ++i) {
        for (std::size_t j = i + 1; j < c.rows; ++j) {
            double d = 0.0;
            for (std::size_t k = 0; k < c.cols; ++k) d += (c(i, k) - c(j, k)) * (c(i, k) - c(j, k));
            best = std::min(best, std::sqrt(d));
        }
    }
    return best;
}

static matrix make_centroids(const task_spec & spec) {
    rng gen(derive_seed(spec.seed, "centroids"));
    const auto k = static_cast<std::size_t>(spec.n_classes * spec.clusters_per_class);
    const auto d = static_cast<std::size_t>(spec.input_dim);
    const double radius = spec.separation * spec.noise;
    for (int attempt = 0; attempt < 10000; ++attempt) {
        matrix c(k, d);
        for (std::size_t i = 0; i < k; ++i) {
            double norm = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                c(i, j) = gen.normal();
                norm += c(i, j) * c(i, j);
            }
            norm = std::sqrt(norm);
            for (std::size_t j = 0; j < d; ++j) c(i, j) *= radius / norm;
        }
        if (min_pairwise_distance(c) >= spec.separation * spec.noise) return c;
    }
    fail(error_kind::argument, "could not place centroids at the requested separation; lower it or raise input_dim");
}

static dataset draw(const matrix & centroids, int n_classes, double noise, std::size_t n, std::uint64_t seed) {
    rng gen(seed);
    dataset ds;
    ds.x = matrix(n, centroids.cols);
    ds.y.resize(n);
    const auto k = static_cast<std::size_t>(n_classes);
    const std::size_t per_class = centroids.rows / k;
    for (std::size_t i = 0; i < n; ++i) ds.y[i] = static_cast<int>(i % k);
    gen.shuffle(ds.y.begin(), ds.y.end());
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t blob = static_cast<std::size_t>(ds.y[i]) + k * gen.index(per_class);
        const auto c = centroids.row(blob);
        auto row = ds.x.row(i);
        for (std::size_t j = 0; j < centroids.cols; ++j) row[j] = c[j] + noise * gen.normal();
    }
    return ds;
}

task generate_task(const task_spec & spec) {
    spec.validate();
    task t;
    t.spec = spec;
    t.centroids = make_centroids(spec);
    t.train = draw(t.centroids, spec.n_classes, spec.noise, static_cast<std::size_t>(spec.n_train), derive_seed(spec.seed, "train"));
    t.eval = draw(t.centroids, spec.n_classes, spec.noise, static_cast<std::size_t>(spec.n_eval), derive_seed(spec.seed, "eval"));
    return t;
}

dataset sample_task(const task & t, std::size_t n, std::uint64_t seed) {
    return draw(t.centroids, t.spec.n_classes, t.spec.noise, n, derive_seed(derive_seed(t.spec.seed, "fresh"), seed));
}

std::vector<int> nearest_centroid(const matrix & centroids, int n_classes, const matrix & x) {
    std::vector<int> out(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < centroids.rows; ++c) {
            double d = 0.0;
            for (std::size_t j = 0; j < x.cols; ++j) d += (x(i, j) - centroids(c, j)) * (x(i, j) - centroids(c, j));
            if (d < best) {
                best = d;
                out[i] = static_cast<int>(c % static_cast<std::size_t>(n_classes));
            }
        }
    }
    return out;
}

} // namespace mergelab::toy
