#include "mergelab/stats.hpp"

#include "mergelab/csv.hpp"
#include "mergelab/error.hpp"
#include "mergelab/parallel.hpp"
#include "mergelab/rng.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mergelab {

delta_record merge_delta(std::pair<double, double> expert_scores, std::pair<double, double> merged_scores,
                         std::string expert_a, std::string expert_b) {
    for (double s : {expert_scores.first, expert_scores.second, merged_scores.first, merged_scores.second}) {
        if (!(s >= 0.0 && s <= 1.0)) {
            fail(error_kind::argument, "scores must be accuracies in [0, 1]");
        }
    }
    delta_record r;
    r.expert_a = std::move(expert_a);
    r.expert_b = std::move(expert_b);
    r.expert_scores = expert_scores;
    r.merged_scores = merged_scores;
    r.delta = ((expert_scores.first - merged_scores.first) + (expert_scores.second - merged_scores.second)) / 2.0;
    return r;
}

double mean(std::span<const double> v) {
    if (v.empty()) fail(error_kind::argument, "mean of an empty sequence");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_sd(std::span<const double> v) {
    if (v.size() < 2) fail(error_kind::argument, "sample standard deviation needs at least 2 values");
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

double cv_percent(std::span<const double> values) {
    if (values.size() < 2) {
        fail(error_kind::argument, "coefficient of variation needs at least 2 values");
    }
    const double m = mean(values);
    if (m == 0.0) {
        fail(error_kind::degenerate, "coefficient of variation undefined for zero mean");
    }
    return 100.0 * sample_sd(values) / m;
}

bootstrap_ci bootstrap(std::span<const double> items, int n_resamples, std::uint64_t seed, unsigned threads) {
    if (items.empty()) fail(error_kind::argument, "bootstrap needs at least one item");
    if (n_resamples < 1) fail(error_kind::argument, "bootstrap needs at least one resample");

    const std::size_t n = items.size();
    std::vector<double> means(static_cast<std::size_t>(n_resamples));
    parallel_for(means.size(), threads, [&](std::size_t r) {
        rng gen(derive_seed(seed, static_cast<std::uint64_t>(r)));
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += items[gen.index(n)];
        means[r] = s / static_cast<double>(n);
    });

    bootstrap_ci ci;
    ci.mean = mean(items);
    ci.se = means.size() >= 2 ? sample_sd(means) : 0.0;
    ci.ci_low = ci.mean - 1.96 * ci.se;
    ci.ci_high = ci.mean + 1.96 * ci.se;
    ci.n_resamples = n_resamples;
    ci.seed = seed;
    return ci;
}

double correlation_p_value(double r, std::size_t n) {
    if (n < 3) fail(error_kind::argument, "correlation needs at least 3 pairs");
    const double one_minus = 1.0 - r * r;
    if (one_minus <= 0.0) return 0.0;
    const double df = static_cast<double>(n - 2);
    const double t = std::fabs(r) * std::sqrt(df / one_minus);
    boost::math::students_t dist(df);
    return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, t)), 0.0, 1.0);
}

static double pearson_coef(std::span<const double> x, std::span<const double> y) {
    const double mx = mean(x), my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        fail(error_kind::degenerate, "correlation undefined: an input has zero variance");
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

static void check_pairs(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) fail(error_kind::argument, "correlation inputs have different lengths");
    if (x.size() < 3) fail(error_kind::argument, "correlation needs at least 3 pairs");
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
            fail(error_kind::argument, "correlation input has a non-finite value");
        }
    }
}

correlation pearson(std::span<const double> x, std::span<const double> y) {
    check_pairs(x, y);
    const double r = pearson_coef(x, y);
    return {r, correlation_p_value(r, x.size())};
}

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

correlation spearman(std::span<const double> x, std::span<const double> y) {
    check_pairs(x, y);
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double rho = pearson_coef(rx, ry);
    return {rho, correlation_p_value(rho, x.size())};
}

double permutation_p_value(std::span<const double> x, std::span<const double> y, correlation_kind kind, int draws,
                           std::uint64_t seed) {
    check_pairs(x, y);
    if (draws < 1) fail(error_kind::argument, "permutation test needs at least one draw");
    std::vector<double> a(x.begin(), x.end());
    std::vector<double> b(y.begin(), y.end());
    if (kind == correlation_kind::spearman) {
        a = average_ranks(x);
        b = average_ranks(y);
    }
    const double observed = std::fabs(pearson_coef(a, b));
    rng gen(seed);
    int extreme = 0;
    for (int d = 0; d < draws; ++d) {
        gen.shuffle(b.begin(), b.end());
        // tolerance so permutations reproducing the observed statistic count as extreme
        if (std::fabs(pearson_coef(a, b)) >= observed - 1e-12) ++extreme;
    }
    return (1.0 + extreme) / (1.0 + draws);
}

correlation_report correlate_measures(const std::string & measure, std::span<const double> values,
                                      std::span<const double> deltas, const correlate_options & opts) {
    correlation_report r;
    r.measure = measure;
    r.n = values.size();
    const auto s = spearman(values, deltas);
    const auto p = pearson(values, deltas);
    r.spearman_rho = s.coef;
    r.pearson_r = p.coef;
    if (opts.permutation_p) {
        r.spearman_p = permutation_p_value(values, deltas, correlation_kind::spearman, opts.permutation_draws,
                                           derive_seed(opts.seed, "spearman"));
        r.pearson_p = permutation_p_value(values, deltas, correlation_kind::pearson, opts.permutation_draws,
                                          derive_seed(opts.seed, "pearson"));
    } else {
        r.spearman_p = s.p;
        r.pearson_p = p.p;
    }
    return r;
}

std::string correlation_csv(const std::vector<correlation_report> & reports) {
    std::string out = "measure,n,spearman_rho,spearman_p,pearson_r,pearson_p\n";
    for (const auto & r : reports) {
        out += r.measure + "," + std::to_string(r.n) + "," + format_number(r.spearman_rho) + "," +
               format_number(r.spearman_p) + "," + format_number(r.pearson_r) + "," + format_number(r.pearson_p) +
               "\n";
    }
    return out;
}

std::vector<double> score_table::items(const std::string & model_id, const std::string & task_id) const {
    std::vector<double> out;
    for (const auto & r : rows) {
        if (r.model_id == model_id && r.task_id == task_id) out.push_back(r.score);
    }
    if (out.empty()) {
        fail(error_kind::validation, "score table has no items for model '" + model_id + "' on task '" + task_id + "'");
    }
    return out;
}

score_table parse_score_table(const std::string & csv_text) {
    const csv_table t = parse_csv(csv_text);
    const std::size_t cm = t.column("model_id");
    const std::size_t ct = t.column("task_id");
    const std::size_t ci = t.column("item_id");
    const std::size_t cs = t.column("score");
    score_table s;
    for (const auto & row : t.rows) {
        score_row r{row[cm], row[ct], row[ci], parse_number(row[cs], "score column")};
        if (r.score < 0.0 || r.score > 1.0) {
            fail(error_kind::validation, "score " + row[cs] + " is outside [0, 1]");
        }
        s.rows.push_back(std::move(r));
    }
    return s;
}

score_table load_score_table(const std::filesystem::path & path) {
    return parse_score_table(read_text_file(path));
}

} // namespace mergelab
