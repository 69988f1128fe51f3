#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mergelab {

// Accuracies are fractions in [0, 1]; delta > 0 means merging hurt.
struct delta_record {
    std::string expert_a;
    std::string expert_b;
    std::pair<double, double> expert_scores;
    std::pair<double, double> merged_scores;
    double delta = 0.0;
};

delta_record merge_delta(std::pair<double, double> expert_scores, std::pair<double, double> merged_scores,
                         std::string expert_a = {}, std::string expert_b = {});

double mean(std::span<const double> v);
// Standard deviation with the n-1 denominator.
double sample_sd(std::span<const double> v);

// 100 * sample sd / mean.
double cv_percent(std::span<const double> values);

struct bootstrap_ci {
    double mean = 0.0;
    double se = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    int n_resamples = 0;
    std::uint64_t seed = 0;
};

// SE is the sd of resample means; resample r draws from a generator seeded by
// (seed, r), so the result does not depend on `threads`.
bootstrap_ci bootstrap(std::span<const double> items, int n_resamples = 1000, std::uint64_t seed = 0,
                       unsigned threads = 1);

struct correlation {
    double coef = 0.0;
    double p = 1.0;
};

// Two-sided p-value of a correlation coefficient via the Student-t approximation.
double correlation_p_value(double r, std::size_t n);

correlation pearson(std::span<const double> x, std::span<const double> y);
correlation spearman(std::span<const double> x, std::span<const double> y);

// 1-based ranks; tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> v);

enum class correlation_kind { pearson, spearman };

// Two-sided permutation p-value: (1 + #{|stat(perm)| >= |stat|}) / (draws + 1).
double permutation_p_value(std::span<const double> x, std::span<const double> y, correlation_kind kind,
                           int draws = 10000, std::uint64_t seed = 0);

struct correlation_report {
    std::string measure;
    std::size_t n = 0;
    double spearman_rho = 0.0;
    double spearman_p = 1.0;
    double pearson_r = 0.0;
    double pearson_p = 1.0;
};

struct correlate_options {
    bool permutation_p = false;
    int permutation_draws = 10000;
    std::uint64_t seed = 0;
};

correlation_report correlate_measures(const std::string & measure, std::span<const double> values,
                                      std::span<const double> deltas, const correlate_options & opts = {});

// measure,n,spearman_rho,spearman_p,pearson_r,pearson_p
std::string correlation_csv(const std::vector<correlation_report> & reports);

struct score_row {
    std::string model_id;
    std::string task_id;
    std::string item_id;
    double score = 0.0;
};

struct score_table {
    std::vector<score_row> rows;

    // Per-item scores of one model on one task, in file order. Throws if none.
    std::vector<double> items(const std::string & model_id, const std::string & task_id) const;
};

score_table parse_score_table(const std::string & csv_text);
score_table load_score_table(const std::filesystem::path & path);

} // namespace mergelab
