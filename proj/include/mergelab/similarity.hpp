#pragma once

#include "mergelab/checkpoint.hpp"
#include "mergelab/matrix.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

namespace mergelab {

// Layer index used for tensors whose names do not match the grouping pattern.
inline constexpr long other_layer = -1;

// Maps tensor names to layer indices with a template such as "layer_{}" or
// "model.layers.{}.": the "{}" matches a run of digits, the rest is literal,
// and the template may match anywhere in the name.
class layer_grouping {
public:
    explicit layer_grouping(std::string pattern = "layer_{}");

    long layer_of(const std::string & tensor_name) const;
    // Layer index -> tensor names (lexicographic within a layer).
    std::map<long, std::vector<std::string>> group(const checkpoint & c) const;
    const std::string & pattern() const { return pattern_; }

private:
    std::string pattern_;
    std::regex regex_;
};

std::string layer_label(long layer);

struct layer_value {
    long layer;
    double value;
};

std::vector<layer_value> cosine_layerwise(const checkpoint & a, const checkpoint & b, const layer_grouping & g);

struct stable_rank_result {
    double value = 0.0;
    double sigma_max_sq = 0.0;
    int iterations = 0;
    bool converged = false;
};

// ||W||_F^2 / sigma_max^2 for a matrix with at least two rows and columns.
stable_rank_result stable_rank_of(const matrix & w);
// Reshapes to (dim0, product of the rest) first.
double stable_rank(const tensor & t);
bool stable_rank_eligible(const tensor & t);

struct layer_similarity {
    long layer = 0;
    std::optional<double> cosine;
    std::optional<double> stable_rank_diff;
    std::optional<double> l2_norm_diff;
    std::optional<double> cka;
};

struct similarity_report {
    std::vector<layer_similarity> per_layer;
    std::optional<double> mean_cosine;
    std::optional<double> mean_stable_rank_diff;
    std::optional<double> mean_l2_diff;
    std::optional<double> mean_cka;

    // Recomputes the mean fields from per_layer; the "other" bucket only counts
    // when include_other is set.
    void update_means(bool include_other = false);
    bool has_cka() const;
};

similarity_report parametric_diff(const checkpoint & a, const checkpoint & b, const layer_grouping & g,
                                  bool include_other = false);

// Linear CKA between two representations of the same n samples.
double linear_cka(const matrix & x, const matrix & y);

struct activation_set {
    std::string probe_id;
    std::vector<matrix> layers; // each (n_samples, d_layer)

    std::size_t n_samples() const { return layers.empty() ? 0 : layers.front().rows; }
    void validate() const;
    activation_set take_rows(const std::vector<std::size_t> & rows) const;
};

struct cka_profile_result {
    std::vector<std::optional<double>> per_layer; // nullopt where CKA is degenerate
    std::optional<double> mean;
};

cka_profile_result cka_profile(const activation_set & a, const activation_set & b);

// Adds per-layer CKA values to a parametric report (layer i of the activation
// profile goes to layer index i) and refreshes the means.
void attach_cka(similarity_report & report, const cka_profile_result & profile, bool include_other = false);

// Up to max_rows distinct row indices in ascending order, chosen by seed.
std::vector<std::size_t> subsample_rows(std::size_t n, std::size_t max_rows, std::uint64_t seed);

checkpoint activation_set_to_checkpoint(const activation_set & s);
activation_set activation_set_from_checkpoint(const checkpoint & c);
activation_set load_activation_set(const std::filesystem::path & path);
void save_activation_set(const activation_set & s, const std::filesystem::path & path);

// CSV with columns layer,cosine,stable_rank_diff,l2_norm_diff[,cka] and a final "mean" row.
std::string similarity_report_csv(const similarity_report & r, bool with_cka);

} // namespace mergelab
