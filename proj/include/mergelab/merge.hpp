#pragma once

#include "mergelab/checkpoint.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace mergelab {

// Non-negative weights, normalized to sum to one at construction.
class merge_weights {
public:
    explicit merge_weights(std::vector<double> weights);
    static merge_weights equal(std::size_t n);

    std::size_t size() const { return weights_.size(); }
    double operator[](std::size_t i) const { return weights_[i]; }
    const std::vector<double> & values() const { return weights_; }

private:
    std::vector<double> weights_;
};

// Parameter deltas (expert - base), held in double so that
// base + (expert - base) reproduces the expert.
struct delta_tensor {
    shape_t shape;
    std::vector<double> values;
};

struct task_vector {
    std::map<std::string, delta_tensor> deltas;
};

struct ties_config {
    double density = 0.2; // fraction of entries kept per tensor, in (0, 1]
    double lambda = 1.0;  // scale on the merged task vector

    void validate() const;
};

struct dare_config {
    double drop_prob = 0.9; // in [0, 1)
    std::uint64_t seed = 0;

    void validate() const;
};

using sign_map = std::map<std::string, std::vector<std::int8_t>>;

// Element-wise weighted sum. The result does not depend on input order.
checkpoint linear_merge(std::span<const checkpoint> inputs, const merge_weights & weights, unsigned threads = 1);

task_vector make_task_vector(const checkpoint & expert, const checkpoint & base);
checkpoint apply_task_vector(const checkpoint & base, const task_vector & tv, double lambda);

// Keeps the ceil(density * n) largest-magnitude entries of every tensor.
// Equal magnitudes at the cutoff keep the lower flat index.
task_vector ties_trim(const task_vector & tv, double density);

// Sign of the summed values per parameter; an exact zero sum elects +1.
sign_map ties_elect_sign(std::span<const task_vector> tvs);

// Mean over the entries agreeing with the elected sign; 0 where none survive.
task_vector ties_disjoint_mean(std::span<const task_vector> trimmed, const sign_map & signs);

checkpoint ties_merge(const checkpoint & base, std::span<const checkpoint> experts, const ties_config & cfg,
                      unsigned threads = 1);

// Bernoulli drop with probability p, survivors scaled by 1/(1-p). The mask bit
// of an entry is a pure function of (seed, tensor name, flat index).
task_vector dare_transform(const task_vector & tv, const dare_config & cfg);

// Seed used for the i-th expert's DARE mask.
std::uint64_t dare_expert_seed(std::uint64_t seed, std::size_t expert_index);

// True if DARE drops the entry at (tensor, flat index) under `seed`.
bool dare_drops(std::uint64_t seed, const std::string & tensor_name, std::size_t flat_index, double drop_prob);

checkpoint dare_ties_merge(const checkpoint & base, std::span<const checkpoint> experts, const dare_config & dare,
                           const ties_config & ties, unsigned threads = 1);

} // namespace mergelab
