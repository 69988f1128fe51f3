#include "mergelab/merge.hpp"

#include "mergelab/error.hpp"
#include "mergelab/parallel.hpp"
#include "mergelab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mergelab {

merge_weights::merge_weights(std::vector<double> weights) : weights_(std::move(weights)) {
    if (weights_.empty()) {
        fail(error_kind::argument, "merge weights are empty");
    }
    double sum = 0.0;
    for (double w : weights_) {
        if (!std::isfinite(w) || w < 0.0) {
            fail(error_kind::argument, "merge weights must be finite and non-negative");
        }
        sum += w;
    }
    if (sum <= 0.0) {
        fail(error_kind::argument, "merge weights sum to zero");
    }
    if (sum != 1.0) {
        for (double & w : weights_) w /= sum;
    }
}

merge_weights merge_weights::equal(std::size_t n) {
    if (n == 0) {
        fail(error_kind::argument, "merge weights are empty");
    }
    return merge_weights(std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

void ties_config::validate() const {
    if (!(density > 0.0 && density <= 1.0)) {
        fail(error_kind::argument, "TIES density must be in (0, 1]");
    }
    if (!(lambda > 0.0) || !std::isfinite(lambda)) {
        fail(error_kind::argument, "TIES lambda must be positive");
    }
}

void dare_config::validate() const {
    if (!(drop_prob >= 0.0 && drop_prob < 1.0)) {
        fail(error_kind::argument, "DARE drop probability must be in [0, 1)");
    }
}

static std::string input_id(const checkpoint & c, std::size_t i) {
    auto it = c.metadata.find("name");
    return it != c.metadata.end() ? it->second : "input" + std::to_string(i);
}

static std::string join_ids(std::span<const checkpoint> inputs) {
    std::string s;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (i) s += ",";
        s += input_id(inputs[i], i);
    }
    return s;
}

static std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

static std::vector<const std::string *> tensor_names(const checkpoint & c) {
    std::vector<const std::string *> names;
    names.reserve(c.tensors.size());
    for (const auto & [name, _] : c.tensors) names.push_back(&name);
    return names;
}

checkpoint linear_merge(std::span<const checkpoint> inputs, const merge_weights & weights, unsigned threads) {
    if (inputs.empty()) {
        fail(error_kind::argument, "linear merge needs at least one input");
    }
    if (weights.size() != inputs.size()) {
        fail(error_kind::argument, "linear merge got " + std::to_string(weights.size()) + " weights for " +
                                       std::to_string(inputs.size()) + " inputs");
    }
    for (std::size_t i = 1; i < inputs.size(); ++i) {
        check_compatible(inputs[0], inputs[i]);
    }

    checkpoint out;
    for (const auto & [name, t] : inputs[0].tensors) {
        out.tensors.emplace(name, t.zeros_like());
    }
    const auto names = tensor_names(inputs[0]);
    const std::size_t k = inputs.size();
    parallel_for(names.size(), threads, [&](std::size_t ti) {
        const std::string & name = *names[ti];
        auto & dst = out.tensors.at(name).data;
        std::vector<const float *> src(k);
        for (std::size_t i = 0; i < k; ++i) src[i] = inputs[i].tensors.at(name).data.data();
        std::vector<double> terms(k);
        for (std::size_t e = 0; e < dst.size(); ++e) {
            for (std::size_t i = 0; i < k; ++i) terms[i] = weights[i] * static_cast<double>(src[i][e]);
            // addition of two terms commutes exactly; beyond that, fix the order by value
            if (k > 2) std::sort(terms.begin(), terms.end());
            double acc = 0.0;
            for (double v : terms) acc += v;
            dst[e] = static_cast<float>(acc);
        }
    });

    out.metadata["merge.method"] = "linear";
    out.metadata["merge.inputs"] = join_ids(inputs);
    std::string ws;
    for (std::size_t i = 0; i < k; ++i) ws += (i ? "," : "") + fmt_double(weights[i]);
    out.metadata["merge.weights"] = ws;
    return out;
}

task_vector make_task_vector(const checkpoint & expert, const checkpoint & base) {
    check_compatible(expert, base);
    task_vector tv;
    for (const auto & [name, te] : expert.tensors) {
        const auto & tb = base.tensors.at(name);
        delta_tensor d{te.shape, std::vector<double>(te.size())};
        for (std::size_t i = 0; i < te.size(); ++i) {
            d.values[i] = static_cast<double>(te.data[i]) - static_cast<double>(tb.data[i]);
        }
        tv.deltas.emplace(name, std::move(d));
    }
    return tv;
}

static void check_tv_matches(const checkpoint & base, const task_vector & tv) {
    std::vector<std::string> diffs;
    if (tv.deltas.size() != base.tensors.size()) {
        diffs.push_back("tensor count " + std::to_string(base.tensors.size()) + " vs " +
                        std::to_string(tv.deltas.size()));
    }
    for (const auto & [name, t] : base.tensors) {
        auto it = tv.deltas.find(name);
        if (it == tv.deltas.end()) {
            diffs.push_back("'" + name + "' missing from task vector");
        } else if (it->second.shape != t.shape || it->second.values.size() != t.size()) {
            diffs.push_back("'" + name + "' shape " + shape_str(t.shape) + " vs " + shape_str(it->second.shape));
        }
        if (diffs.size() >= 10) break;
    }
    if (!diffs.empty()) {
        std::string msg = "task vector does not match base checkpoint";
        for (const auto & d : diffs) msg += "\n  " + d;
        fail(error_kind::mismatch, msg);
    }
}

checkpoint apply_task_vector(const checkpoint & base, const task_vector & tv, double lambda) {
    check_tv_matches(base, tv);
    checkpoint out;
    out.metadata = base.metadata;
    for (const auto & [name, t] : base.tensors) {
        const auto & d = tv.deltas.at(name).values;
        tensor r = t.zeros_like();
        for (std::size_t i = 0; i < t.size(); ++i) {
            r.data[i] = static_cast<float>(static_cast<double>(t.data[i]) + lambda * d[i]);
        }
        out.tensors.emplace(name, std::move(r));
    }
    return out;
}

static std::size_t keep_count(double density, std::size_t n) {
    const double x = density * static_cast<double>(n);
    double k = std::ceil(x);
    // density * n that lands a hair above an integer is that integer
    if (k - x > 1.0 - 1e-9) k -= 1.0;
    return std::clamp<std::size_t>(static_cast<std::size_t>(k), 1, n);
}

static void trim_tensor(std::vector<double> & v, double density) {
    const std::size_t n = v.size();
    const std::size_t k = keep_count(density, n);
    if (k >= n) return;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto by_magnitude = [&](std::size_t a, std::size_t b) {
        const double ma = std::fabs(v[a]);
        const double mb = std::fabs(v[b]);
        return ma != mb ? ma > mb : a < b;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), by_magnitude);
    for (std::size_t i = k; i < n; ++i) v[order[i]] = 0.0;
}

task_vector ties_trim(const task_vector & tv, double density) {
    if (!(density > 0.0 && density <= 1.0)) {
        fail(error_kind::argument, "TIES density must be in (0, 1]");
    }
    task_vector out = tv;
    for (auto & [_, d] : out.deltas) {
        trim_tensor(d.values, density);
    }
    return out;
}

static void check_same_layout(std::span<const task_vector> tvs) {
    if (tvs.empty()) {
        fail(error_kind::argument, "need at least one task vector");
    }
    for (std::size_t i = 1; i < tvs.size(); ++i) {
        if (tvs[i].deltas.size() != tvs[0].deltas.size()) {
            fail(error_kind::mismatch, "task vectors have different tensor counts");
        }
        for (const auto & [name, d] : tvs[0].deltas) {
            auto it = tvs[i].deltas.find(name);
            if (it == tvs[i].deltas.end() || it->second.shape != d.shape) {
                fail(error_kind::mismatch, "task vectors disagree on tensor '" + name + "'");
            }
        }
    }
}

static std::int8_t elect(std::span<const task_vector> tvs, const std::string & name, std::size_t e) {
    double sum = 0.0;
    for (const auto & tv : tvs) sum += tv.deltas.at(name).values[e];
    return sum < 0.0 ? std::int8_t{-1} : std::int8_t{1};
}

sign_map ties_elect_sign(std::span<const task_vector> tvs) {
    check_same_layout(tvs);
    sign_map signs;
    for (const auto & [name, d] : tvs[0].deltas) {
        std::vector<std::int8_t> s(d.values.size());
        for (std::size_t e = 0; e < s.size(); ++e) s[e] = elect(tvs, name, e);
        signs.emplace(name, std::move(s));
    }
    return signs;
}

static void disjoint_mean_tensor(std::span<const task_vector> trimmed, const std::string & name,
                                 const std::vector<std::int8_t> & sign, std::vector<double> & out) {
    for (std::size_t e = 0; e < out.size(); ++e) {
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto & tv : trimmed) {
            const double v = tv.deltas.at(name).values[e];
            if ((sign[e] > 0 && v > 0.0) || (sign[e] < 0 && v < 0.0)) {
                sum += v;
                ++count;
            }
        }
        out[e] = count ? sum / static_cast<double>(count) : 0.0;
    }
}

task_vector ties_disjoint_mean(std::span<const task_vector> trimmed, const sign_map & signs) {
    check_same_layout(trimmed);
    task_vector merged;
    for (const auto & [name, d] : trimmed[0].deltas) {
        delta_tensor m{d.shape, std::vector<double>(d.values.size())};
        disjoint_mean_tensor(trimmed, name, signs.at(name), m.values);
        merged.deltas.emplace(name, std::move(m));
    }
    return merged;
}

// Shared TIES tail: trimmed task vectors -> elect -> disjoint mean -> base + lambda * merged.
static checkpoint ties_combine(const checkpoint & base, std::span<const task_vector> trimmed, double lambda,
                               unsigned threads) {
    task_vector merged;
    for (const auto & [name, d] : trimmed[0].deltas) {
        merged.deltas.emplace(name, delta_tensor{d.shape, std::vector<double>(d.values.size())});
    }
    std::vector<std::string> names;
    for (const auto & [name, _] : merged.deltas) names.push_back(name);
    parallel_for(names.size(), threads, [&](std::size_t ti) {
        const auto & name = names[ti];
        auto & out = merged.deltas.at(name).values;
        std::vector<std::int8_t> sign(out.size());
        for (std::size_t e = 0; e < sign.size(); ++e) sign[e] = elect(trimmed, name, e);
        disjoint_mean_tensor(trimmed, name, sign, out);
    });
    return apply_task_vector(base, merged, lambda);
}

checkpoint ties_merge(const checkpoint & base, std::span<const checkpoint> experts, const ties_config & cfg,
                      unsigned threads) {
    cfg.validate();
    if (experts.empty()) {
        fail(error_kind::argument, "TIES merge needs at least one expert");
    }
    std::vector<task_vector> trimmed;
    trimmed.reserve(experts.size());
    for (const auto & e : experts) {
        trimmed.push_back(ties_trim(make_task_vector(e, base), cfg.density));
    }
    checkpoint out = ties_combine(base, trimmed, cfg.lambda, threads);
    out.metadata = base.metadata;
    out.metadata["merge.method"] = "ties";
    out.metadata["merge.inputs"] = join_ids(experts);
    out.metadata["merge.density"] = fmt_double(cfg.density);
    out.metadata["merge.lambda"] = fmt_double(cfg.lambda);
    return out;
}

bool dare_drops(std::uint64_t seed, const std::string & tensor_name, std::size_t flat_index, double drop_prob) {
    const std::uint64_t key = derive_seed(derive_seed(seed, tensor_name), flat_index);
    return to_unit(splitmix64(key)) < drop_prob;
}

std::uint64_t dare_expert_seed(std::uint64_t seed, std::size_t expert_index) {
    return derive_seed(seed, static_cast<std::uint64_t>(expert_index));
}

task_vector dare_transform(const task_vector & tv, const dare_config & cfg) {
    cfg.validate();
    const double scale = 1.0 / (1.0 - cfg.drop_prob);
    task_vector out = tv;
    for (auto & [name, d] : out.deltas) {
        const std::uint64_t tensor_key = derive_seed(cfg.seed, name);
        for (std::size_t e = 0; e < d.values.size(); ++e) {
            const bool drop = to_unit(splitmix64(derive_seed(tensor_key, e))) < cfg.drop_prob;
            d.values[e] = drop ? 0.0 : d.values[e] * scale;
        }
    }
    return out;
}

checkpoint dare_ties_merge(const checkpoint & base, std::span<const checkpoint> experts, const dare_config & dare,
                           const ties_config & ties, unsigned threads) {
    dare.validate();
    ties.validate();
    if (experts.empty()) {
        fail(error_kind::argument, "DARE-TIES merge needs at least one expert");
    }
    std::vector<task_vector> trimmed;
    trimmed.reserve(experts.size());
    for (std::size_t i = 0; i < experts.size(); ++i) {
        const dare_config per_expert{dare.drop_prob, dare_expert_seed(dare.seed, i)};
        trimmed.push_back(ties_trim(dare_transform(make_task_vector(experts[i], base), per_expert), ties.density));
    }
    checkpoint out = ties_combine(base, trimmed, ties.lambda, threads);
    out.metadata = base.metadata;
    out.metadata["merge.method"] = "dare_ties";
    out.metadata["merge.inputs"] = join_ids(experts);
    out.metadata["merge.density"] = fmt_double(ties.density);
    out.metadata["merge.lambda"] = fmt_double(ties.lambda);
    out.metadata["merge.drop_prob"] = fmt_double(dare.drop_prob);
    out.metadata["merge.seed"] = std::to_string(dare.seed);
    return out;
}

} // namespace mergelab
