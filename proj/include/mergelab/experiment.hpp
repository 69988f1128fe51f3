#pragma once

#include "mergelab/merge.hpp"
#include "mergelab/recipe.hpp"
#include "mergelab/similarity.hpp"
#include "mergelab/stats.hpp"
#include "mergelab/toy.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mergelab::toy {

enum class init_mode { shared, independent };

const char * to_string(init_mode m);
init_mode parse_init_mode(const std::string & s);

// Which checkpoint TIES/DARE-TIES subtract in independent mode: a separate
// seeded reference init, or the init of the pair's first expert.
enum class base_choice { reference, expert_init };

struct experiment_config {
    int n_tasks = 10;
    task_spec task;              // template; seeds are derived per task
    std::vector<std::size_t> hidden{64, 64};
    double init_gain = 4.0;
    int epochs = 10;             // independent experts
    int finetune_epochs = 5;     // shared-init experts
    double lr = 0.05;
    int batch_size = 32;
    std::uint64_t seed = 1;
    std::vector<init_mode> init_modes{init_mode::independent};
    std::vector<merge_method> methods{merge_method::linear, merge_method::ties, merge_method::dare_ties};
    ties_config ties;
    dare_config dare;
    base_choice independent_base = base_choice::reference;
    int probe_size = 512;
    std::string grouping = "layer_{}";
    merge_method study_method = merge_method::linear;
    std::uint64_t spectrum_order_seed = 7;
    merge_method spectrum_method = merge_method::linear;
    std::filesystem::path output_dir = "toy_out";

    void validate() const;
    std::vector<std::size_t> layer_sizes() const;
};

// Unknown keys are validation errors.
experiment_config parse_experiment_config(const std::string & json_text, const std::filesystem::path & base_dir = {});
experiment_config load_experiment_config(const std::filesystem::path & path);

std::vector<task_spec> make_task_specs(const experiment_config & cfg);

struct expert_pool {
    init_mode mode = init_mode::independent;
    std::vector<task> tasks;
    std::vector<model> inits;   // starting point of each expert
    std::vector<model> experts;
    model shared_base;          // shared mode: the common init
    model reference_base;       // independent mode: the designated reference init
    std::vector<double> own_accuracy;

    // Base checkpoint for task-vector methods when merging experts i and j.
    const model & merge_base(std::size_t i, base_choice choice) const;
};

// Trains one expert per task. Expert seeds depend on the task spec, not on
// its position, so identical specs give identical experts.
expert_pool train_experts(std::span<const task_spec> specs, init_mode mode, const experiment_config & cfg,
                          unsigned threads = 1);

struct method_outcome {
    merge_method method = merge_method::linear;
    double merged_a = 0.0; // merged model on task a
    double merged_b = 0.0; // merged model on task b
    delta_record delta;
};

struct experiment_record {
    std::size_t task_a = 0;
    std::size_t task_b = 0;
    init_mode mode = init_mode::independent;
    double chance = 0.0;
    double expert_a = 0.0; // expert a on task a
    double expert_b = 0.0; // expert b on task b
    std::vector<method_outcome> methods;
    similarity_report similarity;

    std::string pair_id() const;
    const method_outcome & outcome(merge_method m) const;
};

checkpoint merge_with(merge_method method, const checkpoint & base, std::span<const checkpoint> experts,
                      const experiment_config & cfg);

// Every unordered pair of tasks: merge, evaluate, compare.
std::vector<experiment_record> run_pairwise_experiment(const expert_pool & pool, const experiment_config & cfg,
                                                       unsigned threads = 1);
std::vector<experiment_record> run_pairwise_experiment(std::span<const task_spec> specs, init_mode mode,
                                                       const experiment_config & cfg, unsigned threads = 1);

struct spectrum_row {
    std::size_t k = 0;
    std::size_t task = 0;
    bool in_merge = false;
    double accuracy = 0.0;
};

struct spectrum_result {
    std::vector<std::size_t> order; // task indices in merge order
    std::vector<spectrum_row> rows;
    double chance = 0.0;

    // Mean accuracy of the k-expert merge over the tasks it includes.
    double mean_in_merge(std::size_t k) const;
};

// Cumulative equal-weight merges of the first k experts in a seeded order,
// k = 1..n; k = 1 evaluates the first expert itself.
spectrum_result spectrum_experiment(const expert_pool & pool, std::uint64_t order_seed, merge_method method,
                                    const experiment_config & cfg, unsigned threads = 1);

// Correlates mean CKA, mean cosine, stable-rank difference and L2 difference
// against -delta of `method`.
std::vector<correlation_report> cka_delta_study(std::span<const experiment_record> records, merge_method method,
                                                const correlate_options & opts = {});

std::string records_csv(std::span<const experiment_record> records);
std::string spectrum_csv(const spectrum_result & s);

} // namespace mergelab::toy
