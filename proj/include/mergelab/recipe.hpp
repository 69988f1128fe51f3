#pragma once

#include "mergelab/checkpoint.hpp"
#include "mergelab/merge.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mergelab {

enum class merge_method { linear, ties, dare_ties };

const char * to_string(merge_method m);
merge_method parse_merge_method(const std::string & s);

// One merge job as described by a JSON recipe file. Relative paths are
// resolved against the recipe's directory.
struct merge_recipe {
    merge_method method = merge_method::linear;
    std::vector<std::filesystem::path> inputs;
    std::optional<std::vector<double>> weights;
    std::optional<std::filesystem::path> base;
    ties_config ties;
    dare_config dare;
    std::filesystem::path output;
};

// Throws validation errors naming the offending field.
merge_recipe parse_recipe(const std::string & json_text, const std::filesystem::path & base_dir = {});
merge_recipe load_recipe(const std::filesystem::path & path);

// Runs the merge on already-loaded checkpoints.
checkpoint run_merge(const merge_recipe & recipe, std::span<const checkpoint> inputs, const checkpoint * base,
                     unsigned threads = 1);

} // namespace mergelab
