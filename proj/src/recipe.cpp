#include "mergelab/recipe.hpp"

#include "mergelab/error.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace mergelab {

using json = nlohmann::json;

const char * to_string(merge_method m) {
    switch (m) {
        case merge_method::linear:    return "linear";
        case merge_method::ties:      return "ties";
        case merge_method::dare_ties: return "dare_ties";
    }
    return "?";
}

merge_method parse_merge_method(const std::string & s) {
    if (s == "linear")    return merge_method::linear;
    if (s == "ties")      return merge_method::ties;
    if (s == "dare_ties") return merge_method::dare_ties;
    fail(error_kind::validation, "unknown merge method '" + s + "'");
}

static double number_field(const json & j, const char * key) {
    if (!j.at(key).is_number()) {
        fail(error_kind::validation, std::string("recipe field \"") + key + "\" must be a number");
    }
    return j.at(key).get<double>();
}

merge_recipe parse_recipe(const std::string & json_text, const std::filesystem::path & base_dir) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error & e) {
        fail(error_kind::format, std::string("recipe is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        fail(error_kind::validation, "recipe must be a JSON object");
    }
    static const std::set<std::string> known = {"method", "inputs", "weights", "base",  "density",
                                                "lambda", "drop_prob", "seed", "output"};
    for (const auto & [key, _] : j.items()) {
        if (!known.count(key)) {
            fail(error_kind::validation, "recipe has unknown field \"" + key + "\"");
        }
    }
    auto resolve = [&](const std::string & p) {
        std::filesystem::path path(p);
        return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    };

    merge_recipe r;
    if (!j.contains("method") || !j["method"].is_string()) {
        fail(error_kind::validation, "recipe field \"method\" is required and must be a string");
    }
    r.method = parse_merge_method(j["method"].get<std::string>());

    if (!j.contains("inputs") || !j["inputs"].is_array() || j["inputs"].empty()) {
        fail(error_kind::validation, "recipe field \"inputs\" is required and must be a non-empty array");
    }
    for (const auto & p : j["inputs"]) {
        if (!p.is_string()) fail(error_kind::validation, "recipe field \"inputs\" must hold path strings");
        r.inputs.push_back(resolve(p.get<std::string>()));
    }

    if (j.contains("weights")) {
        if (!j["weights"].is_array()) fail(error_kind::validation, "recipe field \"weights\" must be an array");
        std::vector<double> w;
        for (const auto & x : j["weights"]) {
            if (!x.is_number()) fail(error_kind::validation, "recipe field \"weights\" must hold numbers");
            w.push_back(x.get<double>());
        }
        if (w.size() != r.inputs.size()) {
            fail(error_kind::validation, "recipe field \"weights\" has " + std::to_string(w.size()) +
                                             " entries for " + std::to_string(r.inputs.size()) + " inputs");
        }
        r.weights = std::move(w);
    }

    if (j.contains("base")) {
        if (!j["base"].is_string()) fail(error_kind::validation, "recipe field \"base\" must be a path string");
        r.base = resolve(j["base"].get<std::string>());
    } else if (r.method != merge_method::linear) {
        fail(error_kind::validation,
             std::string("recipe field \"base\" is required for method \"") + to_string(r.method) + "\"");
    }

    if (j.contains("density")) r.ties.density = number_field(j, "density");
    if (j.contains("lambda")) r.ties.lambda = number_field(j, "lambda");
    if (j.contains("drop_prob")) r.dare.drop_prob = number_field(j, "drop_prob");
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned()) {
            fail(error_kind::validation, "recipe field \"seed\" must be a non-negative integer");
        }
        r.dare.seed = j["seed"].get<std::uint64_t>();
    }
    if (!(r.ties.density > 0.0 && r.ties.density <= 1.0)) {
        fail(error_kind::validation, "recipe field \"density\" must be in (0, 1]");
    }
    if (!(r.ties.lambda > 0.0)) {
        fail(error_kind::validation, "recipe field \"lambda\" must be positive");
    }
    if (!(r.dare.drop_prob >= 0.0 && r.dare.drop_prob < 1.0)) {
        fail(error_kind::validation, "recipe field \"drop_prob\" must be in [0, 1)");
    }

    if (!j.contains("output") || !j["output"].is_string()) {
        fail(error_kind::validation, "recipe field \"output\" is required and must be a path string");
    }
    r.output = resolve(j["output"].get<std::string>());
    return r;
}

merge_recipe load_recipe(const std::filesystem::path & path) {
    std::ifstream in(path);
    if (!in) {
        fail(error_kind::io, "cannot open recipe '" + path.string() + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_recipe(ss.str(), path.parent_path());
}

checkpoint run_merge(const merge_recipe & recipe, std::span<const checkpoint> inputs, const checkpoint * base,
                     unsigned threads) {
    switch (recipe.method) {
        case merge_method::linear: {
            const merge_weights w = recipe.weights ? merge_weights(*recipe.weights) : merge_weights::equal(inputs.size());
            return linear_merge(inputs, w, threads);
        }
        case merge_method::ties:
            if (!base) fail(error_kind::validation, "TIES merge needs a base checkpoint");
            return ties_merge(*base, inputs, recipe.ties, threads);
        case merge_method::dare_ties:
            if (!base) fail(error_kind::validation, "DARE-TIES merge needs a base checkpoint");
            return dare_ties_merge(*base, inputs, recipe.dare, recipe.ties, threads);
    }
    fail(error_kind::argument, "unknown merge method");
}

} // namespace mergelab
