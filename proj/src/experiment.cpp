#include "mergelab/experiment.hpp"

#include "mergelab/csv.hpp"
#include "mergelab/error.hpp"
#include "mergelab/parallel.hpp"
#include "mergelab/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <set>

namespace mergelab::toy {

using json = nlohmann::json;

const char * to_string(init_mode m) {
    return m == init_mode::shared ? "shared" : "independent";
}

init_mode parse_init_mode(const std::string & s) {
    if (s == "shared") return init_mode::shared;
    if (s == "independent") return init_mode::independent;
    fail(error_kind::validation, "unknown init mode '" + s + "' (expected shared or independent)");
}

void experiment_config::validate() const {
    if (n_tasks < 2) fail(error_kind::validation, "config needs n_tasks >= 2");
    task.validate();
    if (hidden.empty() || std::any_of(hidden.begin(), hidden.end(), [](auto h) { return h == 0; })) {
        fail(error_kind::validation, "config \"hidden\" must list positive widths");
    }
    if (!(init_gain > 0.0)) fail(error_kind::validation, "config \"init_gain\" must be positive");
    if (epochs < 0 || finetune_epochs < 0) fail(error_kind::validation, "epochs must be non-negative");
    if (!(lr > 0.0)) fail(error_kind::validation, "config \"lr\" must be positive");
    if (batch_size < 1) fail(error_kind::validation, "config \"batch_size\" must be >= 1");
    if (init_modes.empty()) fail(error_kind::validation, "config needs at least one init mode");
    if (methods.empty()) fail(error_kind::validation, "config needs at least one merge method");
    if (probe_size < 6) fail(error_kind::validation, "config \"probe_size\" must be >= 6");
    ties.validate();
    dare.validate();
    layer_grouping check(grouping);
}

std::vector<std::size_t> experiment_config::layer_sizes() const {
    std::vector<std::size_t> sizes;
    sizes.push_back(static_cast<std::size_t>(task.input_dim));
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(static_cast<std::size_t>(task.n_classes));
    return sizes;
}

namespace {

void reject_unknown(const json & j, const std::set<std::string> & known, const std::string & where) {
    for (const auto & [key, _] : j.items()) {
        if (!known.count(key)) fail(error_kind::validation, where + " has unknown field \"" + key + "\"");
    }
}

double get_number(const json & j, const char * key) {
    if (!j.at(key).is_number()) fail(error_kind::validation, std::string("config field \"") + key + "\" must be a number");
    return j.at(key).get<double>();
}

int get_int(const json & j, const char * key) {
    if (!j.at(key).is_number_integer()) {
        fail(error_kind::validation, std::string("config field \"") + key + "\" must be an integer");
    }
    return j.at(key).get<int>();
}

std::uint64_t get_seed(const json & j, const char * key) {
    if (!j.at(key).is_number_unsigned()) {
        fail(error_kind::validation, std::string("config field \"") + key + "\" must be a non-negative integer");
    }
    return j.at(key).get<std::uint64_t>();
}

std::string get_string(const json & j, const char * key) {
    if (!j.at(key).is_string()) fail(error_kind::validation, std::string("config field \"") + key + "\" must be a string");
    return j.at(key).get<std::string>();
}

} // namespace

experiment_config parse_experiment_config(const std::string & json_text, const std::filesystem::path & base_dir) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error & e) {
        fail(error_kind::format, std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) fail(error_kind::validation, "config must be a JSON object");
    reject_unknown(j,
                   {"n_tasks", "input_dim", "n_classes", "n_train", "n_eval", "separation", "noise", "clusters_per_class", "hidden", "init_gain",
                    "epochs", "finetune_epochs", "lr", "batch_size", "seed", "init_mode", "methods", "ties", "dare",
                    "independent_base", "probe_size", "grouping", "study_method", "spectrum", "output_dir"},
                   "config");

    experiment_config c;
    if (j.contains("n_tasks")) c.n_tasks = get_int(j, "n_tasks");
    if (j.contains("input_dim")) c.task.input_dim = get_int(j, "input_dim");
    if (j.contains("n_classes")) c.task.n_classes = get_int(j, "n_classes");
    if (j.contains("n_train")) c.task.n_train = get_int(j, "n_train");
    if (j.contains("n_eval")) c.task.n_eval = get_int(j, "n_eval");
    if (j.contains("separation")) c.task.separation = get_number(j, "separation");
    if (j.contains("noise")) c.task.noise = get_number(j, "noise");
    if (j.contains("clusters_per_class")) c.task.clusters_per_class = get_int(j, "clusters_per_class");
    if (j.contains("hidden")) {
        if (!j["hidden"].is_array()) fail(error_kind::validation, "config field \"hidden\" must be an array");
        c.hidden.clear();
        for (const auto & h : j["hidden"]) {
            if (!h.is_number_unsigned()) fail(error_kind::validation, "config field \"hidden\" must hold positive integers");
            c.hidden.push_back(h.get<std::size_t>());
        }
    }
    if (j.contains("init_gain")) c.init_gain = get_number(j, "init_gain");
    if (j.contains("epochs")) c.epochs = get_int(j, "epochs");
    if (j.contains("finetune_epochs")) c.finetune_epochs = get_int(j, "finetune_epochs");
    if (j.contains("lr")) c.lr = get_number(j, "lr");
    if (j.contains("batch_size")) c.batch_size = get_int(j, "batch_size");
    if (j.contains("seed")) c.seed = get_seed(j, "seed");
    if (j.contains("init_mode")) {
        c.init_modes.clear();
        const auto & m = j["init_mode"];
        if (m.is_string()) {
            if (m.get<std::string>() == "mixed") {
                c.init_modes = {init_mode::shared, init_mode::independent};
            } else {
                c.init_modes.push_back(parse_init_mode(m.get<std::string>()));
            }
        } else if (m.is_array()) {
            for (const auto & x : m) {
                if (!x.is_string()) fail(error_kind::validation, "config field \"init_mode\" must hold strings");
                c.init_modes.push_back(parse_init_mode(x.get<std::string>()));
            }
        } else {
            fail(error_kind::validation, "config field \"init_mode\" must be a string or an array");
        }
    }
    if (j.contains("methods")) {
        if (!j["methods"].is_array()) fail(error_kind::validation, "config field \"methods\" must be an array");
        c.methods.clear();
        for (const auto & x : j["methods"]) {
            if (!x.is_string()) fail(error_kind::validation, "config field \"methods\" must hold strings");
            c.methods.push_back(parse_merge_method(x.get<std::string>()));
        }
    }
    if (j.contains("ties")) {
        const auto & t = j["ties"];
        if (!t.is_object()) fail(error_kind::validation, "config field \"ties\" must be an object");
        reject_unknown(t, {"density", "lambda"}, "config \"ties\"");
        if (t.contains("density")) c.ties.density = get_number(t, "density");
        if (t.contains("lambda")) c.ties.lambda = get_number(t, "lambda");
    }
    if (j.contains("dare")) {
        const auto & d = j["dare"];
        if (!d.is_object()) fail(error_kind::validation, "config field \"dare\" must be an object");
        reject_unknown(d, {"drop_prob", "seed"}, "config \"dare\"");
        if (d.contains("drop_prob")) c.dare.drop_prob = get_number(d, "drop_prob");
        if (d.contains("seed")) c.dare.seed = get_seed(d, "seed");
    }
    if (j.contains("independent_base")) {
        const auto s = get_string(j, "independent_base");
        if (s == "reference") c.independent_base = base_choice::reference;
        else if (s == "expert_init") c.independent_base = base_choice::expert_init;
        else fail(error_kind::validation, "config field \"independent_base\" must be \"reference\" or \"expert_init\"");
    }
    if (j.contains("probe_size")) c.probe_size = get_int(j, "probe_size");
    if (j.contains("grouping")) c.grouping = get_string(j, "grouping");
    if (j.contains("study_method")) c.study_method = parse_merge_method(get_string(j, "study_method"));
    if (j.contains("spectrum")) {
        const auto & s = j["spectrum"];
        if (!s.is_object()) fail(error_kind::validation, "config field \"spectrum\" must be an object");
        reject_unknown(s, {"order_seed", "method"}, "config \"spectrum\"");
        if (s.contains("order_seed")) c.spectrum_order_seed = get_seed(s, "order_seed");
        if (s.contains("method")) c.spectrum_method = parse_merge_method(get_string(s, "method"));
    }
    if (j.contains("output_dir")) {
        std::filesystem::path p(get_string(j, "output_dir"));
        c.output_dir = p.is_absolute() || base_dir.empty() ? p : base_dir / p;
    }
    try {
        c.validate();
    } catch (const error & e) {
        throw error(error_kind::validation, e.what());
    }
    return c;
}

experiment_config load_experiment_config(const std::filesystem::path & path) {
    return parse_experiment_config(read_text_file(path), path.parent_path());
}

std::vector<task_spec> make_task_specs(const experiment_config & cfg) {
    std::vector<task_spec> specs;
    const std::uint64_t root = derive_seed(cfg.seed, "tasks");
    for (int i = 0; i < cfg.n_tasks; ++i) {
        task_spec s = cfg.task;
        s.seed = derive_seed(root, static_cast<std::uint64_t>(i));
        specs.push_back(s);
    }
    return specs;
}

const model & expert_pool::merge_base(std::size_t i, base_choice choice) const {
    if (mode == init_mode::shared) return shared_base;
    return choice == base_choice::expert_init ? inits.at(i) : reference_base;
}

expert_pool train_experts(std::span<const task_spec> specs, init_mode mode, const experiment_config & cfg,
                          unsigned threads) {
    if (specs.empty()) fail(error_kind::argument, "need at least one task");
    const auto sizes = cfg.layer_sizes();
    expert_pool pool;
    pool.mode = mode;
    pool.shared_base = init_model(sizes, derive_seed(cfg.seed, "shared_base"), cfg.init_gain);
    pool.reference_base = init_model(sizes, derive_seed(cfg.seed, "reference_base"), cfg.init_gain);
    pool.tasks.resize(specs.size());
    pool.inits.resize(specs.size());
    pool.experts.resize(specs.size());
    pool.own_accuracy.resize(specs.size());

    parallel_for(specs.size(), threads, [&](std::size_t i) {
        pool.tasks[i] = generate_task(specs[i]);
        pool.inits[i] = mode == init_mode::shared ? pool.shared_base
                                                  : init_model(sizes, derive_seed(specs[i].seed, "init"), cfg.init_gain);
        train_config tc;
        tc.epochs = mode == init_mode::shared ? cfg.finetune_epochs : cfg.epochs;
        tc.lr = cfg.lr;
        tc.batch_size = cfg.batch_size;
        tc.seed = derive_seed(specs[i].seed, "sgd");
        try {
            pool.experts[i] = train(pool.inits[i], pool.tasks[i].train, tc).trained;
        } catch (const error & e) {
            throw error(e.kind(), "task " + std::to_string(i) + ": " + e.what());
        }
        pool.experts[i].params.metadata["name"] = std::string(to_string(mode)) + "_expert_" + std::to_string(i);
        pool.own_accuracy[i] = evaluate(pool.experts[i], pool.tasks[i].eval).accuracy;
    });
    return pool;
}

std::string experiment_record::pair_id() const {
    return std::to_string(task_a) + "-" + std::to_string(task_b);
}

const method_outcome & experiment_record::outcome(merge_method m) const {
    for (const auto & o : methods) {
        if (o.method == m) return o;
    }
    fail(error_kind::argument, std::string("record has no outcome for method ") + mergelab::to_string(m));
}

checkpoint merge_with(merge_method method, const checkpoint & base, std::span<const checkpoint> experts,
                      const experiment_config & cfg) {
    switch (method) {
        case merge_method::linear:    return linear_merge(experts, merge_weights::equal(experts.size()));
        case merge_method::ties:      return ties_merge(base, experts, cfg.ties);
        case merge_method::dare_ties: return dare_ties_merge(base, experts, cfg.dare, cfg.ties);
    }
    fail(error_kind::argument, "unknown merge method");
}

static matrix stack_rows(const matrix & a, const matrix & b) {
    matrix out(a.rows + b.rows, a.cols);
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
    return out;
}

static activation_set capture(const model & m, const matrix & probe, const std::string & probe_id) {
    activation_set s;
    s.probe_id = probe_id;
    s.layers = forward(m, probe).activations;
    return s;
}

std::vector<experiment_record> run_pairwise_experiment(const expert_pool & pool, const experiment_config & cfg,
                                                       unsigned threads) {
    const std::size_t n = pool.experts.size();
    if (n < 2) fail(error_kind::argument, "pairwise experiment needs at least 2 tasks");
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    }
    const layer_grouping grouping(cfg.grouping);
    const double chance = 1.0 / static_cast<double>(pool.tasks.front().spec.n_classes);

    std::vector<experiment_record> records(pairs.size());
    parallel_for(pairs.size(), threads, [&](std::size_t p) {
        const auto [a, b] = pairs[p];
        experiment_record rec;
        rec.task_a = a;
        rec.task_b = b;
        rec.mode = pool.mode;
        rec.chance = chance;
        rec.expert_a = pool.own_accuracy[a];
        rec.expert_b = pool.own_accuracy[b];

        const std::vector<checkpoint> inputs{pool.experts[a].params, pool.experts[b].params};
        const checkpoint & base = pool.merge_base(a, cfg.independent_base).params;
        for (auto method : cfg.methods) {
            const model merged = with_params(pool.experts[a], merge_with(method, base, inputs, cfg));
            method_outcome o;
            o.method = method;
            o.merged_a = evaluate(merged, pool.tasks[a].eval).accuracy;
            o.merged_b = evaluate(merged, pool.tasks[b].eval).accuracy;
            o.delta = merge_delta({rec.expert_a, rec.expert_b}, {o.merged_a, o.merged_b},
                                  "task" + std::to_string(a), "task" + std::to_string(b));
            rec.methods.push_back(std::move(o));
        }

        rec.similarity = parametric_diff(pool.experts[a].params, pool.experts[b].params, grouping);
        // probe seed depends on the pair, never on scheduling
        const std::uint64_t probe_seed = derive_seed(derive_seed(cfg.seed, "probe"), a * n + b);
        const std::size_t half = static_cast<std::size_t>(cfg.probe_size) / 2;
        const matrix probe = stack_rows(sample_task(pool.tasks[a], half, probe_seed).x,
                                        sample_task(pool.tasks[b], static_cast<std::size_t>(cfg.probe_size) - half,
                                                    probe_seed).x);
        const std::string probe_id = "pair" + rec.pair_id();
        attach_cka(rec.similarity, cka_profile(capture(pool.experts[a], probe, probe_id),
                                               capture(pool.experts[b], probe, probe_id)));
        records[p] = std::move(rec);
    });
    return records;
}

std::vector<experiment_record> run_pairwise_experiment(std::span<const task_spec> specs, init_mode mode,
                                                       const experiment_config & cfg, unsigned threads) {
    if (specs.size() < 2) fail(error_kind::argument, "pairwise experiment needs at least 2 tasks");
    return run_pairwise_experiment(train_experts(specs, mode, cfg, threads), cfg, threads);
}

double spectrum_result::mean_in_merge(std::size_t k) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto & r : rows) {
        if (r.k == k && r.in_merge) {
            s += r.accuracy;
            ++n;
        }
    }
    if (n == 0) fail(error_kind::argument, "no spectrum rows for k = " + std::to_string(k));
    return s / static_cast<double>(n);
}

spectrum_result spectrum_experiment(const expert_pool & pool, std::uint64_t order_seed, merge_method method,
                                    const experiment_config & cfg, unsigned threads) {
    const std::size_t n = pool.experts.size();
    if (n < 2) fail(error_kind::argument, "spectrum experiment needs at least 2 tasks");
    spectrum_result res;
    res.chance = 1.0 / static_cast<double>(pool.tasks.front().spec.n_classes);
    res.order.resize(n);
    std::iota(res.order.begin(), res.order.end(), std::size_t{0});
    rng gen(order_seed);
    gen.shuffle(res.order.begin(), res.order.end());

    const checkpoint & base = pool.merge_base(res.order.front(), cfg.independent_base).params;
    std::vector<std::vector<spectrum_row>> per_k(n);
    parallel_for(n, threads, [&](std::size_t ki) {
        const std::size_t k = ki + 1;
        model merged;
        if (k == 1) {
            merged = pool.experts[res.order.front()];
        } else {
            std::vector<checkpoint> inputs;
            for (std::size_t i = 0; i < k; ++i) inputs.push_back(pool.experts[res.order[i]].params);
            merged = with_params(pool.experts.front(), merge_with(method, base, inputs, cfg));
        }
        for (std::size_t t = 0; t < n; ++t) {
            const bool in_merge =
                std::find(res.order.begin(), res.order.begin() + static_cast<std::ptrdiff_t>(k), t) !=
                res.order.begin() + static_cast<std::ptrdiff_t>(k);
            per_k[ki].push_back({k, t, in_merge, evaluate(merged, pool.tasks[t].eval).accuracy});
        }
    });
    for (auto & rows : per_k) res.rows.insert(res.rows.end(), rows.begin(), rows.end());
    return res;
}

std::vector<correlation_report> cka_delta_study(std::span<const experiment_record> records, merge_method method,
                                                const correlate_options & opts) {
    if (records.size() < 3) fail(error_kind::argument, "CKA-delta study needs at least 3 records");
    struct measure {
        const char * name;
        std::optional<double> similarity_report::*field;
    };
    const measure measures[] = {
        {"mean_cka", &similarity_report::mean_cka},
        {"mean_cosine", &similarity_report::mean_cosine},
        {"mean_stable_rank_diff", &similarity_report::mean_stable_rank_diff},
        {"mean_l2_diff", &similarity_report::mean_l2_diff},
    };
    std::vector<correlation_report> out;
    for (const auto & m : measures) {
        std::vector<double> values, neg_delta;
        for (const auto & r : records) {
            const auto & v = r.similarity.*(m.field);
            if (!v) continue;
            values.push_back(*v);
            neg_delta.push_back(-r.outcome(method).delta.delta);
        }
        out.push_back(correlate_measures(m.name, values, neg_delta, opts));
    }
    return out;
}

std::string records_csv(std::span<const experiment_record> records) {
    std::string out = "pair_id,init_mode,task_a,task_b,method,chance,expert_a_acc,expert_b_acc,merged_a_acc,"
                      "merged_b_acc,delta,mean_cosine,mean_stable_rank_diff,mean_l2_diff,mean_cka\n";
    for (const auto & r : records) {
        for (const auto & o : r.methods) {
            out += r.pair_id() + "," + to_string(r.mode) + "," + std::to_string(r.task_a) + "," +
                   std::to_string(r.task_b) + "," + mergelab::to_string(o.method) + "," + format_number(r.chance) +
                   "," + format_number(r.expert_a) + "," + format_number(r.expert_b) + "," +
                   format_number(o.merged_a) + "," + format_number(o.merged_b) + "," + format_number(o.delta.delta) +
                   "," + format_optional(r.similarity.mean_cosine) + "," +
                   format_optional(r.similarity.mean_stable_rank_diff) + "," +
                   format_optional(r.similarity.mean_l2_diff) + "," + format_optional(r.similarity.mean_cka) + "\n";
        }
    }
    return out;
}

std::string spectrum_csv(const spectrum_result & s) {
    std::string out = "k,task,accuracy,in_merge\n";
    for (const auto & r : s.rows) {
        out += std::to_string(r.k) + "," + std::to_string(r.task) + "," + format_number(r.accuracy) + "," +
               (r.in_merge ? "1" : "0") + "\n";
    }
    return out;
}

} // namespace mergelab::toy
