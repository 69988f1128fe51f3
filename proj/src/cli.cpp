#include "mergelab/cli.hpp"

#include "mergelab/checkpoint.hpp"
#include "mergelab/csv.hpp"
#include "mergelab/digest.hpp"
#include "mergelab/experiment.hpp"
#include "mergelab/recipe.hpp"
#include "mergelab/rng.hpp"
#include "mergelab/similarity.hpp"
#include "mergelab/stats.hpp"
#include "mergelab/svg.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

namespace mergelab::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

int exit_code_for(error_kind kind) {
    switch (kind) {
        case error_kind::usage:
            return usage;
        case error_kind::degenerate:
        case error_kind::training:
            return numeric;
        default:
            return invalid;
    }
}

namespace {

struct common_opts {
    unsigned threads = 1;
    std::uint64_t seed = 0;
    bool to_stdout = false;
    std::string output;
};

void add_common(CLI::App * app, common_opts & o, bool with_seed = false) {
    app->add_option("--threads", o.threads, "Worker threads (affects speed only)")->check(CLI::PositiveNumber);
    app->add_flag("--stdout", o.to_stdout, "Print machine-readable results on standard output");
    if (with_seed) app->add_option("--seed", o.seed, "Random seed");
}

json file_entry(const fs::path & p) {
    return {{"path", p.string()}, {"sha256", file_sha256(p)}};
}

// `<output>.manifest.json` next to a written result.
void write_sidecar(const fs::path & output, const std::string & command, json parameters, json inputs) {
    json m;
    m["command"] = command;
    m["parameters"] = std::move(parameters);
    m["inputs"] = std::move(inputs);
    m["outputs"] = json::array({file_entry(output)});
    write_text_file(fs::path(output.string() + ".manifest.json"), m.dump(2) + "\n");
}

// Writes a text result to --output and/or standard output.
void emit(const std::string & text, const common_opts & o, std::ostream & out, const std::string & command,
          const json & parameters, const json & inputs) {
    if (!o.output.empty()) {
        write_text_file(o.output, text);
        write_sidecar(o.output, command, parameters, inputs);
    }
    if (o.to_stdout || o.output.empty()) out << text;
}

int cmd_merge(const std::string & recipe_path, const common_opts & o, const std::string & dtype_name,
              std::ostream & out, std::ostream & err) {
    merge_recipe recipe = load_recipe(recipe_path);
    if (!o.output.empty()) recipe.output = o.output;

    std::vector<checkpoint> inputs;
    json input_entries = json::array();
    for (const auto & p : recipe.inputs) {
        err << "loading " << p.string() << "\n";
        inputs.push_back(load_checkpoint(p));
        inputs.back().metadata["name"] = p.filename().string();
        input_entries.push_back({{"path", p.string()}, {"content_digest", content_digest(inputs.back())}});
    }
    std::optional<checkpoint> base;
    if (recipe.base) {
        err << "loading base " << recipe.base->string() << "\n";
        base = load_checkpoint(*recipe.base);
    }
    checkpoint merged = run_merge(recipe, inputs, base ? &*base : nullptr, o.threads);
    if (dtype_name.empty()) {
        save_checkpoint(merged, recipe.output);
    } else {
        save_checkpoint(merged, recipe.output, parse_dtype(dtype_name));
    }

    const checkpoint written = load_checkpoint(recipe.output);
    json side;
    side["recipe"] = {{"path", recipe_path}, {"sha256", file_sha256(recipe_path)}};
    side["method"] = to_string(recipe.method);
    json params;
    if (recipe.method == merge_method::linear) {
        params["weights"] = recipe.weights ? merge_weights(*recipe.weights).values()
                                           : merge_weights::equal(inputs.size()).values();
    } else {
        params["density"] = recipe.ties.density;
        params["lambda"] = recipe.ties.lambda;
        if (recipe.method == merge_method::dare_ties) {
            params["drop_prob"] = recipe.dare.drop_prob;
            params["seed"] = recipe.dare.seed;
        }
    }
    side["parameters"] = params;
    side["inputs"] = input_entries;
    if (base) side["base"] = {{"path", recipe.base->string()}, {"content_digest", content_digest(*base)}};
    side["output"] = {{"path", recipe.output.string()},
                      {"content_digest", content_digest(written)},
                      {"sha256", file_sha256(recipe.output)}};
    write_text_file(fs::path(recipe.output.string() + ".manifest.json"), side.dump(2) + "\n");
    if (o.to_stdout) out << content_digest(written) << "\n";
    err << "wrote " << recipe.output.string() << "\n";
    return ok;
}

int cmd_diff(const std::string & a_path, const std::string & b_path, const std::string & grouping,
             const std::string & act_a, const std::string & act_b, bool include_other, std::size_t max_rows,
             const common_opts & o, std::ostream & out, std::ostream & err) {
    if (act_a.empty() != act_b.empty()) {
        fail(error_kind::usage, "--activations-a and --activations-b must be given together");
    }
    const checkpoint a = load_checkpoint(a_path);
    const checkpoint b = load_checkpoint(b_path);
    similarity_report report = parametric_diff(a, b, layer_grouping(grouping), include_other);
    json inputs = json::array({file_entry(a_path), file_entry(b_path)});
    const bool with_cka = !act_a.empty();
    if (with_cka) {
        activation_set sa = load_activation_set(act_a);
        activation_set sb = load_activation_set(act_b);
        if (sa.n_samples() != sb.n_samples()) {
            fail(error_kind::validation, "activation sets have different sample counts");
        }
        const auto rows = subsample_rows(sa.n_samples(), max_rows, o.seed);
        if (rows.size() != sa.n_samples()) {
            sa = sa.take_rows(rows);
            sb = sb.take_rows(rows);
        }
        const auto profile = cka_profile(sa, sb);
        for (std::size_t l = 0; l < profile.per_layer.size(); ++l) {
            if (!profile.per_layer[l]) err << "warning: CKA undefined for layer " << l << " (zero variance)\n";
        }
        attach_cka(report, profile, include_other);
        inputs.push_back(file_entry(act_a));
        inputs.push_back(file_entry(act_b));
    }
    const json params = {{"grouping", grouping}, {"include_other", include_other}, {"max_rows", max_rows},
                         {"seed", o.seed}};
    emit(similarity_report_csv(report, with_cka), o, out, "diff", params, inputs);
    return ok;
}

int cmd_cka(const std::string & act_a, const std::string & act_b, std::size_t max_rows, const common_opts & o,
            std::ostream & out, std::ostream & err) {
    activation_set sa = load_activation_set(act_a);
    activation_set sb = load_activation_set(act_b);
    if (sa.n_samples() != sb.n_samples()) {
        fail(error_kind::validation, "activation sets have different sample counts");
    }
    const auto rows = subsample_rows(sa.n_samples(), max_rows, o.seed);
    if (rows.size() != sa.n_samples()) {
        sa = sa.take_rows(rows);
        sb = sb.take_rows(rows);
    }
    const auto profile = cka_profile(sa, sb);
    std::string csv = "layer,cka\n";
    for (std::size_t l = 0; l < profile.per_layer.size(); ++l) {
        if (!profile.per_layer[l]) err << "warning: CKA undefined for layer " << l << " (zero variance)\n";
        csv += std::to_string(l) + "," + format_optional(profile.per_layer[l]) + "\n";
    }
    csv += "mean," + format_optional(profile.mean) + "\n";
    emit(csv, o, out, "cka", {{"max_rows", max_rows}, {"seed", o.seed}},
         json::array({file_entry(act_a), file_entry(act_b)}));
    return ok;
}

struct delta_opts {
    std::string scores;
    std::string expert_a, task_a, expert_b, task_b, merged;
    int resamples = 1000;
    std::string ci_output;
};

int cmd_delta(const delta_opts & d, const common_opts & o, std::ostream & out, std::ostream &) {
    const score_table table = load_score_table(d.scores);
    struct cell {
        std::string model, task;
        std::vector<double> items;
        bootstrap_ci ci;
    };
    std::vector<cell> cells = {{d.expert_a, d.task_a, {}, {}},
                               {d.expert_b, d.task_b, {}, {}},
                               {d.merged, d.task_a, {}, {}},
                               {d.merged, d.task_b, {}, {}}};
    for (std::size_t i = 0; i < cells.size(); ++i) {
        cells[i].items = table.items(cells[i].model, cells[i].task);
        cells[i].ci = bootstrap(cells[i].items, d.resamples, derive_seed(o.seed, i), o.threads);
    }
    const delta_record rec = merge_delta({cells[0].ci.mean, cells[1].ci.mean}, {cells[2].ci.mean, cells[3].ci.mean},
                                         d.expert_a, d.expert_b);
    std::string csv = "expert_a,task_a,expert_b,task_b,merged,expert_a_acc,expert_b_acc,merged_a_acc,merged_b_acc,"
                      "delta,delta_pp\n";
    csv += d.expert_a + "," + d.task_a + "," + d.expert_b + "," + d.task_b + "," + d.merged + "," +
           format_number(rec.expert_scores.first) + "," + format_number(rec.expert_scores.second) + "," +
           format_number(rec.merged_scores.first) + "," + format_number(rec.merged_scores.second) + "," +
           format_number(rec.delta) + "," + format_number(100.0 * rec.delta) + "\n";
    const json params = {{"resamples", d.resamples}, {"seed", o.seed}};
    const json inputs = json::array({file_entry(d.scores)});
    emit(csv, o, out, "delta", params, inputs);
    if (!d.ci_output.empty()) {
        std::string t = "model_id,task_id,n_items,accuracy,se,ci_low,ci_high,n_resamples,seed\n";
        for (const auto & c : cells) {
            t += c.model + "," + c.task + "," + std::to_string(c.items.size()) + "," + format_number(c.ci.mean) +
                 "," + format_number(c.ci.se) + "," + format_number(c.ci.ci_low) + "," + format_number(c.ci.ci_high) +
                 "," + std::to_string(c.ci.n_resamples) + "," + std::to_string(c.ci.seed) + "\n";
        }
        write_text_file(d.ci_output, t);
        write_sidecar(d.ci_output, "delta", params, inputs);
    }
    return ok;
}

const std::vector<std::string> default_measures = {"mean_cka", "mean_cosine", "mean_stable_rank_diff",
                                                   "mean_l2_diff"};

int cmd_correlate(const std::string & input, const std::string & delta_column, std::vector<std::string> measures,
                  const std::string & method, bool raw_delta, bool permutation, const common_opts & o,
                  std::ostream & out, std::ostream &) {
    const csv_table t = read_csv(input);
    const std::size_t cd = t.column(delta_column);
    const bool filter_method = t.has_column("method") && !method.empty();
    const std::size_t cmeth = filter_method ? t.column("method") : 0;
    if (measures.empty()) {
        for (const auto & m : default_measures) {
            if (t.has_column(m)) measures.push_back(m);
        }
        if (measures.empty()) fail(error_kind::usage, "no known measure columns; pass --measures");
    }
    correlate_options opts;
    opts.permutation_p = permutation;
    opts.seed = o.seed;
    std::vector<correlation_report> reports;
    for (const auto & m : measures) {
        const std::size_t cm = t.column(m);
        std::vector<double> values, deltas;
        for (const auto & row : t.rows) {
            if (filter_method && row[cmeth] != method) continue;
            if (row[cm].empty()) continue;
            values.push_back(parse_number(row[cm], m + " column"));
            const double dv = parse_number(row[cd], delta_column + " column");
            deltas.push_back(raw_delta ? dv : -dv);
        }
        reports.push_back(correlate_measures(m, values, deltas, opts));
    }
    const json params = {{"delta_column", delta_column}, {"measures", measures},    {"method", method},
                         {"against", raw_delta ? "delta" : "-delta"}, {"permutation_p", permutation},
                         {"seed", o.seed}};
    emit(correlation_csv(reports), o, out, "correlate", params, json::array({file_entry(input)}));
    return ok;
}

void write_manifest(const fs::path & dir, const std::string & command, const fs::path & config_path,
                    const std::vector<fs::path> & files) {
    json m;
    m["command"] = command;
    m["config"] = file_entry(config_path);
    json entries = json::array();
    for (const auto & f : files) entries.push_back({{"file", f.filename().string()}, {"sha256", file_sha256(f)}});
    m["files"] = entries;
    write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

int cmd_toy_run(const std::string & config_path, bool permutation, const common_opts & o, std::ostream & out,
                std::ostream & err) {
    toy::experiment_config cfg = toy::load_experiment_config(config_path);
    if (!o.output.empty()) cfg.output_dir = o.output;
    fs::create_directories(cfg.output_dir);
    const auto specs = toy::make_task_specs(cfg);

    std::vector<toy::experiment_record> records;
    for (auto mode : cfg.init_modes) {
        err << "training " << specs.size() << " " << toy::to_string(mode) << "-init experts\n";
        const auto pool = toy::train_experts(specs, mode, cfg, o.threads);
        err << "merging " << specs.size() * (specs.size() - 1) / 2 << " pairs\n";
        auto recs = toy::run_pairwise_experiment(pool, cfg, o.threads);
        records.insert(records.end(), recs.begin(), recs.end());
    }

    std::vector<fs::path> files;
    const fs::path records_path = cfg.output_dir / "records.csv";
    const std::string rec_csv = toy::records_csv(records);
    write_text_file(records_path, rec_csv);
    files.push_back(records_path);

    correlate_options opts;
    opts.permutation_p = permutation;
    opts.seed = cfg.seed;
    if (records.size() >= 3) {
        try {
            const auto reports = toy::cka_delta_study(records, cfg.study_method, opts);
            const fs::path corr_path = cfg.output_dir / "correlation.csv";
            write_text_file(corr_path, correlation_csv(reports));
            files.push_back(corr_path);

            const csv_table table = parse_csv(rec_csv);
            for (const auto & r : reports) {
                const auto data = scatter_from_records(table, r.measure, to_string(cfg.study_method));
                const fs::path plot = cfg.output_dir / (r.measure + "_vs_delta.svg");
                write_text_file(plot, scatter_plot(data, r.measure));
                files.push_back(plot);
            }
        } catch (const error & e) {
            if (e.kind() != error_kind::degenerate) throw;
            err << "warning: correlation study skipped: " << e.what() << "\n";
        }
    } else {
        err << "note: fewer than 3 pairs; correlation study skipped\n";
    }
    write_manifest(cfg.output_dir, "toy-run", config_path, files);
    if (o.to_stdout) out << rec_csv;
    err << "wrote " << files.size() << " files to " << cfg.output_dir.string() << "\n";
    return ok;
}

int cmd_toy_spectrum(const std::string & config_path, const common_opts & o, std::ostream & out,
                     std::ostream & err) {
    toy::experiment_config cfg = toy::load_experiment_config(config_path);
    if (!o.output.empty()) cfg.output_dir = o.output;
    fs::create_directories(cfg.output_dir);
    const auto specs = toy::make_task_specs(cfg);
    std::vector<fs::path> files;
    for (auto mode : cfg.init_modes) {
        err << "training " << specs.size() << " " << toy::to_string(mode) << "-init experts\n";
        const auto pool = toy::train_experts(specs, mode, cfg, o.threads);
        const auto spectrum =
            toy::spectrum_experiment(pool, cfg.spectrum_order_seed, cfg.spectrum_method, cfg, o.threads);
        const std::string stem = std::string("spectrum_") + toy::to_string(mode);
        const std::string csv = toy::spectrum_csv(spectrum);
        const fs::path csv_path = cfg.output_dir / (stem + ".csv");
        write_text_file(csv_path, csv);
        files.push_back(csv_path);
        const fs::path svg_path = cfg.output_dir / (stem + ".svg");
        write_text_file(svg_path, spectrum_plot(parse_csv(csv), spectrum.chance));
        files.push_back(svg_path);
        if (o.to_stdout) out << csv;
    }
    write_manifest(cfg.output_dir, "toy-spectrum", config_path, files);
    err << "wrote " << files.size() << " files to " << cfg.output_dir.string() << "\n";
    return ok;
}

int cmd_report(const std::vector<std::string> & inputs, const std::string & method, const common_opts & o,
               std::ostream &, std::ostream & err) {
    const fs::path dir = o.output.empty() ? fs::path(".") : fs::path(o.output);
    fs::create_directories(dir);
    for (const auto & in : inputs) {
        const csv_table t = read_csv(in);
        const std::string stem = fs::path(in).stem().string();
        if (t.rows.empty()) {
            fail(error_kind::validation, "'" + in + "' has no rows; nothing to plot");
        }
        std::vector<fs::path> written;
        if (t.has_column("k") && t.has_column("task") && t.has_column("accuracy")) {
            const fs::path p = dir / (stem + ".svg");
            write_text_file(p, spectrum_plot(t));
            written.push_back(p);
        } else if (t.has_column("delta") && t.has_column("method")) {
            for (const auto & m : default_measures) {
                if (!t.has_column(m)) continue;
                const auto data = scatter_from_records(t, m, method);
                const fs::path p = dir / (stem + "_" + m + ".svg");
                write_text_file(p, scatter_plot(data, m));
                written.push_back(p);
            }
            if (written.empty()) fail(error_kind::validation, "'" + in + "' has no measure columns to plot");
        } else {
            fail(error_kind::validation, "'" + in + "' matches neither the spectrum nor the records CSV schema");
        }
        for (const auto & p : written) {
            write_sidecar(p, "report", {{"method", method}}, json::array({file_entry(in)}));
            err << "wrote " << p.string() << "\n";
        }
    }
    return ok;
}

} // namespace

int run(const std::vector<std::string> & args, std::ostream & out, std::ostream & err) {
    CLI::App app{"mergelab: checkpoint merging and merge diagnostics"};
    app.require_subcommand(1);

    common_opts merge_o, diff_o, cka_o, delta_o, corr_o, run_o, spec_o, report_o;

    auto * merge = app.add_subcommand("merge", "Merge checkpoints as described by a JSON recipe");
    std::string recipe, dtype_name;
    merge->add_option("--recipe", recipe, "Recipe JSON file")->required();
    merge->add_option("--output", merge_o.output, "Override the recipe's output path");
    merge->add_option("--dtype", dtype_name, "On-disk dtype of the result (F32, F16, BF16)");
    add_common(merge, merge_o);

    auto * diff = app.add_subcommand("diff", "Parametric (and optionally CKA) similarity of two checkpoints");
    std::string diff_a, diff_b, grouping = "layer_{}", act_a, act_b;
    bool include_other = false;
    std::size_t max_rows = 2048;
    diff->add_option("a", diff_a, "First checkpoint")->required();
    diff->add_option("b", diff_b, "Second checkpoint")->required();
    diff->add_option("--grouping", grouping, "Layer name template with {} for the layer index");
    diff->add_option("--activations-a", act_a, "Activation set of the first model");
    diff->add_option("--activations-b", act_b, "Activation set of the second model");
    diff->add_option("--max-rows", max_rows, "Subsample activations to at most this many rows");
    diff->add_flag("--include-other", include_other, "Count the 'other' bucket in the means");
    diff->add_option("--output", diff_o.output, "CSV output path");
    add_common(diff, diff_o, true);

    auto * cka = app.add_subcommand("cka", "Layer-wise linear CKA between two activation sets");
    std::string cka_a, cka_b;
    std::size_t cka_rows = 2048;
    cka->add_option("--activations-a", cka_a, "First activation set")->required();
    cka->add_option("--activations-b", cka_b, "Second activation set")->required();
    cka->add_option("--max-rows", cka_rows, "Subsample activations to at most this many rows");
    cka->add_option("--output", cka_o.output, "CSV output path");
    add_common(cka, cka_o, true);

    auto * delta = app.add_subcommand("delta", "Merge performance drop with bootstrap CIs from per-item scores");
    delta_opts dopts;
    delta->add_option("--scores", dopts.scores, "Score table CSV (model_id,task_id,item_id,score)")->required();
    delta->add_option("--expert-a", dopts.expert_a, "Expert A model id")->required();
    delta->add_option("--task-a", dopts.task_a, "Task of expert A")->required();
    delta->add_option("--expert-b", dopts.expert_b, "Expert B model id")->required();
    delta->add_option("--task-b", dopts.task_b, "Task of expert B")->required();
    delta->add_option("--merged", dopts.merged, "Merged model id")->required();
    delta->add_option("--resamples", dopts.resamples, "Bootstrap resamples")->check(CLI::PositiveNumber);
    delta->add_option("--ci-output", dopts.ci_output, "Write per-model accuracy CIs to this CSV");
    delta->add_option("--output", delta_o.output, "CSV output path");
    add_common(delta, delta_o, true);

    auto * corr = app.add_subcommand("correlate", "Spearman and Pearson correlation of measures against delta");
    std::string corr_in, delta_column = "delta", corr_method = "linear";
    std::vector<std::string> measures;
    bool raw_delta = false, corr_perm = false;
    corr->add_option("--input", corr_in, "CSV with measure columns and a delta column")->required();
    corr->add_option("--delta-column", delta_column, "Name of the delta column");
    corr->add_option("--measures", measures, "Measure columns (default: all known ones present)")->delimiter(',');
    corr->add_option("--method", corr_method, "Keep only rows of this merge method when a method column exists");
    corr->add_flag("--raw-delta", raw_delta, "Correlate against delta instead of -delta");
    corr->add_flag("--permutation-p", corr_perm, "Permutation p-values (10000 draws) instead of the t approximation");
    corr->add_option("--output", corr_o.output, "CSV output path");
    add_common(corr, corr_o, true);

    auto * toy_run = app.add_subcommand("toy-run", "Train toy experts, merge all pairs, correlate similarity with delta");
    std::string run_config;
    bool run_perm = false;
    toy_run->add_option("--config", run_config, "Experiment config JSON")->required();
    toy_run->add_option("--output", run_o.output, "Override the config's output directory");
    toy_run->add_flag("--permutation-p", run_perm, "Permutation p-values in the correlation CSV");
    add_common(toy_run, run_o);

    auto * toy_spec = app.add_subcommand("toy-spectrum", "Accuracy of cumulative merges of k = 1..n toy experts");
    std::string spec_config;
    toy_spec->add_option("--config", spec_config, "Experiment config JSON")->required();
    toy_spec->add_option("--output", spec_o.output, "Override the config's output directory");
    add_common(toy_spec, spec_o);

    auto * report = app.add_subcommand("report", "Render SVG plots from spectrum or records CSVs");
    std::vector<std::string> report_inputs;
    std::string report_method = "linear";
    report->add_option("inputs", report_inputs, "CSV files")->required();
    report->add_option("--method", report_method, "Merge method whose rows are plotted");
    report->add_option("--output", report_o.output, "Output directory");
    add_common(report, report_o);

    std::vector<const char *> argv{"mergelab"};
    for (const auto & a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return ok;
    } catch (const CLI::CallForAllHelp &) {
        out << app.help("", CLI::AppFormatMode::All);
        return ok;
    } catch (const CLI::ParseError & e) {
        err << "error: " << e.what() << "\n" << "run with --help for usage\n";
        return usage;
    }

    try {
        if (*merge) return cmd_merge(recipe, merge_o, dtype_name, out, err);
        if (*diff) return cmd_diff(diff_a, diff_b, grouping, act_a, act_b, include_other, max_rows, diff_o, out, err);
        if (*cka) return cmd_cka(cka_a, cka_b, cka_rows, cka_o, out, err);
        if (*delta) return cmd_delta(dopts, delta_o, out, err);
        if (*corr) return cmd_correlate(corr_in, delta_column, measures, corr_method, raw_delta, corr_perm, corr_o, out, err);
        if (*toy_run) return cmd_toy_run(run_config, run_perm, run_o, out, err);
        if (*toy_spec) return cmd_toy_spectrum(spec_config, spec_o, out, err);
        if (*report) return cmd_report(report_inputs, report_method, report_o, out, err);
    } catch (const error & e) {
        err << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error & e) {
        err << "error: I/O error: " << e.what() << "\n";
        return invalid;
    } catch (const std::exception & e) {
        err << "error: " << e.what() << "\n";
        return invalid;
    }
    return usage;
}

} // namespace mergelab::cli
