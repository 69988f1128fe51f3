#include "doctest.h"
#include "oracles.hpp"

#include "mergelab/checkpoint.hpp"
#include "mergelab/cli.hpp"
#include "mergelab/csv.hpp"
#include "mergelab/digest.hpp"
#include "mergelab/experiment.hpp"
#include "mergelab/similarity.hpp"
#include "mergelab/svg.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

using namespace mergelab;
namespace fs = std::filesystem;

namespace {

struct result {
    int code;
    std::string out;
    std::string err;
};

result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

const char * small_toy_config = R"({
  "n_tasks": 3,
  "n_train": 200,
  "n_eval": 100,
  "epochs": 3,
  "finetune_epochs": 2,
  "probe_size": 32,
  "init_mode": "mixed",
  "seed": 5
})";

} // namespace

TEST_CASE("usage errors exit 1") {
    CHECK(run({}).code == cli::usage);
    CHECK(run({"frobnicate"}).code == cli::usage);
    CHECK(run({"merge"}).code == cli::usage);
    CHECK(run({"--help"}).code == cli::ok);
}

TEST_CASE("exit code mapping") {
    CHECK(cli::exit_code_for(error_kind::usage) == 1);
    CHECK(cli::exit_code_for(error_kind::format) == 2);
    CHECK(cli::exit_code_for(error_kind::mismatch) == 2);
    CHECK(cli::exit_code_for(error_kind::io) == 2);
    CHECK(cli::exit_code_for(error_kind::degenerate) == 3);
    CHECK(cli::exit_code_for(error_kind::training) == 3);
}

TEST_CASE("single-input linear merge keeps the content digest") {
    const auto dir = oracle::temp_dir("cli_identity");
    const auto c = oracle::random_checkpoint(4);
    save_checkpoint(c, dir / "a.safetensors");
    write_text_file(dir / "r.json", R"({"method":"linear","inputs":["a.safetensors"],"output":"m.safetensors"})");
    const auto r = run({"merge", "--recipe", (dir / "r.json").string(), "--stdout"});
    REQUIRE(r.code == 0);
    CHECK(r.out == content_digest(c) + "\n");
    CHECK(content_digest(load_checkpoint(dir / "m.safetensors")) == content_digest(c));
    CHECK(fs::exists(dir / "m.safetensors.manifest.json"));
}

TEST_CASE("ties recipe without base exits 2 naming the field") {
    const auto dir = oracle::temp_dir("cli_nobase");
    save_checkpoint(oracle::random_checkpoint(4), dir / "a.safetensors");
    write_text_file(dir / "r.json", R"({"method":"ties","inputs":["a.safetensors"],"output":"m.safetensors"})");
    const auto r = run({"merge", "--recipe", (dir / "r.json").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("base") != std::string::npos);
}

TEST_CASE("merge failures") {
    const auto dir = oracle::temp_dir("cli_fail");
    save_checkpoint(oracle::random_checkpoint(4), dir / "a.safetensors");
    checkpoint other;
    other.tensors["w"] = tensor({1}, {1.0f});
    save_checkpoint(other, dir / "b.safetensors");
    write_text_file(dir / "r.json",
                    R"({"method":"linear","inputs":["a.safetensors","b.safetensors"],"output":"m.safetensors"})");
    CHECK(run({"merge", "--recipe", (dir / "r.json").string()}).code == 2);
    write_text_file(dir / "missing.json", R"({"method":"linear","inputs":["nope.safetensors"],"output":"m"})");
    CHECK(run({"merge", "--recipe", (dir / "missing.json").string()}).code == 2);
    write_text_file(dir / "junk.safetensors", "not a checkpoint");
    write_text_file(dir / "junk.json", R"({"method":"linear","inputs":["junk.safetensors"],"output":"m"})");
    CHECK(run({"merge", "--recipe", (dir / "junk.json").string()}).code == 2);
}

TEST_CASE("ten-input equal-weight merge equals the brute-force mean") {
    const auto dir = oracle::temp_dir("cli_mean");
    std::vector<checkpoint> in;
    std::string list;
    for (int i = 0; i < 10; ++i) {
        in.push_back(oracle::random_checkpoint(300 + i));
        const std::string name = "c" + std::to_string(i) + ".safetensors";
        save_checkpoint(in.back(), dir / name);
        list += (i ? ",\"" : "\"") + name + "\"";
    }
    write_text_file(dir / "r.json", R"({"method":"linear","inputs":[)" + list + R"(],"output":"m.safetensors"})");
    REQUIRE(run({"merge", "--recipe", (dir / "r.json").string(), "--threads", "4"}).code == 0);
    const auto m = load_checkpoint(dir / "m.safetensors");
    for (const auto & [name, t] : m.tensors) {
        for (std::size_t e = 0; e < t.size(); ++e) {
            double s = 0;
            for (const auto & c : in) s += c.at(name).data[e];
            const float want = static_cast<float>(s / 10.0);
            CHECK(std::abs(t.data[e] - want) <= std::abs(std::nextafter(want, 2 * want + 1) - want));
        }
    }
}

TEST_CASE("merge output dtype") {
    const auto dir = oracle::temp_dir("cli_dtype");
    save_checkpoint(oracle::random_checkpoint(4), dir / "a.safetensors");
    write_text_file(dir / "r.json", R"({"method":"linear","inputs":["a.safetensors"],"output":"m.safetensors"})");
    REQUIRE(run({"merge", "--recipe", (dir / "r.json").string(), "--dtype", "BF16"}).code == 0);
    CHECK(load_checkpoint(dir / "m.safetensors").at("layer_0.w").type == dtype::bf16);
    CHECK(run({"merge", "--recipe", (dir / "r.json").string(), "--dtype", "F8"}).code == 2);
}

TEST_CASE("diff") {
    const auto dir = oracle::temp_dir("cli_diff");
    const auto a = oracle::random_checkpoint(1);
    const auto b = oracle::random_checkpoint(2);
    save_checkpoint(a, dir / "a.safetensors");
    save_checkpoint(b, dir / "b.safetensors");

    const auto self = run({"diff", (dir / "a.safetensors").string(), (dir / "a.safetensors").string()});
    REQUIRE(self.code == 0);
    const auto t = parse_csv(self.out);
    CHECK(!t.has_column("cka"));
    for (const auto & row : t.rows) {
        CHECK(std::stod(row[t.column("cosine")]) == doctest::Approx(1.0));
        CHECK(std::stod(row[t.column("l2_norm_diff")]) == 0.0);
        CHECK(std::stod(row[t.column("stable_rank_diff")]) == 0.0);
    }

    const auto ab = run({"diff", (dir / "a.safetensors").string(), (dir / "b.safetensors").string()});
    REQUIRE(ab.code == 0);
    CHECK(ab.out == similarity_report_csv(parametric_diff(a, b, layer_grouping()), false));
}

TEST_CASE("diff with activations adds cka") {
    const auto dir = oracle::temp_dir("cli_cka");
    auto cfg = toy::experiment_config{};
    cfg.n_tasks = 2;
    cfg.task.n_train = 200;
    cfg.epochs = 3;
    const auto specs = toy::make_task_specs(cfg);
    const auto pool = toy::train_experts(specs, toy::init_mode::independent, cfg);
    save_checkpoint(pool.experts[0].params, dir / "a.safetensors");
    save_checkpoint(pool.experts[1].params, dir / "b.safetensors");
    const auto probe = pool.tasks[0].eval.x;
    activation_set acts[2];
    for (int i = 0; i < 2; ++i) {
        acts[i].probe_id = "probe";
        acts[i].layers = toy::forward(pool.experts[static_cast<std::size_t>(i)], probe).activations;
        save_activation_set(acts[i], dir / ("act" + std::to_string(i) + ".safetensors"));
    }
    const auto r = run({"diff", (dir / "a.safetensors").string(), (dir / "b.safetensors").string(), "--activations-a",
                        (dir / "act0.safetensors").string(), "--activations-b", (dir / "act1.safetensors").string(),
                        "--output", (dir / "d.csv").string()});
    REQUIRE(r.code == 0);
    const auto t = read_csv(dir / "d.csv");
    REQUIRE(t.has_column("cka"));
    CHECK(fs::exists(dir / "d.csv.manifest.json"));

    // same numbers as the library on the float-rounded activations
    const auto la = load_activation_set(dir / "act0.safetensors");
    const auto lb = load_activation_set(dir / "act1.safetensors");
    auto rep = parametric_diff(pool.experts[0].params, pool.experts[1].params, layer_grouping());
    attach_cka(rep, cka_profile(la, lb));
    CHECK(read_text_file(dir / "d.csv") == similarity_report_csv(rep, true));

    CHECK(run({"diff", (dir / "a.safetensors").string(), (dir / "b.safetensors").string(), "--activations-a",
               (dir / "act0.safetensors").string()})
              .code == 1);
}

TEST_CASE("delta from score tables") {
    const auto dir = oracle::temp_dir("cli_delta");
    std::string csv = "model_id,task_id,item_id,score\n";
    for (int i = 0; i < 100; ++i) {
        csv += "ea,ta," + std::to_string(i) + "," + (i < 99 ? "1" : "0") + "\n";
        csv += "eb,tb," + std::to_string(i) + "," + (i < 98 ? "1" : "0") + "\n";
        csv += "m,ta," + std::to_string(i) + "," + (i < 60 ? "1" : "0") + "\n";
        csv += "m,tb," + std::to_string(i) + "," + (i < 52 ? "1" : "0") + "\n";
    }
    write_text_file(dir / "s.csv", csv);
    const auto r = run({"delta", "--scores", (dir / "s.csv").string(), "--expert-a", "ea", "--task-a", "ta",
                        "--expert-b", "eb", "--task-b", "tb", "--merged", "m", "--ci-output",
                        (dir / "ci.csv").string()});
    REQUIRE(r.code == 0);
    const auto t = parse_csv(r.out);
    CHECK(std::stod(t.rows[0][t.column("delta")]) == doctest::Approx(0.425));
    CHECK(fs::exists(dir / "ci.csv"));

    const auto missing = run({"delta", "--scores", (dir / "s.csv").string(), "--expert-a", "zz", "--task-a", "ta",
                              "--expert-b", "eb", "--task-b", "tb", "--merged", "m"});
    CHECK(missing.code == 2);
}

TEST_CASE("correlate") {
    const auto dir = oracle::temp_dir("cli_corr");
    write_text_file(dir / "in.csv", "mean_cka,mean_cosine,delta\n0.9,0.1,0.1\n0.8,0.5,0.2\n0.5,0.2,0.4\n0.2,0.9,0.8\n");
    const auto r = run({"correlate", "--input", (dir / "in.csv").string()});
    REQUIRE(r.code == 0);
    const auto t = parse_csv(r.out);
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0][0] == "mean_cka");
    CHECK(std::stod(t.rows[0][t.column("spearman_rho")]) == doctest::Approx(1.0));
    const auto raw = run({"correlate", "--input", (dir / "in.csv").string(), "--raw-delta"});
    CHECK(std::stod(parse_csv(raw.out).rows[0][t.column("spearman_rho")]) == doctest::Approx(-1.0));

    write_text_file(dir / "flat.csv", "mean_cka,delta\n0.5,0.1\n0.5,0.2\n0.5,0.4\n");
    CHECK(run({"correlate", "--input", (dir / "flat.csv").string()}).code == 3);
}

TEST_CASE("toy run is deterministic and thread independent") {
    const auto dir = oracle::temp_dir("cli_toy");
    write_text_file(dir / "cfg.json", small_toy_config);
    REQUIRE(run({"toy-run", "--config", (dir / "cfg.json").string(), "--output", (dir / "a").string()}).code == 0);
    REQUIRE(run({"toy-run", "--config", (dir / "cfg.json").string(), "--output", (dir / "b").string(), "--threads",
                 "8"})
                .code == 0);
    for (const char * f : {"records.csv", "correlation.csv", "mean_cka_vs_delta.svg"}) {
        CAPTURE(f);
        CHECK(read_text_file(dir / "a" / f) == read_text_file(dir / "b" / f));
    }
    const auto records = read_csv(dir / "a" / "records.csv");
    CHECK(records.rows.size() == 3 * 3 * 2); // pairs x methods x init modes
    CHECK(fs::exists(dir / "a" / "manifest.json"));

    // plot annotation agrees with the correlation table
    const auto corr = read_csv(dir / "a" / "correlation.csv");
    for (const auto & row : corr.rows) {
        const std::string svg = read_text_file(dir / "a" / (row[0] + "_vs_delta.svg"));
        char rho[32];
        std::snprintf(rho, sizeof(rho), "rho = %.3f", std::stod(row[corr.column("spearman_rho")]));
        CAPTURE(row[0]);
        CHECK(svg.find(rho) != std::string::npos);
    }
}

TEST_CASE("toy run with two tasks gives one pair per method") {
    const auto dir = oracle::temp_dir("cli_toy2");
    write_text_file(dir / "cfg.json",
                    R"({"n_tasks": 2, "n_train": 200, "n_eval": 100, "epochs": 2, "probe_size": 32})");
    REQUIRE(run({"toy-run", "--config", (dir / "cfg.json").string(), "--output", (dir / "o").string()}).code == 0);
    CHECK(read_csv(dir / "o" / "records.csv").rows.size() == 3);
    write_text_file(dir / "bad.json", R"({"n_tasks": 2, "unknown_key": 1})");
    CHECK(run({"toy-run", "--config", (dir / "bad.json").string()}).code == 2);
}

TEST_CASE("spectrum and report") {
    const auto dir = oracle::temp_dir("cli_spectrum");
    write_text_file(dir / "cfg.json", small_toy_config);
    REQUIRE(run({"toy-spectrum", "--config", (dir / "cfg.json").string(), "--output", (dir / "s").string()}).code ==
            0);
    const auto t = read_csv(dir / "s" / "spectrum_independent.csv");
    CHECK(t.rows.size() == 9);
    CHECK(fs::exists(dir / "s" / "spectrum_shared.svg"));

    const auto csv = (dir / "s" / "spectrum_independent.csv").string();
    REQUIRE(run({"report", csv, "--output", (dir / "r1").string()}).code == 0);
    REQUIRE(run({"report", csv, "--output", (dir / "r2").string()}).code == 0);
    CHECK(read_text_file(dir / "r1" / "spectrum_independent.svg") ==
          read_text_file(dir / "r2" / "spectrum_independent.svg"));

    write_text_file(dir / "empty.csv", "k,task,accuracy,in_merge\n");
    CHECK(run({"report", (dir / "empty.csv").string(), "--output", (dir / "r3").string()}).code == 2);
}
