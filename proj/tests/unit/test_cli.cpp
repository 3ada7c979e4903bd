#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "hoplab/runner.hpp"

using namespace hoplab;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(const std::string& out) {
    RunConfig c = RunConfig::defaults();
    c.out_dir = out;
    c.world_entities = 20;
    c.world_relations = 4;
    c.train.steps = 120;
    c.train.batch = 32;
    c.n_edits = 4;
    c.probe_cases = 8;
    c.hyper.steps = 6;
    c.hyper.c0_samples = 200;
    c.stage1.layer_lo = 1;
    c.stage1.layer_hi = 2;
    c.stage2.layer_lo = 6;
    c.stage2.layer_hi = 7;
    return c;
}

std::string slurp(const std::string& path) { return read_text_file(path); }

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config text round-trips") {
    RunConfig c = RunConfig::defaults();
    c.seed = 123;
    c.hyper.lambda = 2.5;
    c.stage2.layer_lo = 4;
    c.stage2.layer_hi = 6;
    RunConfig back = RunConfig::parse_text(c.to_text());
    CHECK(back.to_text() == c.to_text());
    CHECK(back.seed == 123);
    CHECK(back.hyper.lambda == 2.5);
    CHECK(back.stage2.layer_lo == 4);
}

TEST_CASE("config rejects unknown keys and bad values") {
    CHECK_THROWS_AS(RunConfig::parse_text("nonsense.key = 1\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse_text("edit.mu = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse_text("edit.lambda = -1\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse_text("model.d_model = 30\nmodel.heads = 4\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse_text("seed 12\n"), ConfigError);
    CHECK_NOTHROW(RunConfig::parse_text("# comment only\n\nseed = 5\n"));
}

TEST_CASE("eval without artifacts reports a missing artifact") {
    RunConfig c = tiny_config("/tmp/hoplab_cli_missing");
    fs::remove_all(c.out_dir);
    CHECK(run_experiment(c, "eval") == 2);
    fs::remove_all(c.out_dir);
}

TEST_CASE("unknown command maps to the config exit code") {
    RunConfig c = tiny_config("/tmp/hoplab_cli_unknown");
    fs::remove_all(c.out_dir);
    CHECK(run_experiment(c, "frobnicate") == 1);
    fs::remove_all(c.out_dir);
}

TEST_CASE("a held lock refuses a second run") {
    RunConfig c = tiny_config("/tmp/hoplab_cli_lock");
    fs::remove_all(c.out_dir);
    fs::create_directories(c.out_dir);
    std::ofstream(c.out_dir + "/.lock") << "held\n";
    CHECK(run_experiment(c, "gen") == 1);
    fs::remove(c.out_dir + "/.lock");
    CHECK(run_experiment(c, "gen") == 0);
    // the lock is released afterwards
    CHECK_FALSE(fs::exists(c.out_dir + "/.lock"));
    fs::remove_all(c.out_dir);
}

TEST_CASE("pipeline smoke: gen, train, eval on the base model") {
    RunConfig c = tiny_config("/tmp/hoplab_cli_smoke");
    fs::remove_all(c.out_dir);
    REQUIRE(run_experiment(c, "gen") == 0);
    CHECK(fs::exists(c.out_dir + "/world.jsonl"));
    CHECK(fs::exists(c.out_dir + "/benchmark.json"));
    CHECK(fs::exists(c.out_dir + "/sparql_queries.txt"));
    CHECK(slurp(c.out_dir + "/sparql_queries.txt").find("LIMIT 50") != std::string::npos);

    REQUIRE(run_experiment(c, "train") == 0);
    CHECK(fs::exists(c.out_dir + "/checkpoints/base.ckpt"));
    CHECK(fs::exists(c.out_dir + "/reports/train_report.json"));
    CHECK(fs::exists(c.out_dir + "/reports/baseline.json"));

    c.mode = "base";
    REQUIRE(run_experiment(c, "eval") == 0);
    CHECK(fs::exists(c.out_dir + "/reports/metrics_base.json"));
    // unedited weights: efficacy is evaluated against the edited answers
    const std::string metrics = slurp(c.out_dir + "/reports/metrics_base.json");
    CHECK(metrics.find("\"efficacy\"") != std::string::npos);
    fs::remove_all(c.out_dir);
}

TEST_CASE("edit and probe commands produce their artifacts") {
    RunConfig c = tiny_config("/tmp/hoplab_cli_edit");
    fs::remove_all(c.out_dir);
    REQUIRE(run_experiment(c, "gen") == 0);
    REQUIRE(run_experiment(c, "train") == 0);
    REQUIRE(run_experiment(c, "probe") == 0);
    CHECK(fs::exists(c.out_dir + "/probes/info_two_hop_subject.csv"));
    CHECK(fs::exists(c.out_dir + "/probes/info_single_hop_answer.csv"));
    CHECK(fs::exists(c.out_dir + "/probes/effect_hidden.csv"));
    CHECK(fs::exists(c.out_dir + "/probes/effect_mlp.csv"));
    CHECK(fs::exists(c.out_dir + "/probes/effect_mlp_single_hop.csv"));
    CHECK(fs::exists(c.out_dir + "/probes/probe_summary.json"));

    c.mode = "single_stage";
    REQUIRE(run_experiment(c, "edit") == 0);
    CHECK(fs::exists(c.out_dir + "/checkpoints/edited_single_stage.ckpt"));
    CHECK(fs::exists(c.out_dir + "/checkpoints/edited_single_stage_stage1.ckpt"));
    CHECK(fs::exists(c.out_dir + "/reports/edit_report_single_stage.json"));
    REQUIRE(run_experiment(c, "eval") == 0);
    CHECK(fs::exists(c.out_dir + "/reports/metrics_single_stage.json"));
    CHECK(fs::exists(c.out_dir + "/reports/cases_single_stage.csv"));

    REQUIRE(run_experiment(c, "report") == 0);
    CHECK(fs::exists(c.out_dir + "/reports/run_report.json"));
    fs::remove_all(c.out_dir);
}

TEST_CASE("fixed seeds reproduce identical artifact bytes") {
    RunConfig a = tiny_config("/tmp/hoplab_cli_rep_a");
    RunConfig b = tiny_config("/tmp/hoplab_cli_rep_b");
    fs::remove_all(a.out_dir);
    fs::remove_all(b.out_dir);
    for (auto* c : {&a, &b}) {
        REQUIRE(run_experiment(*c, "gen") == 0);
        REQUIRE(run_experiment(*c, "train") == 0);
        c->mode = "base";
        REQUIRE(run_experiment(*c, "eval") == 0);
    }
    CHECK(slurp(a.out_dir + "/world.jsonl") == slurp(b.out_dir + "/world.jsonl"));
    CHECK(slurp(a.out_dir + "/benchmark.json") == slurp(b.out_dir + "/benchmark.json"));
    CHECK(slurp(a.out_dir + "/checkpoints/base.ckpt") == slurp(b.out_dir + "/checkpoints/base.ckpt"));
    CHECK(slurp(a.out_dir + "/reports/metrics_base.json") ==
          slurp(b.out_dir + "/reports/metrics_base.json"));
    fs::remove_all(a.out_dir);
    fs::remove_all(b.out_dir);
}

TEST_CASE("commands are idempotent over reruns") {
    RunConfig c = tiny_config("/tmp/hoplab_cli_idem");
    fs::remove_all(c.out_dir);
    REQUIRE(run_experiment(c, "gen") == 0);
    const std::string first = slurp(c.out_dir + "/benchmark.json");
    REQUIRE(run_experiment(c, "gen") == 0);
    CHECK(slurp(c.out_dir + "/benchmark.json") == first);
    fs::remove_all(c.out_dir);
}

}  // TEST_SUITE
