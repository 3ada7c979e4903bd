// hoplab command-line runner.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hoplab/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"hoplab: synthetic multi-hop knowledge-editing lab"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::string out_dir;
    std::string mode;
    std::optional<uint64_t> seed;

    app.add_option("--config", config_path, "run config file (key = value lines)");
    app.add_option("--out", out_dir, "output directory (overrides config)");
    app.add_option("--seed", seed, "master seed (overrides config)");
    app.add_option("--mode", mode,
                   "edit mode: full, wo_first, wo_multi, wo_deeper, wo_last, single_stage "
                   "(eval also accepts 'base')");

    for (const char* name : {"gen", "train", "probe", "edit", "eval", "ablate", "report"}) {
        app.add_subcommand(name);
    }

    CLI11_PARSE(app, argc, argv);

    hoplab::RunConfig cfg;
    try {
        cfg = config_path.empty() ? hoplab::RunConfig::defaults()
                                  : hoplab::RunConfig::parse_file(config_path);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed) cfg.seed = *seed;
    if (!mode.empty()) cfg.mode = mode;

    const std::string command = app.get_subcommands().front()->get_name();
    return hoplab::run_experiment(cfg, command);
}
