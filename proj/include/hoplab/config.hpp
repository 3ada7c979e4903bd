#pragma once
// Run configuration: line-oriented `key = value` with dotted section keys.
// A saved config replayed with the same binary reproduces all artifacts.

#include <string>

#include "hoplab/editor.hpp"
#include "hoplab/model.hpp"

namespace hoplab {

struct RunConfig {
    uint64_t seed{7};
    std::string out_dir{"runs/pilot"};
    std::string mode{"full"};  // edit mode, or "base" for pre-edit eval

    int world_entities{50};
    int world_relations{6};
    double inferred_frac{0.2};

    ModelConfig model;
    TrainConfig train;
    EditHyper hyper;
    StagePlan stage1;
    StagePlan stage2;

    int n_edits{50};
    int probe_cases{128};

    // derived seeds so one master seed drives the whole pipeline
    uint64_t world_seed() const { return seed; }
    uint64_t model_seed() const { return seed * 0x9E3779B97F4A7C15ull + 1; }
    uint64_t train_seed() const { return seed * 0x9E3779B97F4A7C15ull + 2; }
    uint64_t bench_seed() const { return seed * 0x9E3779B97F4A7C15ull + 3; }
    uint64_t edit_seed() const { return seed * 0x9E3779B97F4A7C15ull + 4; }

    static RunConfig defaults();
    static RunConfig parse_text(const std::string& text);
    static RunConfig parse_file(const std::string& path);
    std::string to_text() const;
};

}  // namespace hoplab
