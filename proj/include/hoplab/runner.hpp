#pragma once
// Experiment runner: wires data generation, training, mechanism probes,
// editing, ablations, evaluation, and persistence into CLI commands.

#include "hoplab/config.hpp"
#include "hoplab/evalx.hpp"

namespace hoplab {

// Mechanism-probe aggregates. Per-layer vectors are indexed by layer-1.
struct ProbeSummary {
    int cases{0};
    double mean_peak_subject{0.0};  // Info(h, s2) peak layer, averaged
    double mean_peak_answer{0.0};   // Info(h, o2) peak layer, averaged
    std::vector<double> ie_hidden_experimental;
    std::vector<double> ie_hidden_control;
    std::vector<double> ie_mlp_experimental;
    std::vector<double> ie_mlp_control;
    int band_start{0};  // first layer of a 3-layer band with exp > ctl (IE_m); 0 if none
    bool band_found{false};
};

// Runs the two-hop probes (and the single-hop control) against a frozen
// model. When `probes_dir` is non-empty the InfoCurve and EffectMatrix CSV
// files are written there.
ProbeSummary run_probe(const Model& model, const World& world, const Corpus& corpus,
                       int probe_cases, uint64_t seed, const std::string& probes_dir);

// Thread cap for internal parallelism (HOPLAB_THREADS, default hardware).
int max_threads();

// Dispatch one command; returns the process exit code
// (0 ok, 1 config, 2 missing artifact, 3 numerical failure).
int run_experiment(const RunConfig& config, const std::string& command);

}  // namespace hoplab
