#pragma once
// Metrics: multi-hop accuracy, efficacy, paraphrase, specificity, the
// unedited-answer rate, and breakdowns by hops, edit count, and position.

#include <map>

#include "hoplab/model.hpp"

namespace hoplab {

// Pre-edit snapshot. Specificity compares post-edit argmax answers against
// these recorded ones, so the snapshot must be taken before weights change.
struct Baseline {
    std::map<std::string, std::string> neighborhood_answers;  // prompt key -> token
};

std::string prompt_key(const PromptSpec& prompt);

Baseline snapshot_baseline(const Model& model, const Benchmark& bench);
void save_baseline(const Baseline& baseline, const std::string& path);
Baseline load_baseline(const std::string& path);

struct SliceStat {
    int count{0};
    int correct{0};
    double rate() const { return count > 0 ? static_cast<double>(correct) / count : 0.0; }
};

struct MetricsReport {
    double multi_hop_acc{0.0};
    double efficacy{0.0};
    double paraphrase{0.0};
    double specificity{0.0};
    double unedited_answer_rate{0.0};
    double d_pre_acc{0.0};
    double d_post_acc{0.0};
    std::map<std::string, SliceStat> by_position;  // Pre / Mid / Post
    std::map<int, SliceStat> by_hops;
    std::map<int, SliceStat> by_edits;
    int multi_hop_total{0};
    int efficacy_total{0};
    int paraphrase_total{0};
    int specificity_total{0};
};

// Probability comparisons on edit/paraphrase prompts, argmax stability on
// neighborhood prompts against the baseline, argmax correctness on the
// multi-hop splits (d_pre + d_post + multi_hop). Throws MissingBaseline when
// a neighborhood prompt has no recorded pre-edit answer.
MetricsReport compute_metrics(const Model& model, const Benchmark& bench,
                              const Baseline& baseline);

std::string metrics_to_json(const MetricsReport& report);

// Per-slice counts and rates; every weighted average reconstructs its total.
std::string breakdown_report(const MetricsReport& report, const Benchmark& bench);

// One row per evaluated case: case_id, split, labels, answered token, flags.
std::string per_case_csv(const Model& model, const Benchmark& bench, const Baseline& baseline);

}  // namespace hoplab
