#pragma once
// Locate-then-edit engine: FFN key extraction, preserved-key covariance,
// delta-search for target values, the closed-form weight increment, and the
// two-stage edit algorithm with its ablation modes.

#include <functional>
#include <map>

#include "hoplab/model.hpp"

namespace hoplab {

struct EditHyper {
    double lambda{6000.0};
    double mu{1.0};        // KL weight, in [0, 1]
    double phi{1.0};       // target-NLL weight before the late phase
    double phi_late{0.1};  // after the target probability plateaus
    int steps{30};
    double lr{0.2};
    double kl_stop{0.01};
    int n_prefixes{4};  // total prompt variants (bare + sampled prefixes)
    int c0_samples{10000};
};

struct StagePlan {
    enum class Prompts { SingleHop, MultiHop } prompts{Prompts::SingleHop};
    int layer_lo{1};
    int layer_hi{1};
    enum class Position { SubjectLast, Last } position{Position::SubjectLast};
};

enum class EditMode { Full, WoFirst, WoMulti, WoDeeper, WoLast, SingleStage };

std::string to_string(EditMode mode);
EditMode edit_mode_from_string(const std::string& name);

// Prompt variants used by key extraction and the search loss: the bare
// prompt plus each prefix-extended copy.
std::vector<std::vector<int>> prompt_variants(const Vocab& vocab, const PromptSpec& prompt,
                                              const std::vector<std::vector<int>>& prefixes);

int role_position(const PromptSpec& prompt, StagePlan::Position position);

// Mean FFN key f(W_in * h_{layer-1}) at the designated position over the
// prompt variants.
VectorXd extract_key(const Model& model, const PromptSpec& prompt, int layer,
                     StagePlan::Position position, const std::vector<std::vector<int>>& prefixes);

// C0 = sum of k k^T over n_samples keys drawn from random (sentence,
// position) pairs of the training corpus. Symmetric PSD by construction.
MatrixXd estimate_c0(const Model& model, const Corpus& corpus, int layer, int n_samples,
                     uint64_t seed);
std::map<int, MatrixXd> estimate_c0_layers(const Model& model, const Corpus& corpus,
                                           const std::vector<int>& layers, int n_samples,
                                           uint64_t seed);

struct SearchOutcome {
    VectorXd v_star;
    VectorXd delta;
    std::vector<double> loss_trace;
    double kl_final{0.0};
    int steps_run{0};
};

struct DeltaLoss {
    double loss{0.0};
    double kl{0.0};
    double nll{0.0};
    double mean_target_prob{0.0};
    VectorXd grad;
};

// One evaluation of the search objective
//   mu * KL(P_edited[t'|kl_prompt] || P_base[t'|kl_prompt])
//   + phi * mean_j -log P_edited[target | prefix_j + prompt]
// with its analytic gradient w.r.t. the injected delta. t' ranges over the
// vocabulary minus the target, both sides renormalized.
DeltaLoss delta_search_loss(const Model& model, const PromptSpec& edit_prompt, int target_token,
                            int inject_layer, StagePlan::Position position, double mu, double phi,
                            const std::vector<std::vector<int>>& prefixes,
                            const PromptSpec& kl_prompt, const VectorXd& delta);

// v* = v + delta with delta minimizing
//   mu * KL(P_edited[t'|kl_prompt] || P_base[t'|kl_prompt])
//   + phi * mean_j -log P_edited[target | prefix_j + prompt]
// by Adam over `steps` with lr; phi drops to phi_late once the mean target
// probability stops improving for 3 consecutive steps, after which the loop
// halts early when the KL falls under kl_stop. delta is injected into the
// FFN output of the deepest span layer at the designated position.
SearchOutcome search_value(const Model& model, const PromptSpec& edit_prompt, int target_token,
                           int inject_layer, StagePlan::Position position, const EditHyper& hyper,
                           const std::vector<std::vector<int>>& prefixes,
                           const PromptSpec& kl_prompt);

// Closed-form increment: Delta = R K_E^T (lambda*C0 + K_E K_E^T)^-1 with
// R = V_E - W_out K_E. E = 0 yields a zero increment. A 1e-8 jitter is added
// once if the SPD solve fails; SingularSystem if it still fails.
MatrixXd calculate_delta(const MatrixXd& w_out, const MatrixXd& k_e, const MatrixXd& v_e,
                         const MatrixXd& c0, double lambda);

struct EditRecord {
    int edit_id{0};
    int stage{0};
    std::vector<int> layers;
    std::vector<double> loss_trace;
    double kl_final{0.0};
    double update_frobenius_norm{0.0};
    std::string status{"ok"};
};

struct EditReport {
    std::vector<EditRecord> records;
};

std::string edit_report_to_json(const EditReport& report);

using StageCallback = std::function<void(int stage, const Model& model)>;

// The two-stage edit. Stage 1 searches values on single-hop prompts and
// updates the shallow span at the subject token; stage 2 repeats with
// multi-hop prompts on the deep span at the last token. Modes skip or
// substitute stages. Per-edit failures are recorded, never aborting the
// batch. C0 and answerability filtering are computed at each stage entry on
// the current weights, so single_stage followed by wo_first replays full.
EditReport run_ifmet(Model& model, const std::vector<EditInstance>& edits, const TripleStore& kb,
                     const Corpus& corpus, const StagePlan& stage1, const StagePlan& stage2,
                     const EditHyper& hyper, EditMode mode, uint64_t seed,
                     const StageCallback& on_stage = {});

}  // namespace hoplab
