#pragma once
// Causal interventions on layer hidden states (IE_h) and MLP outputs (IE_m):
// exact target-logit suppression, minimum-norm compensation calibrated by
// bisection, and layer sweeps for effect matrices.

#include <optional>

#include "hoplab/model.hpp"

namespace hoplab {

struct InterventionSpec {
    int layer{1};
    int position{0};
    std::vector<int> suppressed;  // tokens of the implicit subject
    int compensated{0};           // final-answer token k
    enum class Mode { Hidden, Mlp } mode{Mode::Hidden};
    std::optional<int> control;  // irrelevant token used by control-group runs
};

struct SuppressResult {
    VectorXd delta;
    double alpha{0.0};
    bool root_found{true};
    double f_at_alpha{0.0};
};

// delta = sum_j dh_j + dh_k(alpha). The suppression coefficients solve the
// joint row system so every suppressed logit lands exactly on the vocabulary
// minimum; the compensation direction is W_u[k] projected orthogonal to the
// suppressed rows, so the combined delta is the least-norm solution of the
// row-constraint system it satisfies. alpha is bisected on
// f(a) = P(state + delta(a), k) - P(state, k) over (0, 1); when f keeps one
// sign the boundary alpha with smaller |f| is reported with root_found=false.
SuppressResult suppress_and_compensate(const MatrixXd& w_u, const VectorXd& state,
                                       const InterventionSpec& spec, double tol);

struct InterveneOutcome {
    double effect{0.0};  // IE
    double alpha{0.0};
    bool root_found{true};
};

// Hidden-state intervention: replaces h_l at the prompt position with
// h_l + delta, reruns the layers above, and returns
// IE_h = p_L[k] - p_L^E[k] at the final layer.
InterveneOutcome intervene_layer(const Model& model, const PromptSpec& prompt, int layer,
                                 const InterventionSpec& spec, double tol = 1e-4);

// MLP intervention: suppresses the subject tokens in m_l and reads
// IE_m = p_l[k] - p_l^E[k] from softmax(W_U * m_l) at the modified layer
// itself. Pure suppression; compensating k at the same projection would pin
// the measured effect to the bisection tolerance.
InterveneOutcome intervene_mlp(const Model& model, const PromptSpec& prompt, int layer,
                               const InterventionSpec& spec);

// layers x cases effect values for one group. Negative effects are kept;
// clipping is a rendering choice.
struct EffectMatrix {
    MatrixXd values;
    std::string group;
};

}  // namespace hoplab
