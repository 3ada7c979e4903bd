#pragma once
// LogitLens projection and the layer-wise min-max normalized information
// measure, plus peak-layer extraction.

#include "hoplab/model.hpp"

namespace hoplab {

enum class LensSource { Hidden, Mlp, Attn };

struct InfoCurve {
    int token{0};
    int position{0};
    std::vector<double> values;  // layers 1..L, each in [0, 1]
};

// (v - min) / (max - min) over the vector; a constant vector maps to all
// zeros so downstream averaging stays total.
std::vector<double> min_max_normalize(const std::vector<double>& values);

// Per-layer probability of `token` at `position` under softmax(W_U * state),
// min-max normalized across layers.
InfoCurve info_curve(const MatrixXd& w_u, const Trace& trace, int token, int position,
                     LensSource source);

// Argmax layer (1-based), earliest layer on ties.
int peak_layer(const InfoCurve& curve);

}  // namespace hoplab
