#include "hoplab/lens.hpp"

namespace hoplab {

std::vector<double> min_max_normalize(const std::vector<double>& values) {
    std::vector<double> out(values.size(), 0.0);
    if (values.empty()) return out;
    double lo = values[0], hi = values[0];
    for (double v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double range = hi - lo;
    if (range > 0.0) {
        for (size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - lo) / range;
    }
    return out;
}

InfoCurve info_curve(const MatrixXd& w_u, const Trace& trace, int token, int position,
                     LensSource source) {
    if (token < 0 || token >= w_u.rows()) throw UnknownToken(std::to_string(token));
    const int n_layers = static_cast<int>(trace.h.size()) - 1;
    InfoCurve curve;
    curve.token = token;
    curve.position = position;
    curve.values.resize(static_cast<size_t>(n_layers));

    std::vector<double> probs(static_cast<size_t>(n_layers));
    for (int l = 1; l <= n_layers; ++l) {
        const MatrixXd* state = nullptr;
        switch (source) {
            case LensSource::Hidden: state = &trace.h[static_cast<size_t>(l)]; break;
            case LensSource::Mlp: state = &trace.m[static_cast<size_t>(l)]; break;
            case LensSource::Attn: state = &trace.a[static_cast<size_t>(l)]; break;
        }
        const VectorXd p = softmax(w_u * state->col(position));
        probs[static_cast<size_t>(l - 1)] = p(token);
    }

    curve.values = min_max_normalize(probs);
    return curve;
}

int peak_layer(const InfoCurve& curve) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(curve.values.size()); ++i) {
        if (curve.values[static_cast<size_t>(i)] > curve.values[static_cast<size_t>(best)]) best = i;
    }
    return best + 1;
}

}  // namespace hoplab
