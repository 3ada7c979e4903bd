#include "hoplab/intervene.hpp"

#include <Eigen/Dense>
#include <algorithm>

namespace hoplab {

namespace {

void validate_spec(const MatrixXd& w_u, const InterventionSpec& spec) {
    if (spec.suppressed.empty()) throw std::invalid_argument("suppressed token set is empty");
    for (int j : spec.suppressed) {
        if (j < 0 || j >= w_u.rows()) throw UnknownToken(std::to_string(j));
        if (j == spec.compensated) {
            throw std::invalid_argument("suppressed set intersects the compensated token");
        }
    }
    if (spec.compensated < 0 || spec.compensated >= w_u.rows()) {
        throw UnknownToken(std::to_string(spec.compensated));
    }
}

// Least-norm delta that pins every suppressed logit exactly onto the
// pre-intervention vocabulary minimum (sum of per-row terms with jointly
// solved coefficients).
VectorXd suppression_delta(const MatrixXd& w_u, const VectorXd& logits,
                           const std::vector<int>& suppressed, double smin) {
    const int nj = static_cast<int>(suppressed.size());
    MatrixXd wj(nj, w_u.cols());
    VectorXd rhs(nj);
    for (int i = 0; i < nj; ++i) {
        wj.row(i) = w_u.row(suppressed[static_cast<size_t>(i)]);
        rhs(i) = smin - logits(suppressed[static_cast<size_t>(i)]);
    }
    MatrixXd gram = wj * wj.transpose();
    Eigen::LDLT<MatrixXd> solver(gram);
    if (solver.info() != Eigen::Success) {
        gram.diagonal().array() += 1e-12;
        solver.compute(gram);
    }
    return wj.transpose() * solver.solve(rhs);
}

}  // namespace

SuppressResult suppress_and_compensate(const MatrixXd& w_u, const VectorXd& state,
                                       const InterventionSpec& spec, double tol) {
    if (!(tol > 0.0)) throw std::invalid_argument("tol must be positive");
    validate_spec(w_u, spec);

    const VectorXd logits = w_u * state;
    const double smin = logits.minCoeff();
    const VectorXd delta_j = suppression_delta(w_u, logits, spec.suppressed, smin);

    // compensation direction: W_u[k] with its components along the suppressed
    // rows removed, so the suppressed logits stay pinned for every alpha
    const int nj = static_cast<int>(spec.suppressed.size());
    MatrixXd wj(nj, w_u.cols());
    for (int i = 0; i < nj; ++i) wj.row(i) = w_u.row(spec.suppressed[static_cast<size_t>(i)]);
    const VectorXd wk = w_u.row(spec.compensated).transpose();
    MatrixXd gram = wj * wj.transpose();
    Eigen::LDLT<MatrixXd> solver(gram);
    if (solver.info() != Eigen::Success) {
        gram.diagonal().array() += 1e-12;
        solver.compute(gram);
    }
    const VectorXd u = wk - wj.transpose() * solver.solve(wj * wk);
    const double row0_sq = w_u.row(spec.suppressed[0]).squaredNorm();
    const double ck = (logits(spec.compensated) - smin) / std::max(row0_sq, 1e-300);

    const double p0 = softmax(logits)(spec.compensated);
    auto delta_at = [&](double alpha) -> VectorXd { return delta_j + (alpha * ck) * u; };
    auto f = [&](double alpha) -> double {
        return softmax(w_u * (state + delta_at(alpha)))(spec.compensated) - p0;
    };

    SuppressResult res;
    double f_lo = f(0.0);
    if (f_lo == 0.0) {
        // nothing to compensate (e.g. the suppressed logit already sat at
        // the vocabulary minimum)
        res.delta = delta_at(0.0);
        res.alpha = 0.0;
        res.f_at_alpha = 0.0;
        return res;
    }
    const double f_hi = f(1.0);
    if ((f_lo > 0.0) == (f_hi > 0.0)) {
        // no sign change over (0,1): report the boundary with smaller |f|
        res.alpha = std::abs(f_lo) <= std::abs(f_hi) ? 0.0 : 1.0;
        res.delta = delta_at(res.alpha);
        res.f_at_alpha = res.alpha == 0.0 ? f_lo : f_hi;
        res.root_found = std::abs(res.f_at_alpha) <= tol;
        return res;
    }

    // run the full budget so alpha converges to the root itself, not just
    // into the |f| <= tol region (which can be wide when f is flat)
    double lo = 0.0, hi = 1.0;
    double mid = 0.5, f_mid = 0.0;
    for (int it = 0; it < 50; ++it) {
        mid = 0.5 * (lo + hi);
        f_mid = f(mid);
        if ((f_mid > 0.0) == (f_lo > 0.0)) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    res.alpha = mid;
    res.delta = delta_at(mid);
    res.f_at_alpha = f_mid;
    res.root_found = std::abs(f_mid) <= tol;
    return res;
}

InterveneOutcome intervene_layer(const Model& model, const PromptSpec& prompt, int layer,
                                 const InterventionSpec& spec, double tol) {
    if (spec.mode != InterventionSpec::Mode::Hidden) {
        throw std::invalid_argument("intervene_layer expects hidden mode");
    }
    if (layer < 1 || layer > model.cfg.n_layers) throw std::invalid_argument("layer out of range");
    const std::vector<int> toks = model.vocab.encode(prompt.tokens);
    ForwardCache base = forward_batch(model, {toks}, {});
    const int last = base.seq - 1;
    const VectorXd state = base.h[static_cast<size_t>(layer)].col(spec.position);

    SuppressResult sup = suppress_and_compensate(model.p.w_u, state, spec, tol);

    Injection inj;
    inj.kind = Injection::Kind::HiddenAdd;
    inj.layer = layer;
    inj.pos = spec.position;
    inj.delta = sup.delta;
    ForwardCache patched = forward_batch(model, {toks}, {inj});

    const double p = softmax(base.logits.col(last))(spec.compensated);
    const double pe = softmax(patched.logits.col(last))(spec.compensated);
    return InterveneOutcome{p - pe, sup.alpha, sup.root_found};
}

InterveneOutcome intervene_mlp(const Model& model, const PromptSpec& prompt, int layer,
                               const InterventionSpec& spec) {
    if (spec.mode != InterventionSpec::Mode::Mlp) {
        throw std::invalid_argument("intervene_mlp expects mlp mode");
    }
    if (layer < 1 || layer > model.cfg.n_layers) throw std::invalid_argument("layer out of range");
    validate_spec(model.p.w_u, spec);
    const std::vector<int> toks = model.vocab.encode(prompt.tokens);
    ForwardCache base = forward_batch(model, {toks}, {});
    const VectorXd m = base.m[static_cast<size_t>(layer)].col(spec.position);

    const VectorXd logits = model.p.w_u * m;
    const VectorXd delta = suppression_delta(model.p.w_u, logits, spec.suppressed,
                                             logits.minCoeff());
    const double p = softmax(logits)(spec.compensated);
    const double pe = softmax(model.p.w_u * (m + delta))(spec.compensated);
    return InterveneOutcome{p - pe, 0.0, true};
}

}  // namespace hoplab
