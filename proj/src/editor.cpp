#include "hoplab/editor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "hoplab/kb.hpp"

namespace hoplab {

std::string to_string(EditMode mode) {
    switch (mode) {
        case EditMode::Full: return "full";
        case EditMode::WoFirst: return "wo_first";
        case EditMode::WoMulti: return "wo_multi";
        case EditMode::WoDeeper: return "wo_deeper";
        case EditMode::WoLast: return "wo_last";
        default: return "single_stage";
    }
}

EditMode edit_mode_from_string(const std::string& name) {
    if (name == "full") return EditMode::Full;
    if (name == "wo_first") return EditMode::WoFirst;
    if (name == "wo_multi") return EditMode::WoMulti;
    if (name == "wo_deeper") return EditMode::WoDeeper;
    if (name == "wo_last") return EditMode::WoLast;
    if (name == "single_stage") return EditMode::SingleStage;
    throw ConfigError("unknown edit mode: " + name);
}

int role_position(const PromptSpec& prompt, StagePlan::Position position) {
    return position == StagePlan::Position::SubjectLast ? prompt.subject_last_index
                                                        : prompt.last_index;
}

std::vector<std::vector<int>> prompt_variants(const Vocab& vocab, const PromptSpec& prompt,
                                              const std::vector<std::vector<int>>& prefixes) {
    std::vector<std::vector<int>> out;
    if (prefixes.empty()) {
        out.push_back(vocab.encode(prompt.tokens));
        return out;
    }
    for (const auto& pref : prefixes) {
        std::vector<int> v = pref;
        for (const auto& t : prompt.tokens) v.push_back(vocab.id(t));
        out.push_back(std::move(v));
    }
    return out;
}

VectorXd extract_key(const Model& model, const PromptSpec& prompt, int layer,
                     StagePlan::Position position, const std::vector<std::vector<int>>& prefixes) {
    if (layer < 1 || layer > model.cfg.n_layers) throw std::invalid_argument("layer out of range");
    const int base_pos = role_position(prompt, position);
    const auto variants = prompt_variants(model.vocab, prompt, prefixes);
    VectorXd key = VectorXd::Zero(model.cfg.d_ff);
    for (size_t i = 0; i < variants.size(); ++i) {
        const int offset = static_cast<int>(variants[i].size()) -
                           static_cast<int>(prompt.tokens.size());
        Trace t = forward_trace(model, variants[i]);
        key += t.k[static_cast<size_t>(layer)].col(base_pos + offset);
    }
    return key / static_cast<double>(variants.size());
}

std::map<int, MatrixXd> estimate_c0_layers(const Model& model, const Corpus& corpus,
                                           const std::vector<int>& layers, int n_samples,
                                           uint64_t seed) {
    if (corpus.train.empty()) throw std::runtime_error("empty corpus");
    Rng rng(seed);
    // draw (sentence, position) pairs, then group by sentence so each one is
    // traced once
    std::map<size_t, std::vector<int>> positions_by_sentence;
    for (int i = 0; i < n_samples; ++i) {
        const size_t si = rng.uniform_below(corpus.train.size());
        const int pos = rng.index(corpus.train[si].size());
        positions_by_sentence[si].push_back(pos);
    }
    std::map<int, MatrixXd> c0;
    for (int l : layers) c0[l] = MatrixXd::Zero(model.cfg.d_ff, model.cfg.d_ff);
    for (const auto& [si, positions] : positions_by_sentence) {
        Trace t = forward_trace(model, model.vocab.encode(corpus.train[si]));
        for (int l : layers) {
            for (int pos : positions) {
                const VectorXd k = t.k[static_cast<size_t>(l)].col(pos);
                c0[l].selfadjointView<Eigen::Lower>().rankUpdate(k, 1.0);
            }
        }
    }
    for (int l : layers) {
        c0[l] = c0[l].selfadjointView<Eigen::Lower>();
    }
    return c0;
}

MatrixXd estimate_c0(const Model& model, const Corpus& corpus, int layer, int n_samples,
                     uint64_t seed) {
    return estimate_c0_layers(model, corpus, {layer}, n_samples, seed).at(layer);
}

// ----------------------------- delta search -----------------------------

namespace {

// dKL/dlogits for KL(P_e[t'] || P_base[t']) over the vocabulary minus the
// target token, both sides renormalized.
struct KlEval {
    double kl{0.0};
    VectorXd dlogits;
};

KlEval kl_excluding_target(const VectorXd& logits_e, const VectorXd& log_p_base_renorm,
                           int target) {
    const int n = static_cast<int>(logits_e.size());
    // log-renormalized edited distribution over the reduced support
    double mx = -1e300;
    for (int i = 0; i < n; ++i) {
        if (i != target) mx = std::max(mx, logits_e(i));
    }
    double denom = 0.0;
    for (int i = 0; i < n; ++i) {
        if (i != target) denom += std::exp(logits_e(i) - mx);
    }
    const double lse = mx + std::log(denom);

    KlEval out;
    out.dlogits = VectorXd::Zero(n);
    std::vector<double> a(static_cast<size_t>(n), 0.0), pe(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        if (i == target) continue;
        a[static_cast<size_t>(i)] = logits_e(i) - lse;
        pe[static_cast<size_t>(i)] = std::exp(a[static_cast<size_t>(i)]);
        out.kl += pe[static_cast<size_t>(i)] *
                  (a[static_cast<size_t>(i)] - log_p_base_renorm(i));
    }
    for (int i = 0; i < n; ++i) {
        if (i == target) continue;
        out.dlogits(i) = pe[static_cast<size_t>(i)] *
                         ((a[static_cast<size_t>(i)] - log_p_base_renorm(i)) - out.kl);
    }
    return out;
}

VectorXd log_renorm_excluding(const VectorXd& logits, int target) {
    const int n = static_cast<int>(logits.size());
    double mx = -1e300;
    for (int i = 0; i < n; ++i) {
        if (i != target) mx = std::max(mx, logits(i));
    }
    double denom = 0.0;
    for (int i = 0; i < n; ++i) {
        if (i != target) denom += std::exp(logits(i) - mx);
    }
    const double lse = mx + std::log(denom);
    VectorXd out = VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) out(i) = logits(i) - lse;
    return out;
}

}  // namespace

DeltaLoss delta_search_loss(const Model& model, const PromptSpec& edit_prompt, int target_token,
                            int inject_layer, StagePlan::Position position, double mu, double phi,
                            const std::vector<std::vector<int>>& prefixes,
                            const PromptSpec& kl_prompt, const VectorXd& delta) {
    const int base_pos = role_position(edit_prompt, position);
    const auto variants = prompt_variants(model.vocab, edit_prompt, prefixes);
    const int n_variants = static_cast<int>(variants.size());

    DeltaLoss out;
    out.grad = VectorXd::Zero(model.cfg.d_model);

    for (int vi = 0; vi < n_variants; ++vi) {
        const int offset = static_cast<int>(variants[static_cast<size_t>(vi)].size()) -
                           static_cast<int>(edit_prompt.tokens.size());
        Injection inj{Injection::Kind::MlpAdd, inject_layer, base_pos + offset, delta};
        ForwardCache c = forward_batch(model, {variants[static_cast<size_t>(vi)]}, {inj});
        const int last = c.seq - 1;
        const VectorXd p = softmax(c.logits.col(last));
        out.mean_target_prob += p(target_token);
        out.nll += -std::log(std::max(p(target_token), 1e-300));

        MatrixXd dlogits = MatrixXd::Zero(c.logits.rows(), c.logits.cols());
        dlogits.col(last) = p;
        dlogits(target_token, last) -= 1.0;
        dlogits *= phi / static_cast<double>(n_variants);
        std::vector<VectorXd> inj_grads;
        backward_batch(model, c, dlogits, nullptr, {inj}, &inj_grads);
        out.grad += inj_grads[0];
    }
    out.nll /= static_cast<double>(n_variants);
    out.mean_target_prob /= static_cast<double>(n_variants);

    {
        const std::vector<int> kl_tokens = model.vocab.encode(kl_prompt.tokens);
        const int kl_pos = role_position(kl_prompt, position);
        ForwardCache base = forward_batch(model, {kl_tokens}, {});
        const VectorXd log_p_base = log_renorm_excluding(base.logits.col(base.seq - 1),
                                                         target_token);
        Injection inj{Injection::Kind::MlpAdd, inject_layer, kl_pos, delta};
        ForwardCache c = forward_batch(model, {kl_tokens}, {inj});
        const int last = c.seq - 1;
        KlEval kl = kl_excluding_target(c.logits.col(last), log_p_base, target_token);
        out.kl = kl.kl;
        MatrixXd dlogits = MatrixXd::Zero(c.logits.rows(), c.logits.cols());
        dlogits.col(last) = mu * kl.dlogits;
        std::vector<VectorXd> inj_grads;
        backward_batch(model, c, dlogits, nullptr, {inj}, &inj_grads);
        out.grad += inj_grads[0];
    }

    out.loss = mu * out.kl + phi * out.nll;
    return out;
}

SearchOutcome search_value(const Model& model, const PromptSpec& edit_prompt, int target_token,
                           int inject_layer, StagePlan::Position position, const EditHyper& hyper,
                           const std::vector<std::vector<int>>& prefixes,
                           const PromptSpec& kl_prompt) {
    if (hyper.steps < 1) throw std::invalid_argument("steps must be >= 1");
    const int base_pos = role_position(edit_prompt, position);

    // original value vector at the injection site
    Trace bare = forward_trace(model, model.vocab.encode(edit_prompt.tokens));
    const VectorXd v_orig = bare.m[static_cast<size_t>(inject_layer)].col(base_pos);

    SearchOutcome out;
    VectorXd delta = VectorXd::Zero(model.cfg.d_model);
    VectorXd adam_m = VectorXd::Zero(model.cfg.d_model);
    VectorXd adam_v = VectorXd::Zero(model.cfg.d_model);
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    double phi = hyper.phi;
    double best_prob = -1.0;
    int plateau = 0;
    bool late_phase = false;
    double kl_value = 0.0;

    for (int step = 0; step < hyper.steps; ++step) {
        const DeltaLoss dl = delta_search_loss(model, edit_prompt, target_token, inject_layer,
                                               position, hyper.mu, phi, prefixes, kl_prompt, delta);
        kl_value = dl.kl;
        const VectorXd& grad = dl.grad;
        const double mean_prob = dl.mean_target_prob;

        if (!std::isfinite(dl.loss)) throw Diverged("delta search loss became non-finite");
        out.loss_trace.push_back(dl.loss);
        out.steps_run = step + 1;

        // phase schedule: once the target probability plateaus, protect the
        // original knowledge and allow the KL halt
        if (!late_phase) {
            if (mean_prob > best_prob + 1e-3) {
                best_prob = mean_prob;
                plateau = 0;
            } else if (++plateau >= 3) {
                late_phase = true;
                phi = hyper.phi_late;
            }
        } else if (kl_value < hyper.kl_stop) {
            break;
        }

        const double t = static_cast<double>(step + 1);
        adam_m = beta1 * adam_m + (1.0 - beta1) * grad;
        adam_v = beta2 * adam_v + (1.0 - beta2) * grad.cwiseProduct(grad);
        const VectorXd mhat = adam_m / (1.0 - std::pow(beta1, t));
        const VectorXd vhat = adam_v / (1.0 - std::pow(beta2, t));
        delta -= hyper.lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
    }

    out.kl_final = kl_value;
    out.delta = delta;
    out.v_star = v_orig + delta;
    return out;
}

// ----------------------------- closed form -----------------------------

MatrixXd calculate_delta(const MatrixXd& w_out, const MatrixXd& k_e, const MatrixXd& v_e,
                         const MatrixXd& c0, double lambda) {
    if (k_e.cols() == 0) return MatrixXd::Zero(w_out.rows(), w_out.cols());
    if (k_e.rows() != w_out.cols() || v_e.rows() != w_out.rows() || v_e.cols() != k_e.cols() ||
        c0.rows() != k_e.rows() || c0.cols() != k_e.rows()) {
        throw std::invalid_argument("calculate_delta: inconsistent shapes");
    }
    const MatrixXd r = v_e - w_out * k_e;
    MatrixXd a = lambda * c0 + k_e * k_e.transpose();
    const MatrixXd b = k_e * r.transpose();  // solve A X = K_E R^T, Delta = X^T

    auto try_solve = [&](const MatrixXd& sys) -> std::pair<bool, MatrixXd> {
        Eigen::LDLT<MatrixXd> ldlt(sys);
        if (ldlt.info() != Eigen::Success) return {false, MatrixXd()};
        MatrixXd x = ldlt.solve(b);
        const double resid = (sys * x - b).norm();
        const double scale = std::max(b.norm(), 1e-300);
        if (!x.allFinite() || resid > 1e-6 * scale) return {false, MatrixXd()};
        return {true, std::move(x)};
    };

    auto [ok, x] = try_solve(a);
    if (!ok) {
        MatrixXd jittered = a;
        jittered.diagonal().array() += 1e-8;
        std::tie(ok, x) = try_solve(jittered);
        if (!ok) throw SingularSystem("preserve+edit system not solvable even with jitter");
    }
    return x.transpose();
}

// ----------------------------- ifmet -----------------------------

namespace {

PromptSpec kl_prompt_for(const EditInstance& edit) {
    PromptSpec p;
    p.tokens = {edit.base.s, kIsAToken, kQueryToken};
    p.answer = edit.base.o;
    p.answer_unedited = edit.base.o;
    p.subject_last_index = 0;
    p.last_index = 2;
    p.hops = 1;
    return p;
}

struct StageColumn {
    size_t edit_idx;
    const PromptSpec* prompt;
    int target;
};

}  // namespace

std::string edit_report_to_json(const EditReport& report) {
    nlohmann::json j;
    j["records"] = nlohmann::json::array();
    for (const auto& r : report.records) {
        j["records"].push_back(nlohmann::json{{"edit_id", r.edit_id},
                                              {"stage", r.stage},
                                              {"layers", r.layers},
                                              {"loss_trace", r.loss_trace},
                                              {"kl_final", r.kl_final},
                                              {"update_frobenius_norm", r.update_frobenius_norm},
                                              {"status", r.status}});
    }
    return j.dump(2) + "\n";
}

EditReport run_ifmet(Model& model, const std::vector<EditInstance>& edits, const TripleStore& kb,
                     const Corpus& corpus, const StagePlan& stage1, const StagePlan& stage2,
                     const EditHyper& hyper, EditMode mode, uint64_t seed,
                     const StageCallback& on_stage) {
    EditReport report;
    if (edits.empty()) return report;

    // shared context prefixes: the bare prompt plus sampled atomic sentences
    std::vector<std::vector<int>> prefixes;
    prefixes.push_back({});
    {
        Rng rng(seed ^ 0x5eedbeefULL);
        std::vector<size_t> atomic_idx;
        for (size_t i = 0; i < corpus.train.size(); ++i) {
            if (corpus.train[i].size() == 4) atomic_idx.push_back(i);
        }
        for (int i = 0; i < hyper.n_prefixes - 1 && !atomic_idx.empty(); ++i) {
            prefixes.push_back(
                model.vocab.encode(corpus.train[atomic_idx[rng.uniform_below(atomic_idx.size())]]));
        }
    }

    const bool needs_multi = !(mode == EditMode::SingleStage || mode == EditMode::WoMulti);
    std::vector<EditInstance> work = edits;
    if (needs_multi) {
        for (auto& e : work) {
            if (e.multi_hop_prompts.empty()) {
                for (const auto& sup : query_supports(kb, e.base.s, 3)) {
                    e.multi_hop_prompts.push_back(build_multihop_prompt(e, sup));
                }
            }
            if (e.multi_hop_prompts.empty()) {
                throw InsufficientChains("edit of (" + e.base.s + ", " + e.base.r +
                                         ") has no multi-hop prompt");
            }
        }
    }

    auto run_stage = [&](int stage_id, const StagePlan& plan, bool multi_prompts) {
        // answerability of support first hops, checked on current weights
        std::vector<StageColumn> columns;
        std::map<size_t, EditRecord> records;
        for (size_t ei = 0; ei < work.size(); ++ei) {
            const EditInstance& e = work[ei];
            const int target = model.vocab.id(e.new_object);
            EditRecord rec;
            rec.edit_id = static_cast<int>(ei);
            rec.stage = stage_id;
            for (int l = plan.layer_lo; l <= plan.layer_hi; ++l) rec.layers.push_back(l);
            records[ei] = rec;

            if (!multi_prompts) {
                columns.push_back({ei, &e.single_hop_prompt, target});
                continue;
            }
            bool any = false;
            for (const auto& mp : e.multi_hop_prompts) {
                Triple support{mp.tokens[0], mp.tokens[1], e.base.s};
                const auto kept = filter_answerable(model, {support});
                if (kept.empty()) continue;
                columns.push_back({ei, &mp, target});
                any = true;
            }
            if (!any) {
                // fall back to every prompt rather than skipping the edit
                for (const auto& mp : e.multi_hop_prompts) columns.push_back({ei, &mp, target});
                records[ei].status = "partial: no answerable support, using unfiltered prompts";
            }
        }

        // search target values against the stage-entry weights
        std::vector<VectorXd> z_targets;
        std::vector<StageColumn> kept_columns;
        for (const auto& col : columns) {
            try {
                SearchOutcome so = search_value(model, *col.prompt, col.target, plan.layer_hi,
                                                plan.position, hyper, prefixes,
                                                kl_prompt_for(work[col.edit_idx]));
                const int pos = role_position(*col.prompt, plan.position);
                Trace t = forward_trace(model, model.vocab.encode(col.prompt->tokens));
                z_targets.push_back(t.h[static_cast<size_t>(plan.layer_hi)].col(pos) + so.delta);
                kept_columns.push_back(col);
                EditRecord& rec = records[col.edit_idx];
                if (rec.loss_trace.empty()) {
                    rec.loss_trace = so.loss_trace;
                    rec.kl_final = so.kl_final;
                }
            } catch (const Diverged& ex) {
                records[col.edit_idx].status = std::string("partial: ") + ex.what();
            }
        }

        // covariance of preserved keys at stage entry
        std::vector<int> span;
        for (int l = plan.layer_lo; l <= plan.layer_hi; ++l) span.push_back(l);
        const auto c0 = estimate_c0_layers(model, corpus, span, hyper.c0_samples,
                                           seed ^ 0xc0c0c0c0ULL);

        double total_update_norm = 0.0;
        for (int l = plan.layer_lo; l <= plan.layer_hi; ++l) {
            const int remaining = plan.layer_hi - l + 1;
            MatrixXd k_e(model.cfg.d_ff, static_cast<Eigen::Index>(kept_columns.size()));
            MatrixXd v_e(model.cfg.d_model, static_cast<Eigen::Index>(kept_columns.size()));
            for (size_t ci = 0; ci < kept_columns.size(); ++ci) {
                const StageColumn& col = kept_columns[ci];
                const int pos = role_position(*col.prompt, plan.position);
                k_e.col(static_cast<Eigen::Index>(ci)) =
                    extract_key(model, *col.prompt, l, plan.position, prefixes);
                Trace t = forward_trace(model, model.vocab.encode(col.prompt->tokens));
                const VectorXd h_cur = t.h[static_cast<size_t>(plan.layer_hi)].col(pos);
                const VectorXd resid = (z_targets[ci] - h_cur) / static_cast<double>(remaining);
                v_e.col(static_cast<Eigen::Index>(ci)) =
                    t.m[static_cast<size_t>(l)].col(pos) + resid;
            }
            MatrixXd& w_out = model.p.layers[static_cast<size_t>(l - 1)].w_out;
            const MatrixXd delta = calculate_delta(w_out, k_e, v_e, c0.at(l), hyper.lambda);
            w_out += delta;
            total_update_norm += delta.norm();
        }

        for (auto& [ei, rec] : records) {
            rec.update_frobenius_norm = total_update_norm;
            report.records.push_back(rec);
        }
        if (on_stage) on_stage(stage_id, model);
    };

    StagePlan plan2 = stage2;
    if (mode == EditMode::WoDeeper) {
        plan2.layer_lo = stage1.layer_lo;
        plan2.layer_hi = stage1.layer_hi;
    }
    if (mode == EditMode::WoLast) plan2.position = StagePlan::Position::SubjectLast;

    if (mode != EditMode::WoFirst) {
        run_stage(1, stage1, /*multi_prompts=*/false);
    }
    if (mode != EditMode::SingleStage) {
        run_stage(2, plan2, /*multi_prompts=*/mode != EditMode::WoMulti);
    }
    return report;
}

}  // namespace hoplab
