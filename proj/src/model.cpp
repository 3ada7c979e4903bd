#include "hoplab/model.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

namespace hoplab {

// ----------------------------- vocabulary -----------------------------

Vocab Vocab::build(const World& world) {
    Vocab v;
    auto push = [&](const std::string& name) {
        v.ids.emplace(name, static_cast<int>(v.names.size()));
        v.names.push_back(name);
    };
    for (const auto& e : world.entities) push(e);
    for (const auto& r : world.relations) push(r);
    for (const auto& r : world.relations) push(world.surface_alt.at(r));
    push(kQueryToken);
    push(kIsAToken);
    return v;
}

void Vocab::save(const std::string& path) const {
    atomic_write_text(path, nlohmann::json{{"tokens", names}}.dump(2) + "\n");
}

Vocab Vocab::load(const std::string& path) {
    Vocab v;
    auto j = nlohmann::json::parse(read_text_file(path));
    v.names = j.at("tokens").get<std::vector<std::string>>();
    for (size_t i = 0; i < v.names.size(); ++i) v.ids.emplace(v.names[i], static_cast<int>(i));
    return v;
}

// ----------------------------- parameters -----------------------------

ParamSet zeros_like(const ParamSet& p) {
    ParamSet z;
    z.tok_emb = MatrixXd::Zero(p.tok_emb.rows(), p.tok_emb.cols());
    z.pos_emb = MatrixXd::Zero(p.pos_emb.rows(), p.pos_emb.cols());
    z.layers.resize(p.layers.size());
    for (size_t l = 0; l < p.layers.size(); ++l) {
        const auto& src = p.layers[l];
        auto& dst = z.layers[l];
        dst.wq = MatrixXd::Zero(src.wq.rows(), src.wq.cols());
        dst.wk = MatrixXd::Zero(src.wk.rows(), src.wk.cols());
        dst.wv = MatrixXd::Zero(src.wv.rows(), src.wv.cols());
        dst.wo = MatrixXd::Zero(src.wo.rows(), src.wo.cols());
        dst.w_in = MatrixXd::Zero(src.w_in.rows(), src.w_in.cols());
        dst.w_out = MatrixXd::Zero(src.w_out.rows(), src.w_out.cols());
    }
    z.w_u = MatrixXd::Zero(p.w_u.rows(), p.w_u.cols());
    return z;
}

static MatrixXd gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std) {
    MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = std * rng.gaussian();
    }
    return m;
}

Model Model::init(const ModelConfig& cfg, const Vocab& vocab) {
    Model m;
    m.cfg = cfg;
    m.vocab = vocab;
    Rng rng(cfg.seed);
    const double base = 0.02;
    // residual-branch outputs scaled down so the stream stays bounded without norms
    const double resid = base / std::sqrt(2.0 * cfg.n_layers);
    m.p.tok_emb = gaussian_matrix(rng, cfg.d_model, vocab.size(), base);
    m.p.pos_emb = gaussian_matrix(rng, cfg.d_model, cfg.max_seq, base);
    m.p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& l : m.p.layers) {
        l.wq = gaussian_matrix(rng, cfg.d_model, cfg.d_model, base);
        l.wk = gaussian_matrix(rng, cfg.d_model, cfg.d_model, base);
        l.wv = gaussian_matrix(rng, cfg.d_model, cfg.d_model, base);
        l.wo = gaussian_matrix(rng, cfg.d_model, cfg.d_model, resid);
        l.w_in = gaussian_matrix(rng, cfg.d_ff, cfg.d_model, base);
        l.w_out = gaussian_matrix(rng, cfg.d_model, cfg.d_ff, resid);
    }
    m.p.w_u = gaussian_matrix(rng, vocab.size(), cfg.d_model, base);
    return m;
}

Model Model::zeros(const ModelConfig& cfg, const Vocab& vocab) {
    Model m = Model::init(cfg, vocab);
    m.p.for_each([](MatrixXd& w) { w.setZero(); });
    return m;
}

uint64_t Model::weight_checksum() const {
    uint64_t h = 1469598103934665603ull;
    p.for_each([&](const MatrixXd& w) {
        h = fnv1a(w.data(), sizeof(double) * static_cast<size_t>(w.size()), h);
    });
    return h;
}

// ----------------------------- activations -----------------------------

static inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

static inline double gelu_prime(double x) {
    const double phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
    return phi + x * pdf;
}

int argmax_lowest(const VectorXd& v) {
    int best = 0;
    for (int i = 1; i < v.size(); ++i) {
        if (v(i) > v(best)) best = i;
    }
    return best;
}

VectorXd softmax(const VectorXd& logits) {
    const double mx = logits.maxCoeff();
    VectorXd e = (logits.array() - mx).exp();
    return e / e.sum();
}

// ----------------------------- forward -----------------------------

ForwardCache forward_batch(const Model& model, const std::vector<std::vector<int>>& sentences,
                           const std::vector<Injection>& injections,
                           const std::vector<int>& pos_offsets) {
    const ModelConfig& cfg = model.cfg;
    const int B = static_cast<int>(sentences.size());
    if (B == 0) throw std::runtime_error("empty batch");
    const int T = static_cast<int>(sentences[0].size());
    if (T == 0) throw std::runtime_error("empty token sequence");
    if (T > cfg.max_seq) throw std::runtime_error("sequence longer than max_seq");
    if (!pos_offsets.empty() && static_cast<int>(pos_offsets.size()) != B) {
        throw std::runtime_error("pos_offsets must match the batch size");
    }
    const int N = B * T;
    const int H = cfg.n_heads;
    const int hd = cfg.d_model / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    ForwardCache c;
    c.batch = B;
    c.seq = T;
    c.pos_offsets = pos_offsets.empty() ? std::vector<int>(static_cast<size_t>(B), 0) : pos_offsets;
    for (int off : c.pos_offsets) {
        if (off < 0 || off + T > cfg.max_seq) throw std::runtime_error("position offset out of range");
    }
    c.tokens_flat.reserve(static_cast<size_t>(N));
    for (const auto& s : sentences) {
        if (static_cast<int>(s.size()) != T) throw std::runtime_error("batch sentences must share length");
        for (int t : s) {
            if (t < 0 || t >= model.vocab.size()) throw UnknownToken(std::to_string(t));
            c.tokens_flat.push_back(t);
        }
    }

    const int L = cfg.n_layers;
    c.h.resize(static_cast<size_t>(L) + 1);
    c.q.resize(static_cast<size_t>(L) + 1);
    c.k.resize(static_cast<size_t>(L) + 1);
    c.v.resize(static_cast<size_t>(L) + 1);
    c.attn.resize(static_cast<size_t>(L) + 1);
    c.attn_cat.resize(static_cast<size_t>(L) + 1);
    c.a.resize(static_cast<size_t>(L) + 1);
    c.z.resize(static_cast<size_t>(L) + 1);
    c.kact.resize(static_cast<size_t>(L) + 1);
    c.m.resize(static_cast<size_t>(L) + 1);

    MatrixXd x(cfg.d_model, N);
    for (int n = 0; n < N; ++n) {
        x.col(n) = model.p.tok_emb.col(c.tokens_flat[static_cast<size_t>(n)]) +
                   model.p.pos_emb.col(c.pos_offsets[static_cast<size_t>(n / T)] + n % T);
    }
    c.h[0] = x;

    for (int l = 1; l <= L; ++l) {
        const LayerWeights& w = model.p.layers[static_cast<size_t>(l - 1)];
        const MatrixXd& xin = c.h[static_cast<size_t>(l - 1)];
        c.q[l] = w.wq * xin;
        c.k[l] = w.wk * xin;
        c.v[l] = w.wv * xin;

        MatrixXd ocat(cfg.d_model, N);
        c.attn[l].assign(static_cast<size_t>(H) * B, MatrixXd());
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                auto qb = c.q[l].block(h * hd, b * T, hd, T);
                auto kb = c.k[l].block(h * hd, b * T, hd, T);
                auto vb = c.v[l].block(h * hd, b * T, hd, T);
                MatrixXd s = (qb.transpose() * kb) * scale;  // (i, j): query i, key j
                MatrixXd p(T, T);
                for (int i = 0; i < T; ++i) {
                    double mx = -1e300;
                    for (int j = 0; j <= i; ++j) mx = std::max(mx, s(i, j));
                    double denom = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        p(i, j) = std::exp(s(i, j) - mx);
                        denom += p(i, j);
                    }
                    for (int j = 0; j <= i; ++j) p(i, j) /= denom;
                    for (int j = i + 1; j < T; ++j) p(i, j) = 0.0;
                }
                c.attn[l][static_cast<size_t>(h) * B + b] = p;
                ocat.block(h * hd, b * T, hd, T) = vb * p.transpose();
            }
        }
        c.attn_cat[l] = std::move(ocat);
        c.a[l] = w.wo * c.attn_cat[l];

        c.z[l] = w.w_in * xin;
        c.kact[l] = c.z[l].unaryExpr([](double v) { return gelu(v); });
        c.m[l] = w.w_out * c.kact[l];
        for (const auto& inj : injections) {
            if (inj.layer == l && inj.kind == Injection::Kind::MlpAdd) {
                c.m[l].col(inj.pos) += inj.delta;
            }
        }

        c.h[l] = xin + c.a[l] + c.m[l];
        for (const auto& inj : injections) {
            if (inj.layer == l && inj.kind == Injection::Kind::HiddenAdd) {
                c.h[l].col(inj.pos) += inj.delta;
            }
        }
    }
    c.logits = model.p.w_u * c.h[static_cast<size_t>(L)];
    return c;
}

void backward_batch(const Model& model, const ForwardCache& c, const MatrixXd& dlogits,
                    ParamSet* gw, const std::vector<Injection>& injections,
                    std::vector<VectorXd>* injection_grads) {
    const ModelConfig& cfg = model.cfg;
    const int B = c.batch;
    const int T = c.seq;
    const int N = B * T;
    const int H = cfg.n_heads;
    const int hd = cfg.d_model / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const int L = cfg.n_layers;

    if (injection_grads) injection_grads->assign(injections.size(), VectorXd());

    if (gw) gw->w_u += dlogits * c.h[static_cast<size_t>(L)].transpose();
    MatrixXd dy = model.p.w_u.transpose() * dlogits;  // grad w.r.t. h_L

    for (int l = L; l >= 1; --l) {
        const LayerWeights& w = model.p.layers[static_cast<size_t>(l - 1)];
        const MatrixXd& xin = c.h[static_cast<size_t>(l - 1)];

        // both injection kinds add straight into this layer's output stream
        if (injection_grads) {
            for (size_t i = 0; i < injections.size(); ++i) {
                if (injections[i].layer == l) (*injection_grads)[i] = dy.col(injections[i].pos);
            }
        }

        // FFN branch
        if (gw) gw->layers[static_cast<size_t>(l - 1)].w_out += dy * c.kact[l].transpose();
        MatrixXd dkact = w.w_out.transpose() * dy;
        MatrixXd dz = dkact.cwiseProduct(c.z[l].unaryExpr([](double v) { return gelu_prime(v); }));
        if (gw) gw->layers[static_cast<size_t>(l - 1)].w_in += dz * xin.transpose();
        MatrixXd dx = w.w_in.transpose() * dz;

        // attention branch
        if (gw) gw->layers[static_cast<size_t>(l - 1)].wo += dy * c.attn_cat[l].transpose();
        MatrixXd docat = w.wo.transpose() * dy;
        MatrixXd dq = MatrixXd::Zero(cfg.d_model, N);
        MatrixXd dk = MatrixXd::Zero(cfg.d_model, N);
        MatrixXd dv = MatrixXd::Zero(cfg.d_model, N);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const MatrixXd& p = c.attn[l][static_cast<size_t>(h) * B + b];
                auto qb = c.q[l].block(h * hd, b * T, hd, T);
                auto kb = c.k[l].block(h * hd, b * T, hd, T);
                auto vb = c.v[l].block(h * hd, b * T, hd, T);
                auto dob = docat.block(h * hd, b * T, hd, T);

                dv.block(h * hd, b * T, hd, T) += dob * p;
                MatrixXd dp = dob.transpose() * vb;  // (i, j)
                MatrixXd ds(T, T);
                for (int i = 0; i < T; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
                    for (int j = 0; j < T; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot);
                }
                dq.block(h * hd, b * T, hd, T) += (kb * ds.transpose()) * scale;
                dk.block(h * hd, b * T, hd, T) += (qb * ds) * scale;
            }
        }
        if (gw) {
            gw->layers[static_cast<size_t>(l - 1)].wq += dq * xin.transpose();
            gw->layers[static_cast<size_t>(l - 1)].wk += dk * xin.transpose();
            gw->layers[static_cast<size_t>(l - 1)].wv += dv * xin.transpose();
        }
        dx += w.wq.transpose() * dq + w.wk.transpose() * dk + w.wv.transpose() * dv;

        // residual identity path plus the branch paths
        dx += dy;
        dy = std::move(dx);
    }

    if (gw) {
        for (int n = 0; n < N; ++n) {
            gw->tok_emb.col(c.tokens_flat[static_cast<size_t>(n)]) += dy.col(n);
            gw->pos_emb.col(c.pos_offsets[static_cast<size_t>(n / T)] + n % T) += dy.col(n);
        }
    }
}

// ----------------------------- trace -----------------------------

Trace forward_trace(const Model& model, const std::vector<int>& tokens) {
    return forward_trace(model, tokens, {});
}

Trace forward_trace(const Model& model, const std::vector<int>& tokens,
                    const std::vector<Injection>& injections) {
    ForwardCache c = forward_batch(model, {tokens}, injections);
    Trace t;
    t.h = c.h;
    const int L = model.cfg.n_layers;
    t.m.resize(static_cast<size_t>(L) + 1);
    t.a.resize(static_cast<size_t>(L) + 1);
    t.k.resize(static_cast<size_t>(L) + 1);
    for (int l = 1; l <= L; ++l) {
        t.m[l] = c.m[l];
        t.a[l] = c.a[l];
        t.k[l] = c.kact[l];
    }
    t.logits = c.logits;
    return t;
}

Answer answer_and_prob(const Model& model, const PromptSpec& prompt) {
    const std::vector<int> toks = model.vocab.encode(prompt.tokens);
    ForwardCache c = forward_batch(model, {toks}, {});
    Answer ans;
    ans.probs = softmax(c.logits.col(c.seq - 1));
    ans.token_id = argmax_lowest(ans.probs);
    ans.token = model.vocab.name(ans.token_id);
    return ans;
}

// ----------------------------- training -----------------------------

namespace {

struct AdamState {
    ParamSet m, v;
    int t{0};
};

void adam_step(Model& model, ParamSet& grads, AdamState& st, const TrainConfig& cfg) {
    if (cfg.tie_embeddings) {
        // fold the unembedding gradient into the shared embedding; w_u is
        // re-derived from tok_emb after the step
        grads.tok_emb += grads.w_u.transpose();
        grads.w_u.setZero();
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, st.t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, st.t);
    std::vector<MatrixXd*> ws, gs, ms, vs;
    model.p.for_each([&](MatrixXd& w) { ws.push_back(&w); });
    const_cast<ParamSet&>(grads).for_each([&](MatrixXd& g) { gs.push_back(&g); });
    st.m.for_each([&](MatrixXd& m) { ms.push_back(&m); });
    st.v.for_each([&](MatrixXd& v) { vs.push_back(&v); });
    for (size_t i = 0; i < ws.size(); ++i) {
        MatrixXd& w = *ws[i];
        const MatrixXd& g = *gs[i];
        MatrixXd& m = *ms[i];
        MatrixXd& v = *vs[i];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        w.array() -= cfg.lr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps) +
                               cfg.weight_decay * w.array());
    }
    if (cfg.tie_embeddings) model.p.w_u = model.p.tok_emb.transpose();
}

double batch_loss_and_grads(const Model& model, const std::vector<std::vector<int>>& group,
                            ParamSet* gw, double weight,
                            const std::vector<int>& pos_offsets = {}) {
    ForwardCache c = forward_batch(model, group, {}, pos_offsets);
    const int B = c.batch;
    const int T = c.seq;
    MatrixXd dlogits = MatrixXd::Zero(c.logits.rows(), c.logits.cols());
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        const int qpos = b * T + (T - 2);
        const int target = c.tokens_flat[static_cast<size_t>(b * T + (T - 1))];
        VectorXd p = softmax(c.logits.col(qpos));
        loss += -std::log(std::max(p(target), 1e-300));
        if (gw) {
            dlogits.col(qpos) = weight * p;
            dlogits(target, qpos) -= weight;
        }
    }
    if (gw) backward_batch(model, c, dlogits, gw, {}, nullptr);
    return loss;
}

}  // namespace

double training_loss(const Model& model, const std::vector<std::vector<int>>& sentences,
                     ParamSet* grads) {
    if (sentences.empty()) return 0.0;
    std::map<int, std::vector<std::vector<int>>> groups;
    for (const auto& s : sentences) groups[static_cast<int>(s.size())].push_back(s);
    double loss = 0.0;
    const double weight = 1.0 / static_cast<double>(sentences.size());
    for (const auto& [len, group] : groups) {
        loss += batch_loss_and_grads(model, group, grads, weight);
    }
    return loss / static_cast<double>(sentences.size());
}

std::vector<Triple> filter_answerable(const Model& model, const std::vector<Triple>& candidates) {
    std::vector<Triple> kept;
    for (const auto& t : candidates) {
        PromptSpec p;
        p.tokens = {t.s, t.r, kQueryToken};
        p.answer = t.o;
        p.answer_unedited = t.o;
        p.subject_last_index = 0;
        p.last_index = 2;
        if (answer_and_prob(model, p).token == t.o) kept.push_back(t);
    }
    return kept;
}

double sentence_accuracy(const Model& model,
                         const std::vector<std::vector<std::string>>& sentences) {
    if (sentences.empty()) return 0.0;
    // group by length so whole batches go through one forward
    std::map<int, std::vector<size_t>> by_len;
    for (size_t i = 0; i < sentences.size(); ++i) {
        by_len[static_cast<int>(sentences[i].size())].push_back(i);
    }
    int correct = 0;
    for (const auto& [len, idxs] : by_len) {
        const size_t chunk = 256;
        for (size_t start = 0; start < idxs.size(); start += chunk) {
            std::vector<std::vector<int>> group;
            for (size_t i = start; i < std::min(idxs.size(), start + chunk); ++i) {
                group.push_back(model.vocab.encode(sentences[idxs[i]]));
            }
            ForwardCache c = forward_batch(model, group, {});
            for (int b = 0; b < c.batch; ++b) {
                const int qpos = b * len + (len - 2);
                const int target = c.tokens_flat[static_cast<size_t>(b * len + (len - 1))];
                if (argmax_lowest(c.logits.col(qpos)) == target) ++correct;
            }
        }
    }
    return static_cast<double>(correct) / static_cast<double>(sentences.size());
}

TrainReport train(Model& model, const Corpus& corpus, const TrainConfig& cfg) {
    if (corpus.train.empty()) throw std::runtime_error("empty corpus");
    TrainReport rep;
    rep.steps = cfg.steps;

    std::vector<std::vector<int>> encoded;
    encoded.reserve(corpus.train.size());
    for (const auto& s : corpus.train) encoded.push_back(model.vocab.encode(s));

    Rng rng(cfg.seed);
    std::vector<size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();  // forces the first shuffle

    AdamState st;
    st.m = zeros_like(model.p);
    st.v = zeros_like(model.p);
    if (cfg.tie_embeddings && cfg.steps > 0) model.p.w_u = model.p.tok_emb.transpose();

    std::vector<std::vector<std::string>> atomic, twohop;
    for (const auto& s : corpus.train) {
        (s.size() == 4 ? atomic : twohop).push_back(s);
    }

    std::deque<double> recent;
    int steps_run = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<size_t> batch_idx;
        for (int i = 0; i < cfg.batch; ++i) {
            if (cursor >= order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch_idx.push_back(order[cursor++]);
        }
        // sentences are placed at random position offsets so attention must
        // route by token content, letting the two-hop format reuse the
        // atomic circuits
        std::map<int, std::pair<std::vector<std::vector<int>>, std::vector<int>>> groups;
        for (size_t idx : batch_idx) {
            const int len = static_cast<int>(encoded[idx].size());
            const int offset =
                cfg.position_augmentation ? rng.index(model.cfg.max_seq - len + 1) : 0;
            groups[len].first.push_back(encoded[idx]);
            groups[len].second.push_back(offset);
        }
        ParamSet gw = zeros_like(model.p);
        double loss = 0.0;
        const double weight = 1.0 / static_cast<double>(batch_idx.size());
        for (const auto& [len, group] : groups) {
            loss += batch_loss_and_grads(model, group.first, &gw, weight, group.second);
        }
        loss /= static_cast<double>(batch_idx.size());
        if (!std::isfinite(loss)) throw Diverged("training loss became non-finite at step " +
                                                 std::to_string(step));
        adam_step(model, gw, st, cfg);
        recent.push_back(loss);
        if (recent.size() > 100) recent.pop_front();
        steps_run = step + 1;

        if (cfg.early_stop_heldout >= 0.0 && cfg.eval_every > 0 &&
            steps_run % cfg.eval_every == 0 && !corpus.heldout_inferred.empty()) {
            TrainEvalPoint pt;
            pt.step = steps_run;
            pt.atomic_acc = sentence_accuracy(model, atomic);
            pt.heldout_acc = sentence_accuracy(model, corpus.heldout_inferred);
            rep.eval_trace.push_back(pt);
            if (pt.heldout_acc >= cfg.early_stop_heldout && pt.atomic_acc >= 0.995) break;
        }
    }
    rep.steps = steps_run;
    rep.final_loss = recent.empty()
                         ? 0.0
                         : std::accumulate(recent.begin(), recent.end(), 0.0) /
                               static_cast<double>(recent.size());

    rep.atomic_acc = sentence_accuracy(model, atomic);
    rep.twohop_train_acc = sentence_accuracy(model, twohop);
    rep.heldout_inferred_acc = sentence_accuracy(model, corpus.heldout_inferred);
    return rep;
}

}  // namespace hoplab
