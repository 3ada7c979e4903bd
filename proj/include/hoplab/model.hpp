#pragma once
// Toy decoder-only transformer: parallel attention + MLP per block, no
// normalization layers, untied unembedding. All math in f64. The residual
// identity h_l = h_{l-1} + m_l + a_l holds exactly, final logits are
// W_U * h_L, and the FFN keys are f(W_in * h_{l-1}).

#include <Eigen/Dense>
#include <string>
#include <unordered_map>
#include <vector>

#include "hoplab/datagen.hpp"

namespace hoplab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ----------------------------- vocabulary -----------------------------

struct Vocab {
    std::vector<std::string> names;
    std::unordered_map<std::string, int> ids;

    int id(const std::string& tok) const {
        auto it = ids.find(tok);
        if (it == ids.end()) throw UnknownToken(tok);
        return it->second;
    }
    const std::string& name(int id) const { return names.at(static_cast<size_t>(id)); }
    int size() const { return static_cast<int>(names.size()); }

    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) out.push_back(id(t));
        return out;
    }

    // entities, relations, alt surface tokens, then QUERY and IS-A
    static Vocab build(const World& world);

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);
};

// ----------------------------- model -----------------------------

struct ModelConfig {
    int n_layers{8};
    int d_model{64};
    int n_heads{4};
    int d_ff{256};  // 4 * d_model
    int max_seq{16};
    uint64_t seed{0};
};

struct LayerWeights {
    MatrixXd wq, wk, wv, wo;  // d x d
    MatrixXd w_in;            // d_ff x d
    MatrixXd w_out;           // d x d_ff
};

struct ParamSet {
    MatrixXd tok_emb;  // d x |V|
    MatrixXd pos_emb;  // d x max_seq
    std::vector<LayerWeights> layers;
    MatrixXd w_u;  // |V| x d

    template <class F>
    void for_each(F f) {
        f(tok_emb);
        f(pos_emb);
        for (auto& l : layers) {
            f(l.wq);
            f(l.wk);
            f(l.wv);
            f(l.wo);
            f(l.w_in);
            f(l.w_out);
        }
        f(w_u);
    }
    template <class F>
    void for_each(F f) const {
        const_cast<ParamSet*>(this)->for_each([&](MatrixXd& m) { f(static_cast<const MatrixXd&>(m)); });
    }
};

ParamSet zeros_like(const ParamSet& p);

struct Model {
    ModelConfig cfg;
    Vocab vocab;
    ParamSet p;

    static Model init(const ModelConfig& cfg, const Vocab& vocab);
    static Model zeros(const ModelConfig& cfg, const Vocab& vocab);

    uint64_t weight_checksum() const;
};

// ----------------------------- forward -----------------------------

// Additive interventions applied during a forward pass. `pos` indexes the
// flattened batch column (equals the token position for single sentences).
struct Injection {
    enum class Kind { MlpAdd, HiddenAdd };
    Kind kind{Kind::MlpAdd};
    int layer{1};  // 1-based
    int pos{0};
    VectorXd delta;
};

// Per-layer/per-position capture of one sentence. Index l in [1, L]; h[0]
// holds the embeddings.
struct Trace {
    std::vector<MatrixXd> h;  // L+1 entries, d x T
    std::vector<MatrixXd> m;  // L+1 entries ([0] empty)
    std::vector<MatrixXd> a;
    std::vector<MatrixXd> k;  // FFN keys, d_ff x T
    MatrixXd logits;          // |V| x T
};

Trace forward_trace(const Model& model, const std::vector<int>& tokens);
Trace forward_trace(const Model& model, const std::vector<int>& tokens,
                    const std::vector<Injection>& injections);

// Full activations of a same-length sentence batch, kept for backward.
struct ForwardCache {
    int batch{0};
    int seq{0};
    std::vector<int> pos_offsets;  // per-sentence position-embedding offset
    std::vector<int> tokens_flat;
    std::vector<MatrixXd> h;          // L+1, d x (B*T)
    std::vector<MatrixXd> q, k, v;    // L+1 ([0] empty)
    std::vector<std::vector<MatrixXd>> attn;  // [layer][head*B + b], T x T row-softmax
    std::vector<MatrixXd> attn_cat;   // pre-Wo head concat
    std::vector<MatrixXd> a, z, kact, m;
    MatrixXd logits;
};

ForwardCache forward_batch(const Model& model, const std::vector<std::vector<int>>& sentences,
                           const std::vector<Injection>& injections = {},
                           const std::vector<int>& pos_offsets = {});

// Backward through the cached forward. `dlogits` has the same shape as
// cache.logits. Weight gradients accumulate into `gw` when non-null;
// gradients w.r.t. each injection delta are written to `injection_grads`
// (aligned with `injections`) when non-null.
void backward_batch(const Model& model, const ForwardCache& cache, const MatrixXd& dlogits,
                    ParamSet* gw, const std::vector<Injection>& injections = {},
                    std::vector<VectorXd>* injection_grads = nullptr);

// ----------------------------- inference helpers -----------------------------

int argmax_lowest(const VectorXd& v);
VectorXd softmax(const VectorXd& logits);

struct Answer {
    int token_id{};
    std::string token;
    VectorXd probs;
};

// Argmax answer at the last position (ties to the lowest token id) plus the
// full softmax vector.
Answer answer_and_prob(const Model& model, const PromptSpec& prompt);

// ----------------------------- training -----------------------------

struct TrainConfig {
    int steps{8000};
    int batch{64};
    double lr{1e-3};
    double weight_decay{0.02};
    double beta1{0.9};
    double beta2{0.999};
    double adam_eps{1e-8};
    uint64_t seed{1};
    // keep W_U equal to tok_emb^T during training; the shared vectors let the
    // second hop reuse the atomic lookup circuit on internally produced
    // entity representations
    bool tie_embeddings{true};
    // train each sentence at a random position offset so routing is by token
    // content rather than absolute position
    bool position_augmentation{true};
    // stop once atomic accuracy >= 0.995 and held-out accuracy reaches this
    // (negative disables the check)
    double early_stop_heldout{-1.0};
    int eval_every{500};
};

struct TrainEvalPoint {
    int step{0};
    double atomic_acc{0.0};
    double heldout_acc{0.0};
};

struct TrainReport {
    int steps{0};
    double final_loss{0.0};
    double atomic_acc{0.0};
    double twohop_train_acc{0.0};
    double heldout_inferred_acc{0.0};
    std::vector<TrainEvalPoint> eval_trace;
};

// Next-token cross-entropy at the answer position of every sentence.
TrainReport train(Model& model, const Corpus& corpus, const TrainConfig& cfg);

// Mean answer-position cross-entropy over `sentences` (mixed lengths fine);
// accumulates weight gradients when `grads` is non-null.
double training_loss(const Model& model, const std::vector<std::vector<int>>& sentences,
                     ParamSet* grads);

// Fraction of sentences whose argmax at the query position matches the
// answer token.
double sentence_accuracy(const Model& model, const std::vector<std::vector<std::string>>& sentences);

// kb operation that needs a model: keeps exactly the candidates whose
// single-hop prompt [s][r][QUERY] the model answers with the candidate's
// object. Subset of the input and idempotent.
std::vector<Triple> filter_answerable(const Model& model, const std::vector<Triple>& candidates);

}  // namespace hoplab
