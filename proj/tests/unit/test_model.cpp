#include "doctest.h"

#include <filesystem>

#include "hoplab/checkpoint.hpp"
#include "hoplab/model.hpp"

using namespace hoplab;

namespace {

World tiny_world() { return gen_world(20, 4, 3); }

ModelConfig tiny_config(int layers = 2, int d = 8, int heads = 2, uint64_t seed = 11) {
    ModelConfig mc;
    mc.n_layers = layers;
    mc.d_model = d;
    mc.n_heads = heads;
    mc.d_ff = 4 * d;
    mc.max_seq = 16;
    mc.seed = seed;
    return mc;
}

std::vector<std::vector<int>> sample_sentences(const Model& model, const Corpus& corpus, int n) {
    std::vector<std::vector<int>> out;
    for (int i = 0; i < n && i < static_cast<int>(corpus.train.size()); ++i) {
        out.push_back(model.vocab.encode(corpus.train[static_cast<size_t>(i) * 7 %
                                                      corpus.train.size()]));
    }
    return out;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("residual identity holds exactly at every layer and position") {
    World w = tiny_world();
    Model m = Model::init(tiny_config(4, 16, 4, 2), Vocab::build(w));
    const std::vector<int> toks = m.vocab.encode({w.entities[0], w.relations[1], kQueryToken});
    Trace t = forward_trace(m, toks);
    for (int l = 1; l <= m.cfg.n_layers; ++l) {
        const MatrixXd want = t.h[static_cast<size_t>(l - 1)] + t.m[static_cast<size_t>(l)] +
                              t.a[static_cast<size_t>(l)];
        CHECK((t.h[static_cast<size_t>(l)] - want).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("zero model yields the uniform next-token distribution") {
    World w = tiny_world();
    Model m = Model::zeros(tiny_config(), Vocab::build(w));
    PromptSpec p;
    p.tokens = {w.entities[3], w.relations[0], kQueryToken};
    p.subject_last_index = 0;
    p.last_index = 2;
    Answer a = answer_and_prob(m, p);
    const double uniform = 1.0 / m.vocab.size();
    for (int i = 0; i < a.probs.size(); ++i) CHECK(a.probs(i) == doctest::Approx(uniform).epsilon(1e-12));
    CHECK(a.token_id == 0);  // tie broken by lowest token id
}

TEST_CASE("stored final logits equal an external W_U * h_L multiply") {
    World w = tiny_world();
    Model m = Model::init(tiny_config(3, 16, 2, 7), Vocab::build(w));
    const std::vector<int> toks =
        m.vocab.encode({w.entities[1], w.relations[0], w.relations[1], kQueryToken});
    Trace t = forward_trace(m, toks);
    const MatrixXd recomputed = m.p.w_u * t.h[static_cast<size_t>(m.cfg.n_layers)];
    CHECK((recomputed - t.logits).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("forward pass never mutates weights") {
    World w = tiny_world();
    Model m = Model::init(tiny_config(), Vocab::build(w));
    const uint64_t before = m.weight_checksum();
    for (int i = 0; i < 5; ++i) {
        forward_trace(m, m.vocab.encode({w.entities[i], w.relations[0], kQueryToken}));
    }
    CHECK(m.weight_checksum() == before);
}

TEST_CASE("unknown tokens are rejected") {
    World w = tiny_world();
    Model m = Model::init(tiny_config(), Vocab::build(w));
    CHECK_THROWS_AS(m.vocab.encode({"nonsense"}), UnknownToken);
}

TEST_CASE("softmax vector sums to one and calls are deterministic") {
    World w = tiny_world();
    Model m = Model::init(tiny_config(4, 16, 4, 9), Vocab::build(w));
    PromptSpec p;
    p.tokens = {w.entities[2], w.relations[1], kQueryToken};
    p.subject_last_index = 0;
    p.last_index = 2;
    Answer a1 = answer_and_prob(m, p);
    Answer a2 = answer_and_prob(m, p);
    CHECK(std::abs(a1.probs.sum() - 1.0) < 1e-9);
    CHECK(a1.token_id == a2.token_id);
    CHECK((a1.probs - a2.probs).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training-loss gradients match central finite differences") {
    World w = tiny_world();
    Corpus corpus = gen_corpus(w, 0.2);
    Model m = Model::init(tiny_config(2, 8, 2, 13), Vocab::build(w));
    const auto sentences = sample_sentences(m, corpus, 6);

    ParamSet grads = zeros_like(m.p);
    training_loss(m, sentences, &grads);

    std::vector<MatrixXd*> ws, gs;
    m.p.for_each([&](MatrixXd& mat) { ws.push_back(&mat); });
    grads.for_each([&](MatrixXd& mat) { gs.push_back(&mat); });

    Rng rng(55);
    const double h = 1e-5;
    double max_rel = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const size_t wi = rng.uniform_below(ws.size());
        MatrixXd& mat = *ws[wi];
        const Eigen::Index idx = static_cast<Eigen::Index>(rng.uniform_below(
            static_cast<uint64_t>(mat.size())));
        const double orig = mat.data()[idx];
        mat.data()[idx] = orig + h;
        const double lp = training_loss(m, sentences, nullptr);
        mat.data()[idx] = orig - h;
        const double lm = training_loss(m, sentences, nullptr);
        mat.data()[idx] = orig;
        const double fd = (lp - lm) / (2 * h);
        const double an = gs[wi]->data()[idx];
        // central differences bottom out near eps*|loss|/h ~ 1e-11, so a
        // floor keeps near-zero gradients from inflating the ratio
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
        max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
    CHECK(max_rel < 1e-3);
}

TEST_CASE("injection gradients match finite differences") {
    World w = tiny_world();
    Model m = Model::init(tiny_config(3, 8, 2, 29), Vocab::build(w));
    const std::vector<int> toks =
        m.vocab.encode({w.entities[0], w.relations[0], w.relations[1], kQueryToken});
    const int target = 3;

    auto loss_at = [&](const VectorXd& delta) {
        Injection inj{Injection::Kind::MlpAdd, 2, 1, delta};
        ForwardCache c = forward_batch(m, {toks}, {inj});
        return -std::log(softmax(c.logits.col(c.seq - 1))(target));
    };

    VectorXd delta = VectorXd::Zero(m.cfg.d_model);
    delta(0) = 0.3;
    delta(5) = -0.2;
    Injection inj{Injection::Kind::MlpAdd, 2, 1, delta};
    ForwardCache c = forward_batch(m, {toks}, {inj});
    MatrixXd dlogits = MatrixXd::Zero(c.logits.rows(), c.logits.cols());
    dlogits.col(c.seq - 1) = softmax(c.logits.col(c.seq - 1));
    dlogits(target, c.seq - 1) -= 1.0;
    std::vector<VectorXd> inj_grads;
    backward_batch(m, c, dlogits, nullptr, {inj}, &inj_grads);

    const double h = 1e-6;
    for (int d : {0, 3, 5}) {
        VectorXd dp = delta, dm = delta;
        dp(d) += h;
        dm(d) -= h;
        const double fd = (loss_at(dp) - loss_at(dm)) / (2 * h);
        CHECK(std::abs(fd - inj_grads[0](d)) < 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("zero training steps leave weights untouched") {
    World w = tiny_world();
    Corpus corpus = gen_corpus(w, 0.2);
    Model m = Model::init(tiny_config(), Vocab::build(w));
    const uint64_t before = m.weight_checksum();
    TrainConfig tc;
    tc.steps = 0;
    TrainReport rep = train(m, corpus, tc);
    CHECK(m.weight_checksum() == before);
    CHECK(rep.steps == 0);
    CHECK(rep.atomic_acc >= 0.0);
}

TEST_CASE("training throws Diverged when the loss explodes") {
    World w = tiny_world();
    Corpus corpus = gen_corpus(w, 0.2);
    Model m = Model::init(tiny_config(4, 16, 2, 3), Vocab::build(w));
    TrainConfig tc;
    tc.steps = 400;
    tc.lr = 1e9;
    tc.weight_decay = 0.0;
    CHECK_THROWS_AS(train(m, corpus, tc), Diverged);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    World w = tiny_world();
    Vocab vocab = Vocab::build(w);
    Model m = Model::init(tiny_config(3, 16, 4, 123), vocab);
    const std::string p1 = "/tmp/hoplab_test_a.ckpt";
    const std::string p2 = "/tmp/hoplab_test_b.ckpt";
    save_checkpoint(m, p1);
    Model back = load_checkpoint(p1, vocab);
    save_checkpoint(back, p2);
    CHECK(read_text_file(p1) == read_text_file(p2));
    CHECK(back.cfg.n_layers == m.cfg.n_layers);
    CHECK(back.cfg.d_model == m.cfg.d_model);

    // reload stays within f32 truncation of the original
    double max_err = 0.0;
    const MatrixXd diff = back.p.w_u - m.p.w_u;
    max_err = diff.cwiseAbs().maxCoeff();
    CHECK(max_err < 1e-6);
}

TEST_CASE("loading a missing checkpoint reports a missing artifact") {
    World w = tiny_world();
    CHECK_THROWS_AS(load_checkpoint("/tmp/does_not_exist.ckpt", Vocab::build(w)), MissingArtifact);
}

}  // TEST_SUITE
