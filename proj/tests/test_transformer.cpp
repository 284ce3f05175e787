#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "photondfa/dataset.hpp"
#include "photondfa/lm_train.hpp"
#include "photondfa/tokenizer.hpp"
#include "photondfa/transformer.hpp"

using namespace photondfa;

namespace {

TransformerConfig tiny_config(std::size_t vocab = 11) {
    TransformerConfig c;
    c.vocab_size = vocab;
    c.embed_dim = 8;
    c.n_blocks = 2;
    c.n_heads = 2;
    c.mlp_hidden = 12;
    c.context_size = 6;
    return c;
}

using Vec = std::vector<double>;

// Fully independent straight-line forward pass: per-position vectors,
// explicit loops, no shared code with the library.
std::vector<Vec> oracle_forward(TransformerModel& m, const std::vector<int>& toks) {
    const std::size_t E = m.config.embed_dim, H = m.config.n_heads, hd = E / H;
    const std::size_t S = toks.size(), V = m.config.vocab_size, M = m.config.mlp_hidden;

    auto ln = [&](const Vec& x, const Tensor& g, const Tensor& b) {
        double mu = 0;
        for (double v : x) mu += v;
        mu /= x.size();
        double var = 0;
        for (double v : x) var += (v - mu) * (v - mu);
        var /= x.size();
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        Vec y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = g[i] * (x[i] - mu) * rstd + b[i];
        return y;
    };
    auto mat = [&](const Vec& x, const Tensor& w, const Tensor* b) {
        Vec y(w.rows(), 0.0);
        for (std::size_t o = 0; o < w.rows(); ++o) {
            for (std::size_t j = 0; j < w.cols(); ++j) y[o] += w(o, j) * x[j];
            if (b) y[o] += (*b)[o];
        }
        return y;
    };

    std::vector<Vec> x(S, Vec(E));
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t i = 0; i < E; ++i) {
            x[s][i] = m.wte(static_cast<std::size_t>(toks[s]), i) + m.wpe(s, i);
        }
    }
    for (auto& blk : m.blocks) {
        std::vector<Vec> l1(S), q(S), k(S), v(S), mix(S, Vec(E, 0.0));
        for (std::size_t s = 0; s < S; ++s) {
            l1[s] = ln(x[s], blk.ln1_g, blk.ln1_b);
            q[s] = mat(l1[s], blk.wq, &blk.bq);
            k[s] = mat(l1[s], blk.wk, &blk.bk);
            v[s] = mat(l1[s], blk.wv, &blk.bv);
        }
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < S; ++i) {
                Vec scores(i + 1, 0.0);
                for (std::size_t j = 0; j <= i; ++j) {
                    for (std::size_t d = 0; d < hd; ++d) {
                        scores[j] += q[i][h * hd + d] * k[j][h * hd + d];
                    }
                    scores[j] /= std::sqrt(static_cast<double>(hd));
                }
                double mx = scores[0];
                for (double sc : scores) mx = std::max(mx, sc);
                double denom = 0;
                for (auto& sc : scores) {
                    sc = std::exp(sc - mx);
                    denom += sc;
                }
                for (auto& sc : scores) sc /= denom;
                for (std::size_t d = 0; d < hd; ++d) {
                    double acc = 0;
                    for (std::size_t j = 0; j <= i; ++j) acc += scores[j] * v[j][h * hd + d];
                    mix[i][h * hd + d] = acc;
                }
            }
        }
        for (std::size_t s = 0; s < S; ++s) {
            const Vec attn = mat(mix[s], blk.wo, &blk.bo);
            Vec xmid(E);
            for (std::size_t i = 0; i < E; ++i) xmid[i] = x[s][i] + attn[i];
            const Vec l2 = ln(xmid, blk.ln2_g, blk.ln2_b);
            Vec pre = mat(l2, blk.w1, &blk.b1);
            Vec act(M);
            for (std::size_t i = 0; i < M; ++i) act[i] = pre[i] > 0 ? pre[i] : 0.0;
            const Vec out = mat(act, blk.w2, &blk.b2);
            for (std::size_t i = 0; i < E; ++i) x[s][i] = xmid[i] + out[i];
        }
    }
    std::vector<Vec> logits(S, Vec(V));
    for (std::size_t s = 0; s < S; ++s) {
        const Vec y = ln(x[s], m.lnf_g, m.lnf_b);
        for (std::size_t o = 0; o < V; ++o) {
            double acc = 0;
            for (std::size_t i = 0; i < E; ++i) acc += m.head_w(o, i) * y[i];
            logits[s][o] = acc;
        }
    }
    return logits;
}

// Worst per-tensor relative difference. Tensors are compared against their
// own magnitude with a floor at 1e-6 of the full gradient scale, so tensors
// whose true gradient is pure cancellation residue (the key biases: a
// uniform key shift never moves a causal softmax row) do not amplify noise.
double grads_max_rel_diff(TransformerModel& a, TransformerModel& b) {
    auto pa = a.parameters();
    auto pb = b.parameters();
    std::vector<double> scales(pa.size(), 1e-300);
    double global = 1e-300;
    for (std::size_t t = 0; t < pa.size(); ++t) {
        for (std::size_t i = 0; i < pa[t]->size(); ++i) {
            scales[t] = std::max({scales[t], std::fabs((*pa[t])[i]), std::fabs((*pb[t])[i])});
        }
        global = std::max(global, scales[t]);
    }
    double m = 0.0;
    for (std::size_t t = 0; t < pa.size(); ++t) {
        const double denom = std::max(scales[t], global * 1e-6);
        for (std::size_t i = 0; i < pa[t]->size(); ++i) {
            m = std::max(m, std::fabs((*pa[t])[i] - (*pb[t])[i]) / denom);
        }
    }
    return m;
}

}  // namespace

TEST_CASE("parameter count: hand value and allocation consistency") {
    TransformerConfig c = tiny_config();
    // wte 88 + wpe 48 + 2 blocks x (16 + 288 + 16 + 212) + lnf 16 + head 88
    CHECK(count_parameters(c) == 88 + 48 + 2 * 532 + 16 + 88);

    TransformerModel m = make_transformer(c, 1);
    std::uint64_t allocated = 0;
    m.for_each_parameter([&](const std::string&, Tensor& t) { allocated += t.size(); });
    CHECK(allocated == count_parameters(c));
    CHECK(m.parameter_count() == allocated);
}

TEST_CASE("forward: zero weights give a uniform softmax, shapes hold") {
    TransformerConfig c = tiny_config();
    TransformerModel zeros = TransformerModel::zeros_like(c);
    const std::vector<int> toks{1, 2, 3};
    const ForwardCache cache = forward_transformer(zeros, toks);
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t i = 0; i < c.vocab_size; ++i) CHECK(cache.logits(s, i) == 0.0);
    }
    const std::vector<int> one{4};
    const ForwardCache single = forward_transformer(zeros, one);
    CHECK(single.logits.rows() == 1);
    CHECK(single.logits.cols() == c.vocab_size);

    CHECK_THROWS_AS(forward_transformer(zeros, std::vector<int>{1, 2, 3, 4, 5, 6, 7}),
                    shape_error);
    CHECK_THROWS_AS(forward_transformer(zeros, std::vector<int>{99}), std::out_of_range);
}

TEST_CASE("forward matches the straight-line oracle") {
    TransformerConfig c = tiny_config();
    TransformerModel m = make_transformer(c, 33);
    const std::vector<int> toks{1, 4, 7, 2, 9, 0};
    const ForwardCache cache = forward_transformer(m, toks);
    const auto oracle = oracle_forward(m, toks);
    for (std::size_t s = 0; s < toks.size(); ++s) {
        for (std::size_t o = 0; o < c.vocab_size; ++o) {
            CHECK(std::fabs(cache.logits(s, o) - oracle[s][o]) < 1e-10);
        }
    }
}

TEST_CASE("causality: perturbing token j changes logits only at positions >= j") {
    TransformerConfig c = tiny_config();
    TransformerModel m = make_transformer(c, 44);
    const std::vector<int> base{3, 1, 4, 1, 5, 9};
    const ForwardCache ref = forward_transformer(m, base);
    for (std::size_t j = 0; j < base.size(); ++j) {
        std::vector<int> perturbed = base;
        perturbed[j] = (base[j] + 1) % static_cast<int>(c.vocab_size);
        const ForwardCache got = forward_transformer(m, perturbed);
        for (std::size_t s = 0; s < base.size(); ++s) {
            bool identical = true;
            for (std::size_t o = 0; o < c.vocab_size; ++o) {
                identical = identical && got.logits(s, o) == ref.logits(s, o);
            }
            if (s < j) CHECK(identical);
        }
        bool changed = false;
        for (std::size_t o = 0; o < c.vocab_size; ++o) {
            changed = changed || got.logits(j, o) != ref.logits(j, o);
        }
        CHECK(changed);
    }
}

TEST_CASE("bp gradients match central finite differences") {
    TransformerConfig c = tiny_config();
    for (std::uint64_t seed : {1ULL, 2ULL}) {
        TransformerModel m = make_transformer(c, 100 + seed);
        const std::vector<int> toks{2, 7, 1, 8};
        const std::vector<int> targets{7, 1, 8, 3};
        const ForwardCache cache = forward_transformer(m, toks);
        const LmLoss loss = lm_loss(cache.logits, targets);
        TransformerModel grads =
            backward_transformer(m, cache, loss.dlogits, LmMode::bp);

        auto loss_of_model = [&](TransformerModel& model) {
            const ForwardCache fc = forward_transformer(model, toks);
            return lm_loss(fc.logits, targets).loss;
        };
        const double step = 1e-6;
        auto params = m.parameters();
        auto grad_tensors = grads.parameters();
        for (std::size_t t = 0; t < params.size(); ++t) {
            for (std::size_t i = 0; i < params[t]->size(); i += 11) {
                const double save = (*params[t])[i];
                (*params[t])[i] = save + step;
                const double up = loss_of_model(m);
                (*params[t])[i] = save - step;
                const double dn = loss_of_model(m);
                (*params[t])[i] = save;
                const double fd = (up - dn) / (2 * step);
                CHECK(std::fabs((*grad_tensors[t])[i] - fd) <=
                      1e-5 * std::max(1.0, std::fabs(fd)));
            }
        }
    }
}

TEST_CASE("shlw: only projector, final norm and last block receive gradients") {
    TransformerConfig c = tiny_config();
    c.n_blocks = 3;
    TransformerModel m = make_transformer(c, 55);
    const std::vector<int> toks{1, 2, 3, 4};
    const std::vector<int> targets{2, 3, 4, 5};
    const ForwardCache cache = forward_transformer(m, toks);
    const LmLoss loss = lm_loss(cache.logits, targets);
    TransformerModel grads = backward_transformer(m, cache, loss.dlogits, LmMode::shlw);

    auto all_zero = [](const Tensor& t) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (t[i] != 0.0) return false;
        }
        return true;
    };
    CHECK(all_zero(grads.wte));
    CHECK(all_zero(grads.wpe));
    CHECK(all_zero(grads.blocks[0].wq));
    CHECK(all_zero(grads.blocks[0].w1));
    CHECK(all_zero(grads.blocks[1].w2));
    CHECK(!all_zero(grads.blocks[2].w1));
    CHECK(!all_zero(grads.head_w));
}

TEST_CASE("block independence: feedback-mode gradients ignore later blocks") {
    TransformerConfig c = tiny_config();
    c.n_blocks = 4;
    TransformerModel m = make_transformer(c, 66);
    const FeedbackMatrixSet fb = transformer_feedback(c, 67);
    LmFeedback feedback;
    feedback.digital = &fb;
    feedback.threshold = 0.0;

    const std::vector<int> toks{5, 6, 7, 8, 9};
    const std::vector<int> targets{6, 7, 8, 9, 10};
    const ForwardCache cache = forward_transformer(m, toks);
    const LmLoss loss = lm_loss(cache.logits, targets);
    TransformerModel grads1 =
        backward_transformer(m, cache, loss.dlogits, LmMode::dfa, &feedback);

    // Randomize the parameters of blocks 1 and 2 (not the last), holding the
    // cache and the error fixed.
    TransformerModel scrambled = m;
    fill_gaussian(scrambled.blocks[1].wq.values(), 991);
    fill_gaussian(scrambled.blocks[1].w1.values(), 992);
    fill_gaussian(scrambled.blocks[2].wo.values(), 993);
    fill_gaussian(scrambled.blocks[2].w2.values(), 994);
    TransformerModel grads2 =
        backward_transformer(scrambled, cache, loss.dlogits, LmMode::dfa, &feedback);

    CHECK(grads1.blocks[0].wq.values() == grads2.blocks[0].wq.values());
    CHECK(grads1.blocks[0].w1.values() == grads2.blocks[0].w1.values());
    CHECK(grads1.blocks[0].ln1_g.values() == grads2.blocks[0].ln1_g.values());
    CHECK(grads1.wte.values() == grads2.wte.values());
}

TEST_CASE("dfa equals odfa through a noiseless oracle session on ternary e_p") {
    TransformerConfig c = tiny_config(8);  // vocab == embed so head can be identity
    c.n_blocks = 3;
    TransformerModel m = make_transformer(c, 77);
    m.head_w.fill(0.0);
    for (std::size_t i = 0; i < 8; ++i) m.head_w(i, i) = 1.0;

    OpuSession session((c.n_blocks - 1) * c.embed_dim, c.embed_dim, 78, 79);
    session.set_threshold(0.0);
    const FeedbackMatrixSet fb = transformer_feedback_from_session(session, c);
    LmFeedback digital;
    digital.digital = &fb;
    digital.threshold = 0.0;
    LmFeedback optical;
    optical.session = &session;
    optical.threshold = 0.0;

    const std::vector<int> toks{1, 2, 3, 4};
    const ForwardCache cache = forward_transformer(m, toks);
    // identical ternary rows keep the position mean ternary
    Tensor dlogits({4, 8});
    for (std::size_t s = 0; s < 4; ++s) {
        dlogits(s, 0) = 1.0;
        dlogits(s, 3) = -1.0;
        dlogits(s, 5) = 1.0;
    }
    TransformerModel g_dfa =
        backward_transformer(m, cache, dlogits, LmMode::dfa, &digital);
    TransformerModel g_odfa =
        backward_transformer(m, cache, dlogits, LmMode::odfa, &optical);
    CHECK(grads_max_rel_diff(g_dfa, g_odfa) < 1e-6);
}

TEST_CASE("odfa equals tdfa with probed bands on general errors") {
    TransformerConfig c = tiny_config();
    c.n_blocks = 3;
    TransformerModel m = make_transformer(c, 88);
    OpuSession session((c.n_blocks - 1) * c.embed_dim, c.embed_dim, 89, 90);
    session.set_threshold(0.15);
    const FeedbackMatrixSet fb = transformer_feedback_from_session(session, c);
    LmFeedback digital;
    digital.digital = &fb;
    digital.threshold = 0.15;
    LmFeedback optical;
    optical.session = &session;
    optical.threshold = 0.15;

    const std::vector<int> toks{2, 4, 6, 8, 10};
    const std::vector<int> targets{4, 6, 8, 10, 1};
    const ForwardCache cache = forward_transformer(m, toks);
    const LmLoss loss = lm_loss(cache.logits, targets);
    TransformerModel g_tdfa =
        backward_transformer(m, cache, loss.dlogits, LmMode::tdfa, &digital);
    TransformerModel g_odfa =
        backward_transformer(m, cache, loss.dlogits, LmMode::odfa, &optical);
    CHECK(grads_max_rel_diff(g_tdfa, g_odfa) < 1e-6);
}

TEST_CASE("generate: argmax repetition, zero tokens, determinism") {
    const std::string corpus = make_dialog_corpus(3000, 11);
    const CharTokenizer tok = CharTokenizer::from_corpus(corpus);
    TransformerConfig c;
    c.vocab_size = tok.vocab_size();
    c.embed_dim = 8;
    c.n_blocks = 1;
    c.n_heads = 2;
    c.mlp_hidden = 8;
    c.context_size = 6;

    {
        // Zero weights except a head bias-like row: one dominant logit.
        TransformerModel m = TransformerModel::zeros_like(c);
        const int forced = tok.encode("A")[0];
        for (std::size_t i = 0; i < c.embed_dim; ++i) {
            m.lnf_b[i] = 1.0;  // y rows become all-ones
            m.head_w(static_cast<std::size_t>(forced), i) = 1.0;
        }
        const std::string out = generate(m, tok, "JACK", 5, 0.0, 1);
        CHECK(out == "JACKAAAAA");
    }
    {
        TransformerModel m = make_transformer(c, 99);
        CHECK(generate(m, tok, "JACK: ", 0, 1.0, 5) == "JACK: ");
        const std::string a = generate(m, tok, "JACK: ", 40, 0.8, 7);
        const std::string b = generate(m, tok, "JACK: ", 40, 0.8, 7);
        CHECK(a == b);
        CHECK(a.size() > std::string("JACK: ").size());
        CHECK_THROWS_AS(generate(m, tok, "JACK\x01", 3, 1.0, 1), tokenizer_error);
    }
}

TEST_CASE("train_lm: zero epochs, loss decreases, determinism, projections") {
    const std::string corpus = make_dialog_corpus(6000, 21);
    const CharTokenizer tok = CharTokenizer::from_corpus(corpus);
    const std::vector<int> tokens = tok.encode(corpus);

    TransformerConfig c;
    c.vocab_size = tok.vocab_size();
    c.embed_dim = 16;
    c.n_blocks = 2;
    c.n_heads = 2;
    c.mlp_hidden = 24;
    c.context_size = 12;

    TrainConfig cfg;
    cfg.algorithm = TrainAlgorithm::bp;
    cfg.batch_size = 16;
    cfg.epochs = 1;
    cfg.optimizer.kind = OptimizerKind::adam;
    cfg.optimizer.learning_rate = 0.002;
    cfg.cosine_lr_decay = true;
    cfg.seed = 5;
    cfg.window_stride = 12;
    cfg.record_wall_time = false;

    {
        TransformerModel m = make_transformer(c, 1);
        const TransformerModel before = m;
        TrainConfig zero = cfg;
        zero.epochs = 0;
        const TrainingTrace trace = train_lm(m, tokens, zero);
        CHECK(trace.records.size() == 1);
        CHECK(m.wte.values() == before.wte.values());
    }
    {
        TransformerModel m = make_transformer(c, 2);
        const TrainingTrace trace = train_lm(m, tokens, cfg);
        const double first = trace.records.front().loss;
        const double last = trace.final_validation_loss();
        CHECK(last < first);
    }
    {
        TransformerModel m1 = make_transformer(c, 3);
        TransformerModel m2 = make_transformer(c, 3);
        const TrainingTrace t1 = train_lm(m1, tokens, cfg);
        const TrainingTrace t2 = train_lm(m2, tokens, cfg);
        CHECK(m1.head_w.values() == m2.head_w.values());
        REQUIRE(t1.records.size() == t2.records.size());
        for (std::size_t i = 0; i < t1.records.size(); ++i) {
            CHECK(t1.records[i].loss == t2.records[i].loss);
        }
    }
    {
        // per-sample granularity: one optical projection per window position
        TransformerModel m = make_transformer(c, 4);
        OpuSession session((c.n_blocks - 1) * c.embed_dim, c.embed_dim, 41, 42);
        TrainConfig odfa = cfg;
        odfa.algorithm = TrainAlgorithm::odfa;
        odfa.granularity = ProjectionGranularity::per_sample;
        odfa.epochs = 1;
        const TrainingTrace trace = train_lm(m, tokens, odfa, &session);
        std::size_t steps = 0;
        for (const auto& r : trace.records) steps += r.split == "train" ? 1 : 0;
        // every trained window contributes context_size projections
        std::size_t windows = 0;
        for (std::size_t p = 0; p + c.context_size < tokens.size(); p += cfg.window_stride) {
            windows += 1;
        }
        const std::size_t val = std::max<std::size_t>(1, windows / 10);
        CHECK(session.step_counter() == (windows - val) * c.context_size);
        CHECK(steps > 0);
    }
    {
        // per-batch granularity: one projection per training step
        TransformerModel m = make_transformer(c, 6);
        OpuSession session((c.n_blocks - 1) * c.embed_dim, c.embed_dim, 43, 44);
        TrainConfig odfa = cfg;
        odfa.algorithm = TrainAlgorithm::odfa;
        const TrainingTrace trace = train_lm(m, tokens, odfa, &session);
        std::size_t steps = 0;
        for (const auto& r : trace.records) steps += r.split == "train" ? 1 : 0;
        CHECK(session.step_counter() == steps);
    }
}

TEST_CASE("transformer checkpoint round trip") {
    namespace fs = std::filesystem;
    TransformerConfig c = tiny_config();
    TransformerModel m = make_transformer(c, 123);
    const std::string path = (fs::temp_directory_path() / "photondfa_tf.bin").string();
    save_transformer(path, m, {{"config_hash", "abc"}});
    auto [loaded, extra] = load_transformer(path);
    CHECK(loaded.config.embed_dim == c.embed_dim);
    CHECK(loaded.wte.values() == m.wte.values());
    CHECK(loaded.blocks[1].w2.values() == m.blocks[1].w2.values());
    CHECK(loaded.head_w.values() == m.head_w.values());
    CHECK(extra.at("config_hash").get<std::string>() == "abc");
    fs::remove(path);
}
