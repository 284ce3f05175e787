#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "photondfa/checkpoint.hpp"
#include "photondfa/loss.hpp"
#include "photondfa/mlp.hpp"
#include "photondfa/opu.hpp"
#include "photondfa/rng.hpp"
#include "photondfa/tensor.hpp"
#include "photondfa/tokenizer.hpp"

namespace photondfa {

struct TransformerConfig {
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 64;
    std::size_t n_blocks = 4;
    std::size_t n_heads = 4;
    std::size_t mlp_hidden = 96;
    std::size_t context_size = 24;

    std::size_t head_dim() const { return embed_dim / n_heads; }

    void validate() const {
        if (vocab_size == 0) throw shape_error("transformer: vocab_size must be positive");
        if (n_heads == 0 || embed_dim % n_heads != 0) {
            throw shape_error("transformer: embed_dim " + std::to_string(embed_dim) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        }
        if (context_size == 0 || n_blocks == 0 || mlp_hidden == 0) {
            throw shape_error("transformer: zero-sized configuration");
        }
    }
};

// Single enumeration of every trainable tensor; allocation, checkpointing
// and the no-allocation parameter counter all derive from it so they can
// never disagree.
template <typename Fn>
inline void for_each_parameter_shape(const TransformerConfig& c, Fn&& fn) {
    const std::size_t v = c.vocab_size, e = c.embed_dim, h = c.mlp_hidden;
    fn("wte", std::vector<std::size_t>{v, e});
    fn("wpe", std::vector<std::size_t>{c.context_size, e});
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        fn(p + "ln1.g", std::vector<std::size_t>{e});
        fn(p + "ln1.b", std::vector<std::size_t>{e});
        fn(p + "attn.wq", std::vector<std::size_t>{e, e});
        fn(p + "attn.bq", std::vector<std::size_t>{e});
        fn(p + "attn.wk", std::vector<std::size_t>{e, e});
        fn(p + "attn.bk", std::vector<std::size_t>{e});
        fn(p + "attn.wv", std::vector<std::size_t>{e, e});
        fn(p + "attn.bv", std::vector<std::size_t>{e});
        fn(p + "attn.wo", std::vector<std::size_t>{e, e});
        fn(p + "attn.bo", std::vector<std::size_t>{e});
        fn(p + "ln2.g", std::vector<std::size_t>{e});
        fn(p + "ln2.b", std::vector<std::size_t>{e});
        fn(p + "mlp.w1", std::vector<std::size_t>{h, e});
        fn(p + "mlp.b1", std::vector<std::size_t>{h});
        fn(p + "mlp.w2", std::vector<std::size_t>{e, h});
        fn(p + "mlp.b2", std::vector<std::size_t>{e});
    }
    fn("lnf.g", std::vector<std::size_t>{e});
    fn("lnf.b", std::vector<std::size_t>{e});
    fn("head.w", std::vector<std::size_t>{v, e});
}

inline std::uint64_t count_parameters(const TransformerConfig& config) {
    config.validate();
    std::uint64_t total = 0;
    for_each_parameter_shape(config, [&](const std::string&, const std::vector<std::size_t>& s) {
        std::uint64_t n = 1;
        for (std::size_t d : s) n *= d;
        total += n;
    });
    return total;
}

struct DecoderBlock {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

struct TransformerModel {
    TransformerConfig config;
    Tensor wte, wpe;
    std::vector<DecoderBlock> blocks;
    Tensor lnf_g, lnf_b;
    Tensor head_w;

    template <typename Fn>
    void for_each_parameter(Fn&& fn) {
        fn("wte", wte);
        fn("wpe", wpe);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const std::string p = "block" + std::to_string(b) + ".";
            DecoderBlock& blk = blocks[b];
            fn(p + "ln1.g", blk.ln1_g);
            fn(p + "ln1.b", blk.ln1_b);
            fn(p + "attn.wq", blk.wq);
            fn(p + "attn.bq", blk.bq);
            fn(p + "attn.wk", blk.wk);
            fn(p + "attn.bk", blk.bk);
            fn(p + "attn.wv", blk.wv);
            fn(p + "attn.bv", blk.bv);
            fn(p + "attn.wo", blk.wo);
            fn(p + "attn.bo", blk.bo);
            fn(p + "ln2.g", blk.ln2_g);
            fn(p + "ln2.b", blk.ln2_b);
            fn(p + "mlp.w1", blk.w1);
            fn(p + "mlp.b1", blk.b1);
            fn(p + "mlp.w2", blk.w2);
            fn(p + "mlp.b2", blk.b2);
        }
        fn("lnf.g", lnf_g);
        fn("lnf.b", lnf_b);
        fn("head.w", head_w);
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for_each_parameter([&](const std::string&, Tensor& t) { out.push_back(&t); });
        return out;
    }

    std::uint64_t parameter_count() const { return count_parameters(config); }

    static TransformerModel zeros_like(const TransformerConfig& config) {
        TransformerModel m;
        m.config = config;
        std::vector<Tensor> tensors;
        for_each_parameter_shape(config,
                                 [&](const std::string&, const std::vector<std::size_t>& s) {
                                     tensors.push_back(Tensor(s));
                                 });
        std::size_t i = 0;
        m.wte = std::move(tensors[i++]);
        m.wpe = std::move(tensors[i++]);
        m.blocks.resize(config.n_blocks);
        for (auto& blk : m.blocks) {
            blk.ln1_g = std::move(tensors[i++]);
            blk.ln1_b = std::move(tensors[i++]);
            blk.wq = std::move(tensors[i++]);
            blk.bq = std::move(tensors[i++]);
            blk.wk = std::move(tensors[i++]);
            blk.bk = std::move(tensors[i++]);
            blk.wv = std::move(tensors[i++]);
            blk.bv = std::move(tensors[i++]);
            blk.wo = std::move(tensors[i++]);
            blk.bo = std::move(tensors[i++]);
            blk.ln2_g = std::move(tensors[i++]);
            blk.ln2_b = std::move(tensors[i++]);
            blk.w1 = std::move(tensors[i++]);
            blk.b1 = std::move(tensors[i++]);
            blk.w2 = std::move(tensors[i++]);
            blk.b2 = std::move(tensors[i++]);
        }
        m.lnf_g = std::move(tensors[i++]);
        m.lnf_b = std::move(tensors[i++]);
        m.head_w = std::move(tensors[i++]);
        return m;
    }
};

// Fan-in scaled uniform init for projections; layer norms start at identity.
inline TransformerModel make_transformer(const TransformerConfig& config, std::uint64_t seed) {
    config.validate();
    TransformerModel m = TransformerModel::zeros_like(config);
    std::uint64_t idx = 0;
    m.for_each_parameter([&](const std::string& name, Tensor& t) {
        idx += 1;
        if (name.find("ln") != std::string::npos) {
            const bool gain = name.back() == 'g';
            t.fill(gain ? 1.0 : 0.0);
            return;
        }
        const std::size_t fan_in = t.rank() == 2 ? t.cols() : config.embed_dim;
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        fill_uniform(t.values(), mix_seed(seed, 0x7f0000ULL + idx), -bound, bound);
    });
    return m;
}

namespace detail {

constexpr double kLnEps = 1e-5;

// Y[s,:] = X[s,:] W^T (+ bias); W is out x in, accumulation left to right.
inline Tensor rows_affine(const Tensor& x, const Tensor& w, const Tensor* bias) {
    const std::size_t s_len = x.rows(), in = x.cols(), out = w.rows();
    if (w.cols() != in) {
        throw shape_error("rows_affine: X " + x.shape_string() + " vs W " + w.shape_string());
    }
    Tensor y({s_len, out});
    for (std::size_t s = 0; s < s_len; ++s) {
        const double* xr = x.data() + s * in;
        double* yr = y.data() + s * out;
        for (std::size_t o = 0; o < out; ++o) {
            const double* wr = w.data() + o * in;
            double acc = 0.0;
            for (std::size_t j = 0; j < in; ++j) acc += wr[j] * xr[j];
            yr[o] = bias ? acc + (*bias)[o] : acc;
        }
    }
    return y;
}

// dX[s,:] = dY[s,:] W; also accumulates dW += dY[s]^T x[s] and db += dY[s].
inline Tensor rows_affine_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dw,
                                   Tensor* db) {
    const std::size_t s_len = x.rows(), in = x.cols(), out = w.rows();
    Tensor dx({s_len, in});
    for (std::size_t s = 0; s < s_len; ++s) {
        const double* xr = x.data() + s * in;
        const double* dyr = dy.data() + s * out;
        double* dxr = dx.data() + s * in;
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dyr[o];
            const double* wr = w.data() + o * in;
            double* dwr = dw.data() + o * in;
            for (std::size_t j = 0; j < in; ++j) {
                dwr[j] += g * xr[j];
                dxr[j] += g * wr[j];
            }
            if (db) (*db)[o] += g;
        }
    }
    return dx;
}

struct LnCache {
    Tensor mean;  // per position
    Tensor rstd;  // per position
};

inline Tensor layer_norm_forward(const Tensor& x, const Tensor& gain, const Tensor& bias,
                                 LnCache& cache) {
    const std::size_t s_len = x.rows(), e = x.cols();
    cache.mean = Tensor({s_len});
    cache.rstd = Tensor({s_len});
    Tensor y({s_len, e});
    for (std::size_t s = 0; s < s_len; ++s) {
        const double* xr = x.data() + s * e;
        double mu = 0.0;
        for (std::size_t i = 0; i < e; ++i) mu += xr[i];
        mu /= static_cast<double>(e);
        double var = 0.0;
        for (std::size_t i = 0; i < e; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(e);
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        cache.mean[s] = mu;
        cache.rstd[s] = rstd;
        double* yr = y.data() + s * e;
        for (std::size_t i = 0; i < e; ++i) yr[i] = gain[i] * (xr[i] - mu) * rstd + bias[i];
    }
    return y;
}

inline Tensor layer_norm_backward(const Tensor& x, const Tensor& gain, const LnCache& cache,
                                  const Tensor& dy, Tensor& dgain, Tensor& dbias) {
    const std::size_t s_len = x.rows(), e = x.cols();
    Tensor dx({s_len, e});
    for (std::size_t s = 0; s < s_len; ++s) {
        const double* xr = x.data() + s * e;
        const double* dyr = dy.data() + s * e;
        double* dxr = dx.data() + s * e;
        const double mu = cache.mean[s], rstd = cache.rstd[s];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < e; ++i) {
            const double xhat = (xr[i] - mu) * rstd;
            const double dxhat = dyr[i] * gain[i];
            dgain[i] += dyr[i] * xhat;
            dbias[i] += dyr[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        const double inv_e = 1.0 / static_cast<double>(e);
        for (std::size_t i = 0; i < e; ++i) {
            const double xhat = (xr[i] - mu) * rstd;
            const double dxhat = dyr[i] * gain[i];
            dxr[i] = rstd * (dxhat - inv_e * sum_dxhat - xhat * inv_e * sum_dxhat_xhat);
        }
    }
    return dx;
}

}  // namespace detail

struct BlockCache {
    Tensor x_in;
    detail::LnCache ln1;
    Tensor ln1_out;
    Tensor q, k, v;
    std::vector<Tensor> att;  // per head, S x S causal softmax weights
    Tensor att_mix;
    Tensor attn_out;
    Tensor x_mid;
    detail::LnCache ln2;
    Tensor ln2_out;
    Tensor mlp_pre;
    Tensor mlp_act;
    Tensor mlp_out;
    Tensor x_out;
};

struct ForwardCache {
    std::vector<int> tokens;
    Tensor x0;
    std::vector<BlockCache> blocks;
    detail::LnCache lnf;
    Tensor y;       // final layer norm output: the projector input
    Tensor logits;  // S x V
};

// Causal multi-head attention + MLP with pre-block layer norm and forward
// residuals; ReLU in the forward pass.
inline ForwardCache forward_transformer(const TransformerModel& model,
                                        std::span<const int> tokens) {
    const TransformerConfig& c = model.config;
    c.validate();
    if (tokens.empty()) throw shape_error("forward_transformer: empty token window");
    if (tokens.size() > c.context_size) {
        throw shape_error("forward_transformer: window of " + std::to_string(tokens.size()) +
                          " tokens exceeds context size " + std::to_string(c.context_size));
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
            throw std::out_of_range("forward_transformer: token id " + std::to_string(t) +
                                    " outside vocabulary of " + std::to_string(c.vocab_size));
        }
    }
    const std::size_t s_len = tokens.size(), e = c.embed_dim, hd = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    ForwardCache cache;
    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.x0 = Tensor({s_len, e});
    for (std::size_t s = 0; s < s_len; ++s) {
        const std::size_t tok = static_cast<std::size_t>(tokens[s]);
        for (std::size_t i = 0; i < e; ++i) {
            cache.x0(s, i) = model.wte(tok, i) + model.wpe(s, i);
        }
    }

    Tensor x = cache.x0;
    cache.blocks.resize(c.n_blocks);
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
        const DecoderBlock& blk = model.blocks[b];
        BlockCache& bc = cache.blocks[b];
        bc.x_in = x;
        bc.ln1_out = detail::layer_norm_forward(bc.x_in, blk.ln1_g, blk.ln1_b, bc.ln1);
        bc.q = detail::rows_affine(bc.ln1_out, blk.wq, &blk.bq);
        bc.k = detail::rows_affine(bc.ln1_out, blk.wk, &blk.bk);
        bc.v = detail::rows_affine(bc.ln1_out, blk.wv, &blk.bv);

        bc.att.assign(c.n_heads, Tensor({s_len, s_len}));
        bc.att_mix = Tensor({s_len, e});
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const std::size_t off = h * hd;
            Tensor& att = bc.att[h];
            for (std::size_t i = 0; i < s_len; ++i) {
                double row_max = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    double dot_qk = 0.0;
                    for (std::size_t d = 0; d < hd; ++d) {
                        dot_qk += bc.q(i, off + d) * bc.k(j, off + d);
                    }
                    att(i, j) = dot_qk * scale;
                    row_max = std::max(row_max, att(i, j));
                }
                double denom = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    att(i, j) = std::exp(att(i, j) - row_max);
                    denom += att(i, j);
                }
                for (std::size_t j = 0; j <= i; ++j) att(i, j) /= denom;
                for (std::size_t d = 0; d < hd; ++d) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) acc += att(i, j) * bc.v(j, off + d);
                    bc.att_mix(i, off + d) = acc;
                }
            }
        }
        bc.attn_out = detail::rows_affine(bc.att_mix, blk.wo, &blk.bo);

        bc.x_mid = Tensor({s_len, e});
        for (std::size_t i = 0; i < bc.x_mid.size(); ++i) {
            bc.x_mid[i] = bc.x_in[i] + bc.attn_out[i];
        }
        bc.ln2_out = detail::layer_norm_forward(bc.x_mid, blk.ln2_g, blk.ln2_b, bc.ln2);
        bc.mlp_pre = detail::rows_affine(bc.ln2_out, blk.w1, &blk.b1);
        bc.mlp_act = bc.mlp_pre;
        for (std::size_t i = 0; i < bc.mlp_act.size(); ++i) {
            bc.mlp_act[i] = bc.mlp_act[i] > 0.0 ? bc.mlp_act[i] : 0.0;  // forward ReLU
        }
        bc.mlp_out = detail::rows_affine(bc.mlp_act, blk.w2, &blk.b2);
        bc.x_out = Tensor({s_len, e});
        for (std::size_t i = 0; i < bc.x_out.size(); ++i) {
            bc.x_out[i] = bc.x_mid[i] + bc.mlp_out[i];
        }
        x = bc.x_out;
    }

    cache.y = detail::layer_norm_forward(x, model.lnf_g, model.lnf_b, cache.lnf);
    cache.logits = detail::rows_affine(cache.y, model.head_w, nullptr);
    return cache;
}

enum class LmMode { bp, dfa, tdfa, odfa, shlw };

inline const char* to_string(LmMode m) {
    switch (m) {
        case LmMode::bp: return "bp";
        case LmMode::dfa: return "dfa";
        case LmMode::tdfa: return "tdfa";
        case LmMode::odfa: return "odfa";
        case LmMode::shlw: return "shlw";
    }
    return "?";
}

struct LmLoss {
    double loss = 0.0;
    Tensor dlogits;  // S x V, scaled by 1/S so the loss is the position mean
};

inline LmLoss lm_loss(const Tensor& logits, std::span<const int> targets) {
    const std::size_t s_len = logits.rows(), v = logits.cols();
    if (targets.size() != s_len) {
        throw shape_error("lm_loss: " + std::to_string(targets.size()) + " targets for " +
                          std::to_string(s_len) + " positions");
    }
    LmLoss out;
    out.dlogits = Tensor({s_len, v});
    const double inv_s = 1.0 / static_cast<double>(s_len);
    for (std::size_t s = 0; s < s_len; ++s) {
        Tensor row({v});
        for (std::size_t i = 0; i < v; ++i) row[i] = logits(s, i);
        const auto sce = softmax_cross_entropy(row, static_cast<std::size_t>(targets[s]));
        out.loss += sce.loss * inv_s;
        for (std::size_t i = 0; i < v; ++i) out.dlogits(s, i) = sce.error[i] * inv_s;
    }
    return out;
}

namespace detail {

struct BlockBackwardOptions {
    bool residual_backward = true;  // skip connections carry signal (exact BP)
    bool tanh_derivative = false;   // substitute tanh' for relu' (feedback path)
};

// Internal chain rule through one block. Attention math is always exact;
// the options control the residual junctions and the MLP activation
// derivative, which is where the feedback path differs.
inline Tensor block_backward(const DecoderBlock& blk, const BlockCache& bc, const Tensor& dx_out,
                             const BlockBackwardOptions& opts, DecoderBlock& g,
                             std::size_t n_heads) {
    const std::size_t s_len = bc.x_in.rows(), e = bc.x_in.cols();
    const std::size_t hd = e / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    // MLP branch
    Tensor d_act =
        rows_affine_backward(bc.mlp_act, blk.w2, dx_out, g.w2, &g.b2);
    Tensor d_pre({s_len, bc.mlp_pre.cols()});
    for (std::size_t i = 0; i < d_pre.size(); ++i) {
        double deriv;
        if (opts.tanh_derivative) {
            const double t = std::tanh(bc.mlp_pre[i]);
            deriv = 1.0 - t * t;
        } else {
            deriv = bc.mlp_pre[i] > 0.0 ? 1.0 : 0.0;
        }
        d_pre[i] = d_act[i] * deriv;
    }
    Tensor d_ln2_out = rows_affine_backward(bc.ln2_out, blk.w1, d_pre, g.w1, &g.b1);
    Tensor dx_mid = layer_norm_backward(bc.x_mid, blk.ln2_g, bc.ln2, d_ln2_out, g.ln2_g, g.ln2_b);
    if (opts.residual_backward) {
        for (std::size_t i = 0; i < dx_mid.size(); ++i) dx_mid[i] += dx_out[i];
    }

    // Attention branch
    Tensor d_att_mix = rows_affine_backward(bc.att_mix, blk.wo, dx_mid, g.wo, &g.bo);
    Tensor dq({s_len, e}), dk({s_len, e}), dv({s_len, e});
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        const Tensor& att = bc.att[h];
        for (std::size_t i = 0; i < s_len; ++i) {
            // d(att weights) for row i, then softmax backward
            std::vector<double> datt(i + 1, 0.0);
            double row_dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                double acc = 0.0;
                for (std::size_t d = 0; d < hd; ++d) {
                    acc += d_att_mix(i, off + d) * bc.v(j, off + d);
                }
                datt[j] = acc;
                row_dot += att(i, j) * acc;
            }
            for (std::size_t j = 0; j <= i; ++j) {
                const double dscore = att(i, j) * (datt[j] - row_dot);
                for (std::size_t d = 0; d < hd; ++d) {
                    dq(i, off + d) += dscore * bc.k(j, off + d) * scale;
                    dk(j, off + d) += dscore * bc.q(i, off + d) * scale;
                }
            }
            for (std::size_t j = 0; j <= i; ++j) {
                for (std::size_t d = 0; d < hd; ++d) {
                    dv(j, off + d) += att(i, j) * d_att_mix(i, off + d);
                }
            }
        }
    }
    Tensor d_ln1_out = rows_affine_backward(bc.ln1_out, blk.wq, dq, g.wq, &g.bq);
    {
        Tensor d_from_k = rows_affine_backward(bc.ln1_out, blk.wk, dk, g.wk, &g.bk);
        Tensor d_from_v = rows_affine_backward(bc.ln1_out, blk.wv, dv, g.wv, &g.bv);
        for (std::size_t i = 0; i < d_ln1_out.size(); ++i) {
            d_ln1_out[i] += d_from_k[i] + d_from_v[i];
        }
    }
    Tensor dx_in = layer_norm_backward(bc.x_in, blk.ln1_g, bc.ln1, d_ln1_out, g.ln1_g, g.ln1_b);
    if (opts.residual_backward) {
        for (std::size_t i = 0; i < dx_in.size(); ++i) dx_in[i] += dx_mid[i];
    }
    return dx_in;
}

inline void embedding_backward(const ForwardCache& cache, const Tensor& dx0,
                               TransformerModel& grads) {
    const std::size_t s_len = dx0.rows(), e = dx0.cols();
    for (std::size_t s = 0; s < s_len; ++s) {
        const std::size_t tok = static_cast<std::size_t>(cache.tokens[s]);
        for (std::size_t i = 0; i < e; ++i) {
            grads.wte(tok, i) += dx0(s, i);
            grads.wpe(s, i) += dx0(s, i);
        }
    }
}

}  // namespace detail

// Source of the per-block feedback signals: either digital random bands or
// an optical session. Bands are indexed by block (0 .. n_blocks-2), each of
// embed_dim rows, in block order.
struct LmFeedback {
    const FeedbackMatrixSet* digital = nullptr;
    OpuSession* session = nullptr;
    double threshold = 0.0;
    bool rescale = false;

    // Projects the error vector and returns one signal row band per
    // feedback-trained block.
    std::vector<Tensor> project(const Tensor& e_p, LmMode mode, std::size_t n_bands,
                                std::size_t embed_dim) const {
        std::vector<Tensor> bands;
        if (mode == LmMode::odfa) {
            if (!session) throw std::invalid_argument("odfa mode requires an OpuSession");
            const Tensor s = session->project_feedback(e_p);
            if (s.size() < n_bands * embed_dim) {
                throw shape_error("session speckle too small for per-block bands");
            }
            for (std::size_t b = 0; b < n_bands; ++b) {
                Tensor band({embed_dim});
                for (std::size_t i = 0; i < embed_dim; ++i) band[i] = s[b * embed_dim + i];
                bands.push_back(std::move(band));
            }
            return bands;
        }
        if (!digital || digital->per_layer.size() < n_bands) {
            throw std::invalid_argument("dfa/tdfa mode requires digital feedback bands");
        }
        Tensor v = e_p;
        if (mode == LmMode::tdfa) {
            const TernaryCode code = ternarize(e_p, threshold);
            const double factor = rescale ? code.scale : 1.0;
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] = (code.e_plus[i] - code.e_minus[i]) * factor;
            }
        }
        for (std::size_t b = 0; b < n_bands; ++b) {
            bands.push_back(matvec(digital->per_layer[b], v));
        }
        return bands;
    }
};

// Loss gradient at the projector input (e_p), one row per position; computed
// without touching any parameter gradients.
inline Tensor projector_input_gradient(const TransformerModel& model, const ForwardCache& cache,
                                       const Tensor& dlogits) {
    const std::size_t s_len = cache.y.rows(), e = model.config.embed_dim;
    const std::size_t v = model.config.vocab_size;
    Tensor e_p({s_len, e});
    for (std::size_t s = 0; s < s_len; ++s) {
        for (std::size_t o = 0; o < v; ++o) {
            const double g = dlogits(s, o);
            if (g == 0.0) continue;
            const double* wr = model.head_w.data() + o * e;
            for (std::size_t i = 0; i < e; ++i) e_p(s, i) += g * wr[i];
        }
    }
    return e_p;
}

// Per-block training signals of the paper's strategy: projector and last
// block run exact backpropagation; all other blocks receive a random
// projection of e_p (the loss gradient at the projector input) at their
// output and backpropagate it internally with tanh' and dropped residuals;
// embeddings take whatever flows out of block 1. A caller that already
// projected a batch-mean error passes the bands in shared_bands.
inline TransformerModel backward_transformer(const TransformerModel& model,
                                             const ForwardCache& cache, const Tensor& dlogits,
                                             LmMode mode, const LmFeedback* feedback = nullptr,
                                             bool per_position_feedback = false,
                                             const std::vector<Tensor>* shared_bands = nullptr) {
    const TransformerConfig& c = model.config;
    TransformerModel grads = TransformerModel::zeros_like(c);
    const std::size_t s_len = cache.y.rows(), e = c.embed_dim;

    // Projector backward: e_p is the gradient at its input.
    Tensor e_p = detail::rows_affine_backward(cache.y, model.head_w, dlogits, grads.head_w,
                                              nullptr);  // S x E

    // Final layer norm is part of the exactly-trained head side.
    Tensor dx_last = detail::layer_norm_backward(cache.blocks.back().x_out, model.lnf_g, cache.lnf,
                                                 e_p, grads.lnf_g, grads.lnf_b);

    const detail::BlockBackwardOptions exact{true, false};
    const detail::BlockBackwardOptions feedback_opts{false, true};
    const std::size_t last = c.n_blocks - 1;

    if (mode == LmMode::bp) {
        Tensor d = dx_last;
        for (std::size_t b = c.n_blocks; b-- > 0;) {
            d = detail::block_backward(model.blocks[b], cache.blocks[b], d, exact, grads.blocks[b],
                                       c.n_heads);
        }
        detail::embedding_backward(cache, d, grads);
        return grads;
    }

    if (mode == LmMode::shlw) {
        detail::block_backward(model.blocks[last], cache.blocks[last], dx_last, exact,
                               grads.blocks[last], c.n_heads);
        return grads;  // everything else stays zero
    }

    // dfa / tdfa / odfa
    if (!feedback && !shared_bands) {
        throw std::invalid_argument("feedback modes require an LmFeedback source");
    }
    detail::block_backward(model.blocks[last], cache.blocks[last], dx_last, exact,
                           grads.blocks[last], c.n_heads);
    if (c.n_blocks == 1) {
        return grads;  // no feedback-trained blocks; embeddings get no signal path
    }
    const std::size_t n_bands = c.n_blocks - 1;

    Tensor dx0_accum({s_len, e});
    if (shared_bands) {
        if (shared_bands->size() != n_bands) {
            throw shape_error("shared feedback bands do not match the block count");
        }
        for (std::size_t b = 0; b < n_bands; ++b) {
            Tensor dx_out({s_len, e});
            for (std::size_t s = 0; s < s_len; ++s) {
                for (std::size_t i = 0; i < e; ++i) dx_out(s, i) = (*shared_bands)[b][i];
            }
            Tensor dx_in = detail::block_backward(model.blocks[b], cache.blocks[b], dx_out,
                                                  feedback_opts, grads.blocks[b], c.n_heads);
            if (b == 0) dx0_accum = std::move(dx_in);
        }
    } else if (per_position_feedback) {
        // One projection per position; block k sees its own band per row.
        std::vector<Tensor> dx_out(n_bands, Tensor({s_len, e}));
        for (std::size_t s = 0; s < s_len; ++s) {
            Tensor ep_row({e});
            for (std::size_t i = 0; i < e; ++i) ep_row[i] = e_p(s, i);
            const auto bands = feedback->project(ep_row, mode, n_bands, e);
            for (std::size_t b = 0; b < n_bands; ++b) {
                for (std::size_t i = 0; i < e; ++i) dx_out[b](s, i) = bands[b][i];
            }
        }
        for (std::size_t b = 0; b < n_bands; ++b) {
            Tensor dx_in = detail::block_backward(model.blocks[b], cache.blocks[b], dx_out[b],
                                                  feedback_opts, grads.blocks[b], c.n_heads);
            if (b == 0) dx0_accum = std::move(dx_in);
        }
    } else {
        // One projection of the position-mean error per window.
        Tensor ep_mean({e});
        const double inv_s = 1.0 / static_cast<double>(s_len);
        for (std::size_t s = 0; s < s_len; ++s) {
            for (std::size_t i = 0; i < e; ++i) ep_mean[i] += e_p(s, i) * inv_s;
        }
        const auto bands = feedback->project(ep_mean, mode, n_bands, e);
        for (std::size_t b = 0; b < n_bands; ++b) {
            Tensor dx_out({s_len, e});
            for (std::size_t s = 0; s < s_len; ++s) {
                for (std::size_t i = 0; i < e; ++i) dx_out(s, i) = bands[b][i];
            }
            Tensor dx_in = detail::block_backward(model.blocks[b], cache.blocks[b], dx_out,
                                                  feedback_opts, grads.blocks[b], c.n_heads);
            if (b == 0) dx0_accum = std::move(dx_in);
        }
    }
    detail::embedding_backward(cache, dx0_accum, grads);
    return grads;
}

inline void accumulate_gradients(TransformerModel& into, TransformerModel& from, double alpha) {
    auto into_params = into.parameters();
    auto from_params = from.parameters();
    for (std::size_t i = 0; i < into_params.size(); ++i) {
        axpy(*into_params[i], alpha, *from_params[i]);
    }
}

// Deterministic autoregressive sampling; temperature 0 is argmax.
inline std::string generate(const TransformerModel& model, const CharTokenizer& tokenizer,
                            const std::string& prompt, std::size_t n_tokens, double temperature,
                            std::uint64_t seed) {
    std::vector<int> tokens = tokenizer.encode(prompt);
    if (tokens.empty()) throw tokenizer_error("generate: empty prompt");
    auto engine = make_engine(mix_seed(seed, 0x9e4eULL));
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (std::size_t step = 0; step < n_tokens; ++step) {
        const std::size_t start =
            tokens.size() > model.config.context_size ? tokens.size() - model.config.context_size
                                                      : 0;
        std::span<const int> window(tokens.data() + start, tokens.size() - start);
        const ForwardCache cache = forward_transformer(model, window);
        const std::size_t lastpos = window.size() - 1;
        Tensor logits({model.config.vocab_size});
        for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = cache.logits(lastpos, i);
        std::size_t next = 0;
        if (temperature <= 0.0) {
            for (std::size_t i = 1; i < logits.size(); ++i) {
                if (logits[i] > logits[next]) next = i;
            }
        } else {
            const Tensor p = softmax(logits, temperature);
            const double u = uniform(engine);
            double cdf = 0.0;
            next = p.size() - 1;
            for (std::size_t i = 0; i < p.size(); ++i) {
                cdf += p[i];
                if (u < cdf) {
                    next = i;
                    break;
                }
            }
        }
        tokens.push_back(static_cast<int>(next));
    }
    return tokenizer.decode(tokens);
}

inline void save_transformer(const std::string& path, TransformerModel& model,
                             const nlohmann::json& extra = nlohmann::json::object(),
                             bool float32_storage = false) {
    Checkpoint ckpt;
    model.for_each_parameter(
        [&](const std::string& name, Tensor& t) { ckpt.tensors.push_back({name, t}); });
    nlohmann::json meta;
    meta["kind"] = "transformer";
    meta["config"] = {{"vocab_size", model.config.vocab_size},
                      {"embed_dim", model.config.embed_dim},
                      {"n_blocks", model.config.n_blocks},
                      {"n_heads", model.config.n_heads},
                      {"mlp_hidden", model.config.mlp_hidden},
                      {"context_size", model.config.context_size}};
    meta["extra"] = extra;
    ckpt.metadata = meta;
    save_checkpoint(path, ckpt, float32_storage);
}

inline std::pair<TransformerModel, nlohmann::json> load_transformer(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.metadata.value("kind", "") != "transformer") {
        throw checkpoint_error("not a transformer checkpoint: " + path);
    }
    const auto& jc = ckpt.metadata.at("config");
    TransformerConfig config;
    config.vocab_size = jc.at("vocab_size").get<std::size_t>();
    config.embed_dim = jc.at("embed_dim").get<std::size_t>();
    config.n_blocks = jc.at("n_blocks").get<std::size_t>();
    config.n_heads = jc.at("n_heads").get<std::size_t>();
    config.mlp_hidden = jc.at("mlp_hidden").get<std::size_t>();
    config.context_size = jc.at("context_size").get<std::size_t>();
    TransformerModel model = TransformerModel::zeros_like(config);
    model.for_each_parameter(
        [&](const std::string& name, Tensor& t) { t = ckpt.require(name); });
    return {std::move(model), ckpt.metadata.value("extra", nlohmann::json::object())};
}

}  // namespace photondfa
