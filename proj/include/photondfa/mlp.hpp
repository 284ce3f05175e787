#pragma once

#include <cstdint>
#include <cstdlib>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include "photondfa/activations.hpp"
#include "photondfa/loss.hpp"
#include "photondfa/opu.hpp"
#include "photondfa/rng.hpp"
#include "photondfa/tensor.hpp"

namespace photondfa {

// PHOTON_DFA_THREADS caps internal parallelism; unset or 1 keeps everything
// on the calling thread.
inline unsigned thread_cap() {
    const char* env = std::getenv("PHOTON_DFA_THREADS");
    if (!env) return 1;
    const long v = std::strtol(env, nullptr, 10);
    return v > 1 ? static_cast<unsigned>(v) : 1u;
}

// Fully connected classifier: hidden layers share one activation, the last
// layer feeds the softmax cross-entropy head directly (no elementwise
// activation on the logits).
struct MlpModel {
    std::vector<std::size_t> dims;  // d0 .. dL
    std::vector<Tensor> weights;    // W[l]: dims[l+1] x dims[l]
    std::vector<Tensor> biases;
    ActivationKind hidden_activation = ActivationKind::tanh;

    std::size_t layer_count() const { return weights.size(); }
    std::size_t input_dim() const { return dims.front(); }
    std::size_t output_dim() const { return dims.back(); }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.push_back(&weights[l]);
            out.push_back(&biases[l]);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
        return n;
    }
};

// Fan-in scaled uniform init, U(-1/sqrt(d_in), 1/sqrt(d_in)) per layer.
inline MlpModel make_mlp(const std::vector<std::size_t>& dims, ActivationKind hidden_activation,
                         std::uint64_t seed) {
    if (dims.size() < 2) throw shape_error("make_mlp: need at least input and output dims");
    MlpModel m;
    m.dims = dims;
    m.hidden_activation = hidden_activation;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        Tensor w = Tensor::matrix(dims[l + 1], dims[l]);
        Tensor b({dims[l + 1]});
        const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
        fill_uniform(w.values(), mix_seed(seed, 0x5731, l), -bound, bound);
        fill_uniform(b.values(), mix_seed(seed, 0x5732, l), -bound, bound);
        m.weights.push_back(std::move(w));
        m.biases.push_back(std::move(b));
    }
    return m;
}

struct MlpCache {
    std::vector<Tensor> activations;     // a0 .. aL (aL are the logits)
    std::vector<Tensor> preactivations;  // h1 .. hL
};

inline MlpCache forward_mlp(const MlpModel& model, const Tensor& x) {
    if (x.rank() != 1 || x.size() != model.input_dim()) {
        throw shape_error("forward_mlp: input " + x.shape_string() + " vs d0 " +
                          std::to_string(model.input_dim()));
    }
    MlpCache cache;
    cache.activations.push_back(x);
    const std::size_t layers = model.layer_count();
    for (std::size_t l = 0; l < layers; ++l) {
        Tensor h = affine_forward(model.weights[l], cache.activations.back(), model.biases[l]);
        cache.preactivations.push_back(h);
        if (l + 1 < layers) {
            cache.activations.push_back(activate(model.hidden_activation, h));
        } else {
            cache.activations.push_back(std::move(h));
        }
    }
    return cache;
}

struct MlpGradients {
    std::vector<Tensor> weight_grads;
    std::vector<Tensor> bias_grads;
    std::vector<Tensor> delta_h;  // per layer modulated error

    static MlpGradients zeros_like(const MlpModel& m) {
        MlpGradients g;
        for (std::size_t l = 0; l < m.layer_count(); ++l) {
            g.weight_grads.push_back(Tensor::zeros(m.weights[l].shape()));
            g.bias_grads.push_back(Tensor::zeros(m.biases[l].shape()));
            g.delta_h.push_back(Tensor::zeros({m.dims[l + 1]}));
        }
        return g;
    }

    void accumulate_scaled(const MlpGradients& other, double alpha) {
        for (std::size_t l = 0; l < weight_grads.size(); ++l) {
            axpy(weight_grads[l], alpha, other.weight_grads[l]);
            axpy(bias_grads[l], alpha, other.bias_grads[l]);
        }
    }
};

inline void fill_layer_gradient(MlpGradients& g, std::size_t l, const Tensor& delta,
                                const Tensor& prev_activation) {
    g.delta_h[l] = delta;
    outer_accumulate(g.weight_grads[l], delta, prev_activation);
    axpy(g.bias_grads[l], 1.0, delta);
}

// Exact backpropagation through the chain rule.
inline MlpGradients backward_bp(const MlpModel& model, const MlpCache& cache, const Tensor& e) {
    const std::size_t layers = model.layer_count();
    MlpGradients g = MlpGradients::zeros_like(model);
    Tensor delta = e;
    for (std::size_t l = layers; l-- > 0;) {
        if (l + 1 < layers) {
            Tensor back = matvec_transposed(model.weights[l + 1], delta);
            delta = hadamard(back, activation_derivative(model.hidden_activation,
                                                         cache.preactivations[l]));
        }
        fill_layer_gradient(g, l, delta, cache.activations[l]);
    }
    return g;
}

// Fixed random feedback matrices, one row band per hidden layer, all sliced
// from a single source matrix in layer order.
struct FeedbackMatrixSet {
    std::vector<Tensor> per_layer;  // B[l]: d_{l+1} x d_L for hidden layers
    std::string provenance;         // digital_gaussian | opu_session_rows

    static std::size_t hidden_rows(const std::vector<std::size_t>& dims) {
        std::size_t rows = 0;
        for (std::size_t l = 1; l + 1 < dims.size(); ++l) rows += dims[l];
        return rows;
    }

    static FeedbackMatrixSet slice_bands(const Tensor& source,
                                         const std::vector<std::size_t>& dims,
                                         std::string provenance) {
        const std::size_t d_out = dims.back();
        if (source.rank() != 2 || source.cols() != d_out ||
            source.rows() < hidden_rows(dims)) {
            throw shape_error("feedback source " + source.shape_string() +
                              " too small for hidden dims");
        }
        FeedbackMatrixSet fb;
        fb.provenance = std::move(provenance);
        std::size_t offset = 0;
        for (std::size_t l = 1; l + 1 < dims.size(); ++l) {
            Tensor band = Tensor::matrix(dims[l], d_out);
            for (std::size_t i = 0; i < dims[l]; ++i) {
                for (std::size_t j = 0; j < d_out; ++j) band(i, j) = source(offset + i, j);
            }
            offset += dims[l];
            fb.per_layer.push_back(std::move(band));
        }
        return fb;
    }

    // Entries N(0,1), matching the digital-simulation convention.
    static FeedbackMatrixSet gaussian(const std::vector<std::size_t>& dims, std::uint64_t seed) {
        const std::size_t rows = hidden_rows(dims);
        Tensor source = Tensor::matrix(std::max<std::size_t>(rows, 1), dims.back());
        fill_gaussian(source.values(), mix_seed(seed, 0xfeedbacULL));
        return slice_bands(source, dims, "digital_gaussian");
    }

    // Effective matrix of a (noiseless) session, recovered by onehot probes.
    static FeedbackMatrixSet from_session(OpuSession& session,
                                          const std::vector<std::size_t>& dims) {
        return slice_bands(probe_effective_matrix(session), dims, "opu_session_rows");
    }
};

// Hidden layers receive B[l] e masked by g'; the last layer keeps the exact
// error. Layers are independent, so they may be filled in any order (or in
// parallel) with bit-identical results.
inline MlpGradients backward_dfa_signal(const MlpModel& model, const MlpCache& cache,
                                        const Tensor& e_last,
                                        const std::vector<Tensor>& hidden_signals) {
    const std::size_t layers = model.layer_count();
    if (hidden_signals.size() + 1 != layers) {
        throw shape_error("backward_dfa_signal: expected " + std::to_string(layers - 1) +
                          " hidden signals, got " + std::to_string(hidden_signals.size()));
    }
    MlpGradients g = MlpGradients::zeros_like(model);
    auto fill_hidden = [&](std::size_t l) {
        Tensor delta = hadamard(hidden_signals[l], activation_derivative(
                                                       model.hidden_activation,
                                                       cache.preactivations[l]));
        fill_layer_gradient(g, l, delta, cache.activations[l]);
    };
    const unsigned threads = thread_cap();
    if (threads > 1 && layers > 2) {
        std::vector<std::future<void>> tasks;
        for (std::size_t l = 0; l + 1 < layers; ++l) {
            tasks.push_back(std::async(std::launch::async, fill_hidden, l));
        }
        for (auto& t : tasks) t.get();
    } else {
        for (std::size_t l = 0; l + 1 < layers; ++l) fill_hidden(l);
    }
    fill_layer_gradient(g, layers - 1, e_last, cache.activations[layers - 1]);
    return g;
}

inline std::vector<Tensor> dfa_hidden_signals(const FeedbackMatrixSet& feedback, const Tensor& e) {
    std::vector<Tensor> signals;
    signals.reserve(feedback.per_layer.size());
    for (const Tensor& b : feedback.per_layer) signals.push_back(matvec(b, e));
    return signals;
}

inline MlpGradients backward_dfa(const MlpModel& model, const MlpCache& cache, const Tensor& e,
                                 const FeedbackMatrixSet& feedback) {
    return backward_dfa_signal(model, cache, e, dfa_hidden_signals(feedback, e));
}

// DFA on the ternarized error: hidden signals use e+ - e- (direction-only
// by default; rescale restores the normalization factor), the last layer
// keeps the exact error.
inline MlpGradients backward_tdfa(const MlpModel& model, const MlpCache& cache, const Tensor& e,
                                  const FeedbackMatrixSet& feedback, double threshold,
                                  bool rescale = false) {
    const TernaryCode code = ternarize(e, threshold);
    const double factor = rescale ? code.scale : 1.0;
    Tensor ternary({e.size()});
    for (std::size_t i = 0; i < e.size(); ++i) {
        ternary[i] = (code.e_plus[i] - code.e_minus[i]) * factor;
    }
    return backward_dfa_signal(model, cache, e, dfa_hidden_signals(feedback, ternary));
}

inline std::vector<Tensor> split_bands(const Tensor& s, const std::vector<std::size_t>& dims) {
    std::vector<Tensor> bands;
    std::size_t offset = 0;
    for (std::size_t l = 1; l + 1 < dims.size(); ++l) {
        Tensor band({dims[l]});
        for (std::size_t i = 0; i < dims[l]; ++i) band[i] = s[offset + i];
        offset += dims[l];
        bands.push_back(std::move(band));
    }
    return bands;
}

// One optical projection of the error feeds every hidden layer through
// disjoint row bands of the returned speckle vector.
inline MlpGradients backward_odfa(const MlpModel& model, const MlpCache& cache, const Tensor& e,
                                  OpuSession& session) {
    if (session.rows() < FeedbackMatrixSet::hidden_rows(model.dims) ||
        session.cols() != model.output_dim()) {
        throw shape_error("backward_odfa: session " + std::to_string(session.rows()) + "x" +
                          std::to_string(session.cols()) + " too small for dims");
    }
    const Tensor s = session.project_feedback(e);
    return backward_dfa_signal(model, cache, e, split_bands(s, model.dims));
}

// Cosine between the DFA and BP modulated errors per hidden layer;
// degenerate (zero) vectors are reported as absent.
inline std::vector<std::optional<double>> alignment_probe(const MlpModel& model,
                                                          const MlpCache& cache, const Tensor& e,
                                                          const FeedbackMatrixSet& feedback) {
    const MlpGradients bp = backward_bp(model, cache, e);
    const MlpGradients dfa = backward_dfa(model, cache, e, feedback);
    std::vector<std::optional<double>> out;
    for (std::size_t l = 0; l + 1 < model.layer_count(); ++l) {
        if (norm(bp.delta_h[l]) == 0.0 || norm(dfa.delta_h[l]) == 0.0) {
            out.push_back(std::nullopt);
        } else {
            out.push_back(cosine_similarity(dfa.delta_h[l], bp.delta_h[l]));
        }
    }
    return out;
}

}  // namespace photondfa
