#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <vector>

#include "photondfa/train.hpp"
#include "photondfa/transformer.hpp"

namespace photondfa {

namespace detail {

inline LmMode lm_mode(TrainAlgorithm a) {
    switch (a) {
        case TrainAlgorithm::bp: return LmMode::bp;
        case TrainAlgorithm::dfa: return LmMode::dfa;
        case TrainAlgorithm::tdfa: return LmMode::tdfa;
        case TrainAlgorithm::odfa: return LmMode::odfa;
        case TrainAlgorithm::shlw: return LmMode::shlw;
    }
    return LmMode::bp;
}

}  // namespace detail

// Feedback bands for a transformer: n_blocks-1 bands of embed_dim rows each,
// sliced from one source matrix in block order.
inline FeedbackMatrixSet transformer_feedback(const TransformerConfig& config,
                                              std::uint64_t seed) {
    std::vector<std::size_t> dims(config.n_blocks + 1, config.embed_dim);
    return FeedbackMatrixSet::gaussian(dims, seed);
}

inline FeedbackMatrixSet transformer_feedback_from_session(OpuSession& session,
                                                           const TransformerConfig& config) {
    std::vector<std::size_t> dims(config.n_blocks + 1, config.embed_dim);
    return FeedbackMatrixSet::from_session(session, dims);
}

struct LmEvaluation {
    double loss = 0.0;
    double accuracy = 0.0;  // next-token top-1, in percent
};

inline LmEvaluation evaluate_lm(const TransformerModel& model, const std::vector<int>& tokens,
                                const std::vector<std::size_t>& window_starts) {
    LmEvaluation out;
    if (window_starts.empty()) return out;
    const std::size_t c = model.config.context_size;
    std::size_t predictions = 0, hits = 0;
    for (std::size_t start : window_starts) {
        std::span<const int> window(tokens.data() + start, c);
        std::span<const int> targets(tokens.data() + start + 1, c);
        const ForwardCache cache = forward_transformer(model, window);
        out.loss += lm_loss(cache.logits, targets).loss;
        for (std::size_t s = 0; s < c; ++s) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < model.config.vocab_size; ++i) {
                if (cache.logits(s, i) > cache.logits(s, best)) best = i;
            }
            hits += static_cast<int>(best) == targets[s] ? 1 : 0;
            predictions += 1;
        }
    }
    out.loss /= static_cast<double>(window_starts.size());
    out.accuracy = 100.0 * static_cast<double>(hits) / static_cast<double>(predictions);
    return out;
}

// Next-token training over sliding windows of context_size tokens. Adam with
// cosine learning-rate decay is the paper-style configuration; the feedback
// algorithms share the per-block strategy of backward_transformer.
inline TrainingTrace train_lm(TransformerModel& model, const std::vector<int>& tokens,
                              const TrainConfig& config, OpuSession* session = nullptr) {
    using clock = std::chrono::steady_clock;
    const auto t_start = clock::now();
    const TransformerConfig& tc = model.config;
    tc.validate();

    const std::size_t c = tc.context_size;
    if (tokens.size() <= c) {
        throw std::invalid_argument("train_lm: need more tokens than the context size");
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= tc.vocab_size) {
            throw std::invalid_argument("train_lm: token id outside the vocabulary");
        }
    }
    if (config.batch_size == 0) throw std::invalid_argument("train_lm: batch_size must be >= 1");
    const bool optical = config.algorithm == TrainAlgorithm::odfa;
    if (optical && !session) throw std::invalid_argument("train_lm: odfa requires an OpuSession");
    if (optical && (session->cols() != tc.embed_dim ||
                    (tc.n_blocks > 1 && session->rows() < (tc.n_blocks - 1) * tc.embed_dim))) {
        throw std::invalid_argument("train_lm: session dims do not fit the model");
    }
    const bool needs_feedback =
        config.algorithm == TrainAlgorithm::dfa || config.algorithm == TrainAlgorithm::tdfa;
    const bool needs_threshold =
        config.algorithm == TrainAlgorithm::tdfa || config.algorithm == TrainAlgorithm::odfa;
    const LmMode mode = detail::lm_mode(config.algorithm);
    const bool per_position = config.granularity == ProjectionGranularity::per_sample;

    // Window start offsets, then a fixed seeded validation split.
    std::vector<std::size_t> starts;
    const std::size_t stride = std::max<std::size_t>(1, config.window_stride);
    for (std::size_t p = 0; p + c < tokens.size(); p += stride) starts.push_back(p);
    {
        auto engine = make_engine(mix_seed(config.seed, 0x5aa17ULL));
        std::shuffle(starts.begin(), starts.end(), engine);
    }
    const std::size_t val_count = std::max<std::size_t>(
        1, static_cast<std::size_t>(config.validation_fraction *
                                    static_cast<double>(starts.size())));
    if (starts.size() <= val_count) {
        throw std::invalid_argument("train_lm: not enough windows for the validation split");
    }
    std::vector<std::size_t> val_starts(starts.begin(), starts.begin() + val_count);
    std::vector<std::size_t> train_starts(starts.begin() + val_count, starts.end());

    FeedbackMatrixSet digital_fb;
    if (needs_feedback) {
        digital_fb = transformer_feedback(tc, mix_seed(config.seed, 0xfbULL));
    }
    LmFeedback feedback;
    feedback.digital = needs_feedback ? &digital_fb : nullptr;
    feedback.session = session;
    feedback.rescale = config.rescale_ternary_feedback;
    if (optical) session->set_rescale_feedback(config.rescale_ternary_feedback);

    OptimizerState optimizer(config.optimizer);
    TrainingTrace trace;
    trace.config_hash = config.config_hash;
    trace.alignment_layers = 0;

    const std::size_t steps_per_epoch =
        (train_starts.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    double threshold = config.threshold;

    auto wall_seconds = [&]() {
        if (!config.record_wall_time) return 0.0;
        return std::chrono::duration<double>(clock::now() - t_start).count();
    };

    auto emit_epoch_record = [&](std::uint64_t step) {
        const LmEvaluation eval = evaluate_lm(model, tokens, val_starts);
        TraceRecord rec;
        rec.step = step;
        rec.split = "val";
        rec.loss = eval.loss;
        rec.accuracy = eval.accuracy;
        rec.optical_seconds = session ? session->optical_seconds() : 0.0;
        rec.wall_seconds = wall_seconds();
        rec.config_hash = config.config_hash;
        trace.records.push_back(std::move(rec));
    };

    emit_epoch_record(0);

    std::uint64_t global_step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        auto engine = make_engine(mix_seed(config.seed, 0xe90cULL, epoch));
        std::shuffle(train_starts.begin(), train_starts.end(), engine);
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            const std::size_t begin = step * config.batch_size;
            const std::size_t end = std::min(begin + config.batch_size, train_starts.size());
            const std::size_t batch = end - begin;
            const double inv_batch = 1.0 / static_cast<double>(batch);

            TransformerModel grads = TransformerModel::zeros_like(tc);
            double batch_loss = 0.0;
            const bool feedback_mode = mode == LmMode::dfa || mode == LmMode::tdfa ||
                                       mode == LmMode::odfa;

            std::vector<ForwardCache> caches;
            std::vector<LmLoss> losses;
            caches.reserve(batch);
            losses.reserve(batch);
            Tensor ep_batch_mean({tc.embed_dim});
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t start = train_starts[i];
                std::span<const int> window(tokens.data() + start, c);
                std::span<const int> targets(tokens.data() + start + 1, c);
                caches.push_back(forward_transformer(model, window));
                losses.push_back(lm_loss(caches.back().logits, targets));
                batch_loss += losses.back().loss * inv_batch;
                if (feedback_mode && !per_position) {
                    const Tensor e_p =
                        projector_input_gradient(model, caches.back(), losses.back().dlogits);
                    const double w = inv_batch / static_cast<double>(e_p.rows());
                    for (std::size_t s = 0; s < e_p.rows(); ++s) {
                        for (std::size_t d = 0; d < tc.embed_dim; ++d) {
                            ep_batch_mean[d] += e_p(s, d) * w;
                        }
                    }
                }
            }
            if (!std::isfinite(batch_loss)) {
                throw numerical_error("non-finite training loss at step " +
                                      std::to_string(global_step + 1));
            }

            // One-time threshold selection from the first batch error.
            if (feedback_mode && needs_threshold && threshold < 0.0) {
                Tensor e0 = ep_batch_mean;
                if (per_position) {
                    e0 = Tensor({tc.embed_dim});
                    const Tensor e_p = projector_input_gradient(model, caches[0],
                                                                losses[0].dlogits);
                    const double inv_s = 1.0 / static_cast<double>(e_p.rows());
                    for (std::size_t s = 0; s < e_p.rows(); ++s) {
                        for (std::size_t d = 0; d < tc.embed_dim; ++d) {
                            e0[d] += e_p(s, d) * inv_s;
                        }
                    }
                }
                if (optical) {
                    threshold = select_threshold(e0, *session);
                } else {
                    threshold = select_threshold(e0, [&](const Tensor& v) {
                        std::size_t total = 0;
                        for (const auto& b : digital_fb.per_layer) total += b.rows();
                        Tensor stacked({std::max<std::size_t>(total, 1)});
                        std::size_t off = 0;
                        for (const auto& b : digital_fb.per_layer) {
                            const Tensor s = matvec(b, v);
                            for (std::size_t k = 0; k < s.size(); ++k) stacked[off + k] = s[k];
                            off += s.size();
                        }
                        return stacked;
                    });
                }
            }
            if (optical && threshold >= 0.0 && !session->has_threshold()) {
                session->set_threshold(threshold);
            }
            feedback.threshold = threshold >= 0.0 ? threshold : 0.0;

            // per_batch: one projection of the batch-mean error per step,
            // shared by every window; per_sample: one projection per
            // position inside backward_transformer.
            std::vector<Tensor> shared_bands;
            if (feedback_mode && !per_position && tc.n_blocks > 1) {
                shared_bands =
                    feedback.project(ep_batch_mean, mode, tc.n_blocks - 1, tc.embed_dim);
            }

            for (std::size_t i = 0; i < batch; ++i) {
                TransformerModel sample_grads =
                    !feedback_mode
                        ? backward_transformer(model, caches[i], losses[i].dlogits, mode)
                        : (per_position
                               ? backward_transformer(model, caches[i], losses[i].dlogits, mode,
                                                      &feedback, true)
                               : backward_transformer(model, caches[i], losses[i].dlogits, mode,
                                                      &feedback, false,
                                                      tc.n_blocks > 1 ? &shared_bands : nullptr));
                accumulate_gradients(grads, sample_grads, inv_batch);
            }

            double lr_scale = 1.0;
            if (config.cosine_lr_decay && total_steps > 0) {
                lr_scale = 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(global_step) /
                                                 static_cast<double>(total_steps)));
            }
            std::vector<const Tensor*> grad_ptrs;
            for (Tensor* t : grads.parameters()) grad_ptrs.push_back(t);
            optimizer.apply_update(model.parameters(), grad_ptrs, lr_scale);

            global_step += 1;
            TraceRecord rec;
            rec.step = global_step;
            rec.split = "train";
            rec.loss = batch_loss;
            rec.optical_seconds = session ? session->optical_seconds() : 0.0;
            rec.wall_seconds = wall_seconds();
            rec.config_hash = config.config_hash;
            trace.records.push_back(std::move(rec));
        }
        emit_epoch_record(global_step);
    }
    return trace;
}

}  // namespace photondfa
