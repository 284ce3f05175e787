#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "photondfa/dataset.hpp"
#include "photondfa/mlp.hpp"
#include "photondfa/optimizer.hpp"
#include "photondfa/opu.hpp"

namespace photondfa {

class numerical_error : public std::runtime_error {
public:
    explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

enum class TrainAlgorithm { bp, dfa, tdfa, odfa, shlw };

inline const char* to_string(TrainAlgorithm a) {
    switch (a) {
        case TrainAlgorithm::bp: return "bp";
        case TrainAlgorithm::dfa: return "dfa";
        case TrainAlgorithm::tdfa: return "tdfa";
        case TrainAlgorithm::odfa: return "odfa";
        case TrainAlgorithm::shlw: return "shlw";
    }
    return "?";
}

inline TrainAlgorithm algorithm_from_string(const std::string& s) {
    if (s == "bp") return TrainAlgorithm::bp;
    if (s == "dfa") return TrainAlgorithm::dfa;
    if (s == "tdfa") return TrainAlgorithm::tdfa;
    if (s == "odfa") return TrainAlgorithm::odfa;
    if (s == "shlw") return TrainAlgorithm::shlw;
    throw std::invalid_argument("unknown algorithm: " + s);
}

enum class ProjectionGranularity { per_batch, per_sample };

inline const char* to_string(ProjectionGranularity g) {
    return g == ProjectionGranularity::per_batch ? "per_batch" : "per_sample";
}

struct TrainConfig {
    TrainAlgorithm algorithm = TrainAlgorithm::bp;
    std::size_t batch_size = 100;
    std::size_t epochs = 50;
    OptimizerConfig optimizer{};
    std::uint64_t seed = 1;
    NoiseSpec noise{};  // digital feedback-path noise for dfa/tdfa runs
    ProjectionGranularity granularity = ProjectionGranularity::per_batch;
    double threshold = -1.0;  // < 0 selects from the first batch error
    bool rescale_ternary_feedback = false;  // restore |e| scale after projection
    double validation_fraction = 0.1;
    std::size_t window_stride = 1;  // language-model window spacing
    bool cosine_lr_decay = false;
    bool record_wall_time = true;
    std::size_t alignment_probe_samples = 16;
    std::string config_hash = "0";
};

struct TraceRecord {
    std::uint64_t step = 0;
    std::string split;  // "train" per step, "val" per epoch
    double loss = 0.0;
    std::optional<double> accuracy;
    std::vector<std::optional<double>> alignment;
    double optical_seconds = 0.0;
    double wall_seconds = 0.0;
    std::string config_hash;
};

struct TrainingTrace {
    std::vector<TraceRecord> records;
    std::size_t alignment_layers = 0;
    std::string config_hash;

    const TraceRecord* last_of(const std::string& split) const {
        for (auto it = records.rbegin(); it != records.rend(); ++it) {
            if (it->split == split) return &*it;
        }
        return nullptr;
    }

    double final_test_accuracy() const {
        const TraceRecord* r = last_of("val");
        if (!r || !r->accuracy) throw std::logic_error("trace has no validation records");
        return *r->accuracy;
    }

    double final_validation_loss() const {
        const TraceRecord* r = last_of("val");
        if (!r) throw std::logic_error("trace has no validation records");
        return r->loss;
    }

    double min_validation_loss() const {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& r : records) {
            if (r.split == "val") m = std::min(m, r.loss);
        }
        return m;
    }

    // Fixed column order; absent values are written as empty cells.
    void to_csv(std::ostream& os) const {
        os << "# config_hash=" << config_hash << "\n";
        os << "step,split,loss,accuracy";
        for (std::size_t l = 0; l < alignment_layers; ++l) os << ",align_l" << (l + 1);
        os << ",optical_seconds,wall_seconds\n";
        char buf[64];
        auto num = [&buf](double v) {
            std::snprintf(buf, sizeof buf, "%.12g", v);
            return std::string(buf);
        };
        for (const auto& r : records) {
            os << r.step << "," << r.split << "," << num(r.loss) << ",";
            if (r.accuracy) os << num(*r.accuracy);
            for (std::size_t l = 0; l < alignment_layers; ++l) {
                os << ",";
                if (l < r.alignment.size() && r.alignment[l]) os << num(*r.alignment[l]);
            }
            os << "," << num(r.optical_seconds) << "," << num(r.wall_seconds) << "\n";
        }
    }
};

inline double evaluate_mean_loss(const MlpModel& model, const std::vector<Tensor>& images,
                                 const std::vector<int>& labels,
                                 const std::vector<std::size_t>& indices) {
    double acc = 0.0;
    for (std::size_t idx : indices) {
        const MlpCache cache = forward_mlp(model, images[idx]);
        acc += softmax_cross_entropy(cache.activations.back(),
                                     static_cast<std::size_t>(labels[idx]))
                   .loss;
    }
    return acc / static_cast<double>(indices.size());
}

inline double evaluate_accuracy(const MlpModel& model, const std::vector<Tensor>& images,
                                const std::vector<int>& labels) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const MlpCache cache = forward_mlp(model, images[i]);
        const Tensor& logits = cache.activations.back();
        std::size_t best = 0;
        for (std::size_t k = 1; k < logits.size(); ++k) {
            if (logits[k] > logits[best]) best = k;
        }
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(images.size());
}

namespace detail {

// Digital feedback path with the three noise models of the simulation
// studies: per-step matrix noise, additive signal noise, and permanent
// drift. sigma = 0 never draws from a generator.
class DigitalFeedbackPath {
public:
    DigitalFeedbackPath(FeedbackMatrixSet fb, NoiseSpec noise)
        : feedback_(std::move(fb)), noise_(noise) {}

    const FeedbackMatrixSet& feedback() const { return feedback_; }

    void begin_step(std::uint64_t step) {
        step_ = step;
        if (noise_.kind == NoiseKind::drift && noise_.sigma > 0.0) {
            for (std::size_t l = 0; l < feedback_.per_layer.size(); ++l) {
                perturb(feedback_.per_layer[l], mix_seed(noise_.seed, step_ * 131 + l, 0xd1ULL));
            }
        }
        projection_in_step_ = 0;
    }

    std::vector<Tensor> project(const Tensor& v) {
        std::vector<Tensor> signals;
        signals.reserve(feedback_.per_layer.size());
        const bool matrix_noise = noise_.kind == NoiseKind::tm_noise && noise_.sigma > 0.0;
        const bool signal_noise = noise_.kind == NoiseKind::measurement_noise && noise_.sigma > 0.0;
        for (std::size_t l = 0; l < feedback_.per_layer.size(); ++l) {
            Tensor s;
            if (matrix_noise) {
                Tensor noisy = feedback_.per_layer[l];
                perturb(noisy, mix_seed(noise_.seed, step_ * 131 + l, 0x7eULL));
                s = matvec(noisy, v);
            } else {
                s = matvec(feedback_.per_layer[l], v);
            }
            if (signal_noise) {
                auto engine = make_engine(mix_seed(
                    noise_.seed, (step_ << 16) | (projection_in_step_ << 4) | l, 0x3eULL));
                std::normal_distribution<double> dist(0.0, 1.0);
                for (std::size_t i = 0; i < s.size(); ++i) s[i] += noise_.sigma * dist(engine);
            }
            signals.push_back(std::move(s));
        }
        projection_in_step_ += 1;
        return signals;
    }

private:
    void perturb(Tensor& t, std::uint64_t seed) const {
        auto engine = make_engine(seed);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] += noise_.sigma * dist(engine);
    }

    FeedbackMatrixSet feedback_;
    NoiseSpec noise_;
    std::uint64_t step_ = 0;
    std::uint64_t projection_in_step_ = 0;
};

}  // namespace detail

// Mini-batch training with the selected algorithm. Gradients are averaged
// over the batch; per_batch granularity projects the batch-mean error once
// per step, per_sample projects every sample's error.
inline TrainingTrace train(MlpModel& model, const Dataset& dataset, const TrainConfig& config,
                           OpuSession* session = nullptr,
                           FeedbackMatrixSet* external_feedback = nullptr) {
    using clock = std::chrono::steady_clock;
    const auto t_start = clock::now();

    // Config validation happens before any training step.
    if (dataset.train_images.empty() || dataset.test_images.empty()) {
        throw std::invalid_argument("train: empty dataset");
    }
    if (dataset.train_images.size() != dataset.train_labels.size()) {
        throw std::invalid_argument("train: image/label count mismatch");
    }
    if (config.batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
    if (model.input_dim() != dataset.input_dim || model.output_dim() != dataset.n_classes) {
        throw std::invalid_argument("train: model dims " + Tensor::shape_string(model.dims) +
                                    " do not fit dataset (" + std::to_string(dataset.input_dim) +
                                    " -> " + std::to_string(dataset.n_classes) + ")");
    }
    const bool optical = config.algorithm == TrainAlgorithm::odfa;
    if (optical && !session) {
        throw std::invalid_argument("train: odfa requires an OpuSession");
    }
    if (optical && (session->rows() < FeedbackMatrixSet::hidden_rows(model.dims) ||
                    session->cols() != model.output_dim())) {
        throw std::invalid_argument("train: session dims do not fit the model");
    }
    if (optical) session->set_rescale_feedback(config.rescale_ternary_feedback);
    const bool needs_feedback =
        config.algorithm == TrainAlgorithm::dfa || config.algorithm == TrainAlgorithm::tdfa;
    const bool needs_threshold =
        config.algorithm == TrainAlgorithm::tdfa || config.algorithm == TrainAlgorithm::odfa;

    // Fixed seeded validation split.
    std::vector<std::size_t> order(dataset.train_images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    {
        auto engine = make_engine(mix_seed(config.seed, 0x5aa17ULL));
        std::shuffle(order.begin(), order.end(), engine);
    }
    const std::size_t val_count = std::max<std::size_t>(
        1, static_cast<std::size_t>(config.validation_fraction *
                                    static_cast<double>(order.size())));
    std::vector<std::size_t> val_indices(order.begin(), order.begin() + val_count);
    std::vector<std::size_t> train_indices(order.begin() + val_count, order.end());
    if (train_indices.empty()) throw std::invalid_argument("train: no data left after split");

    std::optional<detail::DigitalFeedbackPath> digital;
    if (needs_feedback) {
        FeedbackMatrixSet fb =
            external_feedback && !external_feedback->per_layer.empty()
                ? *external_feedback
                : FeedbackMatrixSet::gaussian(model.dims, mix_seed(config.seed, 0xfbULL));
        digital.emplace(std::move(fb), config.noise);
    }

    // Feedback set used for the per-epoch alignment diagnostic; for optical
    // runs the effective matrix is probed once, before any training.
    std::optional<FeedbackMatrixSet> alignment_fb;
    if (needs_feedback) {
        alignment_fb = digital->feedback();
    } else if (optical && session->noise().kind == NoiseKind::none) {
        alignment_fb = FeedbackMatrixSet::from_session(*session, model.dims);
    }

    OptimizerState optimizer(config.optimizer);
    TrainingTrace trace;
    trace.config_hash = config.config_hash;
    trace.alignment_layers = model.layer_count() - 1;

    const std::size_t steps_per_epoch =
        (train_indices.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;

    double threshold = config.threshold;

    auto wall_seconds = [&]() {
        if (!config.record_wall_time) return 0.0;
        return std::chrono::duration<double>(clock::now() - t_start).count();
    };

    auto emit_epoch_record = [&](std::uint64_t step) {
        TraceRecord rec;
        rec.step = step;
        rec.split = "val";
        rec.loss = evaluate_mean_loss(model, dataset.train_images, dataset.train_labels,
                                      val_indices);
        rec.accuracy = evaluate_accuracy(model, dataset.test_images, dataset.test_labels);
        if (alignment_fb) {
            std::vector<double> sums(trace.alignment_layers, 0.0);
            std::vector<std::size_t> counts(trace.alignment_layers, 0);
            const std::size_t probes = std::min(config.alignment_probe_samples, val_indices.size());
            for (std::size_t p = 0; p < probes; ++p) {
                const std::size_t idx = val_indices[p];
                const MlpCache cache = forward_mlp(model, dataset.train_images[idx]);
                const auto sce = softmax_cross_entropy(
                    cache.activations.back(), static_cast<std::size_t>(dataset.train_labels[idx]));
                const auto cos = alignment_probe(model, cache, sce.error, *alignment_fb);
                for (std::size_t l = 0; l < cos.size(); ++l) {
                    if (cos[l]) {
                        sums[l] += *cos[l];
                        counts[l] += 1;
                    }
                }
            }
            for (std::size_t l = 0; l < trace.alignment_layers; ++l) {
                if (counts[l] > 0) {
                    rec.alignment.push_back(sums[l] / static_cast<double>(counts[l]));
                } else {
                    rec.alignment.push_back(std::nullopt);
                }
            }
        }
        rec.optical_seconds = session ? session->optical_seconds() : 0.0;
        rec.wall_seconds = wall_seconds();
        rec.config_hash = config.config_hash;
        trace.records.push_back(std::move(rec));
    };

    emit_epoch_record(0);

    std::uint64_t global_step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        auto engine = make_engine(mix_seed(config.seed, 0xe90cULL, epoch));
        std::shuffle(train_indices.begin(), train_indices.end(), engine);

        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            const std::size_t begin = step * config.batch_size;
            const std::size_t end = std::min(begin + config.batch_size, train_indices.size());
            const std::size_t batch = end - begin;
            const double inv_batch = 1.0 / static_cast<double>(batch);

            // Forward pass and per-sample errors.
            std::vector<MlpCache> caches;
            std::vector<Tensor> errors;
            caches.reserve(batch);
            errors.reserve(batch);
            double batch_loss = 0.0;
            Tensor mean_error({model.output_dim()});
            for (std::size_t i = begin; i < end; ++i) {
                const std::size_t idx = train_indices[i];
                caches.push_back(forward_mlp(model, dataset.train_images[idx]));
                auto sce = softmax_cross_entropy(
                    caches.back().activations.back(),
                    static_cast<std::size_t>(dataset.train_labels[idx]));
                batch_loss += sce.loss;
                axpy(mean_error, inv_batch, sce.error);
                errors.push_back(std::move(sce.error));
            }
            batch_loss *= inv_batch;
            if (!std::isfinite(batch_loss)) {
                throw numerical_error("non-finite training loss at step " +
                                      std::to_string(global_step + 1));
            }

            // One-time threshold selection from the first batch error.
            if (needs_threshold && threshold < 0.0) {
                if (optical) {
                    threshold = select_threshold(mean_error, *session);
                } else {
                    threshold = select_threshold(mean_error, [&](const Tensor& v) {
                        const auto bands = digital->project(v);
                        std::size_t total = 0;
                        for (const auto& b : bands) total += b.size();
                        Tensor stacked({total});
                        std::size_t off = 0;
                        for (const auto& b : bands) {
                            for (std::size_t i = 0; i < b.size(); ++i) stacked[off + i] = b[i];
                            off += b.size();
                        }
                        return stacked;
                    });
                }
            }
            if (optical && threshold >= 0.0 && !session->has_threshold()) {
                session->set_threshold(threshold);
            }

            if (digital) digital->begin_step(global_step);

            MlpGradients grads = MlpGradients::zeros_like(model);
            const bool per_batch = config.granularity == ProjectionGranularity::per_batch;

            switch (config.algorithm) {
                case TrainAlgorithm::bp: {
                    for (std::size_t i = 0; i < batch; ++i) {
                        grads.accumulate_scaled(backward_bp(model, caches[i], errors[i]),
                                                inv_batch);
                    }
                    break;
                }
                case TrainAlgorithm::shlw: {
                    const std::size_t last = model.layer_count() - 1;
                    for (std::size_t i = 0; i < batch; ++i) {
                        Tensor scaled = errors[i];
                        scale_inplace(scaled, inv_batch);
                        outer_accumulate(grads.weight_grads[last], scaled,
                                         caches[i].activations[last]);
                        axpy(grads.bias_grads[last], 1.0, scaled);
                    }
                    break;
                }
                case TrainAlgorithm::dfa:
                case TrainAlgorithm::tdfa: {
                    auto signal_vector = [&](const Tensor& e) {
                        if (config.algorithm == TrainAlgorithm::dfa) return e;
                        const TernaryCode code = ternarize(e, threshold);
                        const double factor =
                            config.rescale_ternary_feedback ? code.scale : 1.0;
                        Tensor v({e.size()});
                        for (std::size_t i = 0; i < v.size(); ++i) {
                            v[i] = (code.e_plus[i] - code.e_minus[i]) * factor;
                        }
                        return v;
                    };
                    if (per_batch) {
                        const auto signals = digital->project(signal_vector(mean_error));
                        for (std::size_t i = 0; i < batch; ++i) {
                            grads.accumulate_scaled(
                                backward_dfa_signal(model, caches[i], errors[i], signals),
                                inv_batch);
                        }
                    } else {
                        for (std::size_t i = 0; i < batch; ++i) {
                            const auto signals = digital->project(signal_vector(errors[i]));
                            grads.accumulate_scaled(
                                backward_dfa_signal(model, caches[i], errors[i], signals),
                                inv_batch);
                        }
                    }
                    break;
                }
                case TrainAlgorithm::odfa: {
                    if (per_batch) {
                        const Tensor s = session->project_feedback(mean_error);
                        const auto signals = split_bands(s, model.dims);
                        for (std::size_t i = 0; i < batch; ++i) {
                            grads.accumulate_scaled(
                                backward_dfa_signal(model, caches[i], errors[i], signals),
                                inv_batch);
                        }
                    } else {
                        for (std::size_t i = 0; i < batch; ++i) {
                            const Tensor s = session->project_feedback(errors[i]);
                            grads.accumulate_scaled(
                                backward_dfa_signal(model, caches[i], errors[i],
                                                    split_bands(s, model.dims)),
                                inv_batch);
                        }
                    }
                    break;
                }
            }

            std::vector<const Tensor*> grad_ptrs;
            for (std::size_t l = 0; l < model.layer_count(); ++l) {
                grad_ptrs.push_back(&grads.weight_grads[l]);
                grad_ptrs.push_back(&grads.bias_grads[l]);
            }
            double lr_scale = 1.0;
            if (config.cosine_lr_decay && total_steps > 0) {
                lr_scale = 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(global_step) /
                                                 static_cast<double>(total_steps)));
            }
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
    // Hand the feedback set back so callers can check constancy (drift is
    // the only noise kind allowed to mutate it).
    if (digital && external_feedback) *external_feedback = digital->feedback();
    return trace;
}

}  // namespace photondfa
