#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "photondfa/tensor.hpp"

namespace photondfa {

enum class OptimizerKind { sgd_momentum, adam };

inline const char* to_string(OptimizerKind k) {
    return k == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adam";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
    if (s == "adam") return OptimizerKind::adam;
    throw std::invalid_argument("unknown optimizer: " + s);
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd_momentum;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

// Moment buffers are allocated on first use and must then match the
// parameter shapes exactly for the rest of the run.
class OptimizerState {
public:
    OptimizerState() = default;
    explicit OptimizerState(OptimizerConfig config) : config_(config) {}

    OptimizerConfig& config() { return config_; }
    const OptimizerConfig& config() const { return config_; }
    std::uint64_t step_count() const { return step_count_; }

    // lr_scale rescales the configured learning rate for this call only
    // (cosine decay schedules pass a factor in [0,1]).
    void apply_update(const std::vector<Tensor*>& params,
                      const std::vector<const Tensor*>& grads, double lr_scale = 1.0) {
        if (params.size() != grads.size()) {
            throw std::invalid_argument("apply_update: " + std::to_string(params.size()) +
                                        " params vs " + std::to_string(grads.size()) + " grads");
        }
        if (m1_.empty()) {
            m1_.reserve(params.size());
            for (const Tensor* p : params) m1_.push_back(Tensor::zeros(p->shape()));
            if (config_.kind == OptimizerKind::adam) {
                m2_.reserve(params.size());
                for (const Tensor* p : params) m2_.push_back(Tensor::zeros(p->shape()));
            }
        }
        if (m1_.size() != params.size()) {
            throw std::invalid_argument("apply_update: optimizer state tracks " +
                                        std::to_string(m1_.size()) + " tensors, got " +
                                        std::to_string(params.size()));
        }
        step_count_ += 1;
        const double lr = config_.learning_rate * lr_scale;
        for (std::size_t t = 0; t < params.size(); ++t) {
            Tensor& p = *params[t];
            const Tensor& g = *grads[t];
            require_same_shape(p, g, "apply_update");
            require_same_shape(p, m1_[t], "apply_update moment buffer");
            if (config_.kind == OptimizerKind::sgd_momentum) {
                Tensor& v = m1_[t];
                const double mu = config_.momentum;
                for (std::size_t i = 0; i < p.size(); ++i) {
                    v[i] = mu * v[i] + g[i];
                    p[i] -= lr * v[i];
                }
            } else {
                Tensor& m = m1_[t];
                Tensor& v = m2_[t];
                const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
                for (std::size_t i = 0; i < p.size(); ++i) {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    const double mhat = m[i] / c1;
                    const double vhat = v[i] / c2;
                    p[i] -= lr * mhat / (std::sqrt(vhat) + config_.adam_eps);
                }
            }
        }
    }

private:
    OptimizerConfig config_;
    std::uint64_t step_count_ = 0;
    std::vector<Tensor> m1_;  // velocity (sgd) or first moment (adam)
    std::vector<Tensor> m2_;  // second moment (adam only)
};

}  // namespace photondfa
