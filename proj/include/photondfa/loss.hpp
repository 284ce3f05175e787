#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include "photondfa/tensor.hpp"

namespace photondfa {

// Numerically stable softmax; optional temperature for sampling.
inline Tensor softmax(const Tensor& logits, double temperature = 1.0) {
    Tensor p = logits;
    const double inv_t = temperature > 0.0 ? 1.0 / temperature : 1.0;
    double m = p[0] * inv_t;
    for (std::size_t i = 0; i < p.size(); ++i) m = std::max(m, p[i] * inv_t);
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(p[i] * inv_t - m);
        sum += p[i];
    }
    for (std::size_t i = 0; i < p.size(); ++i) p[i] /= sum;
    return p;
}

struct SoftmaxCrossEntropy {
    double loss;
    Tensor error;  // softmax(logits) - onehot(target); the error signal at the last layer
};

inline SoftmaxCrossEntropy softmax_cross_entropy(const Tensor& logits, std::size_t target) {
    if (logits.rank() != 1 || logits.size() == 0) {
        throw shape_error("softmax_cross_entropy: logits must be a nonempty vector, got " +
                          logits.shape_string());
    }
    if (target >= logits.size()) {
        throw std::out_of_range("softmax_cross_entropy: target index " + std::to_string(target) +
                                " out of range for " + std::to_string(logits.size()) + " logits");
    }
    double m = logits[0];
    for (std::size_t i = 0; i < logits.size(); ++i) m = std::max(m, logits[i]);
    double sum = 0.0;
    Tensor e({logits.size()});
    for (std::size_t i = 0; i < logits.size(); ++i) {
        e[i] = std::exp(logits[i] - m);
        sum += e[i];
    }
    const double log_sum = std::log(sum);
    const double loss = -(logits[target] - m - log_sum);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] /= sum;
    e[target] -= 1.0;
    return {loss, std::move(e)};
}

}  // namespace photondfa
