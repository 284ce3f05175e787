#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "photondfa/tensor.hpp"

namespace photondfa {

enum class ActivationKind { identity, relu, tanh, sigmoid };

inline const char* to_string(ActivationKind g) {
    switch (g) {
        case ActivationKind::identity: return "identity";
        case ActivationKind::relu: return "relu";
        case ActivationKind::tanh: return "tanh";
        case ActivationKind::sigmoid: return "sigmoid";
    }
    return "?";
}

inline ActivationKind activation_from_string(const std::string& s) {
    if (s == "identity") return ActivationKind::identity;
    if (s == "relu") return ActivationKind::relu;
    if (s == "tanh") return ActivationKind::tanh;
    if (s == "sigmoid") return ActivationKind::sigmoid;
    throw std::invalid_argument("unknown activation: " + s);
}

inline double activate_scalar(ActivationKind g, double h) {
    switch (g) {
        case ActivationKind::identity: return h;
        case ActivationKind::relu: return h > 0.0 ? h : 0.0;
        case ActivationKind::tanh: return std::tanh(h);
        case ActivationKind::sigmoid: return 1.0 / (1.0 + std::exp(-h));
    }
    return h;
}

// relu'(0) is taken as 0.
inline double activation_derivative_scalar(ActivationKind g, double h) {
    switch (g) {
        case ActivationKind::identity: return 1.0;
        case ActivationKind::relu: return h > 0.0 ? 1.0 : 0.0;
        case ActivationKind::tanh: {
            const double t = std::tanh(h);
            return 1.0 - t * t;
        }
        case ActivationKind::sigmoid: {
            const double s = 1.0 / (1.0 + std::exp(-h));
            return s * (1.0 - s);
        }
    }
    return 1.0;
}

inline Tensor activate(ActivationKind g, const Tensor& h) {
    Tensor a = h;
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = activate_scalar(g, a[i]);
    return a;
}

inline Tensor activation_derivative(ActivationKind g, const Tensor& h) {
    Tensor d = h;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = activation_derivative_scalar(g, d[i]);
    return d;
}

}  // namespace photondfa
