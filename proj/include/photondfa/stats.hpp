#pragma once

#include <cmath>
#include <stdexcept>

#include "photondfa/tensor.hpp"

namespace photondfa {

class undefined_correlation : public std::domain_error {
public:
    explicit undefined_correlation(const std::string& what) : std::domain_error(what) {}
};

inline double mean(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    return acc / static_cast<double>(x.size());
}

inline double sample_variance(const Tensor& x) {
    const double mu = mean(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - mu) * (x[i] - mu);
    return acc / static_cast<double>(x.size() - 1);
}

inline double pearson_correlation(const Tensor& x, const Tensor& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw shape_error("pearson_correlation: need two equal-length vectors of length >= 2, got " +
                          x.shape_string() + " and " + y.shape_string());
    }
    const double mx = mean(x), my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw undefined_correlation("pearson_correlation: constant input");
    }
    return sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "cosine_similarity");
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw std::domain_error("cosine_similarity: zero vector");
    }
    return dot(a, b) / (na * nb);
}

// Fisher skewness m3 / m2^(3/2) over the raw sample.
inline double skewness(const Tensor& x) {
    const double mu = mean(x);
    double m2 = 0.0, m3 = 0.0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - mu;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    return m3 / std::pow(m2, 1.5);
}

inline double excess_kurtosis(const Tensor& x) {
    const double mu = mean(x);
    double m2 = 0.0, m4 = 0.0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - mu;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m4 /= n;
    return m4 / (m2 * m2) - 3.0;
}

}  // namespace photondfa
