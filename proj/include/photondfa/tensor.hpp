#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace photondfa {

class shape_error : public std::invalid_argument {
public:
    explicit shape_error(const std::string& what) : std::invalid_argument(what) {}
};

// Dense row-major tensor of 64-bit reals. All library math runs in double;
// float32 exists only as a checkpoint storage option.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != data_.size()) {
            throw shape_error("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor vector(std::vector<double> data) {
        std::size_t n = data.size();
        return Tensor({n}, std::move(data));
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    std::size_t rows() const { require_rank(2); return shape_[0]; }
    std::size_t cols() const { require_rank(2); return shape_[1]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    std::string shape_string() const { return shape_string(shape_); }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << " x ";
            os << s[i];
        }
        os << "]";
        return os.str();
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw shape_error("zero dimension in shape " + shape_string(shape));
            n *= d;
        }
        return shape.empty() ? 0 : n;
    }

private:
    void require_rank(std::size_t r) const {
        if (shape_.size() != r) {
            throw shape_error("expected rank-" + std::to_string(r) + " tensor, got shape " +
                              shape_string(shape_));
        }
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw shape_error(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                          b.shape_string());
    }
}

// h = W.a + b. Accumulation is left to right over the columns of each row,
// then the bias is added once; oracles that follow the same order agree to
// the last bit.
inline Tensor affine_forward(const Tensor& w, const Tensor& a, const Tensor& b) {
    if (w.rank() != 2 || a.rank() != 1 || b.rank() != 1 || w.cols() != a.size() ||
        w.rows() != b.size()) {
        throw shape_error("affine_forward: W " + w.shape_string() + ", a " + a.shape_string() +
                          ", b " + b.shape_string() + " are not conformant");
    }
    Tensor h({w.rows()});
    const std::size_t rows = w.rows(), cols = w.cols();
    for (std::size_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        const double* wr = w.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) acc += wr[j] * a[j];
        h[i] = acc + b[i];
    }
    return h;
}

// y = W.x without bias.
inline Tensor matvec(const Tensor& w, const Tensor& x) {
    if (w.rank() != 2 || x.rank() != 1 || w.cols() != x.size()) {
        throw shape_error("matvec: W " + w.shape_string() + " vs x " + x.shape_string());
    }
    Tensor y({w.rows()});
    const std::size_t rows = w.rows(), cols = w.cols();
    for (std::size_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        const double* wr = w.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) acc += wr[j] * x[j];
        y[i] = acc;
    }
    return y;
}

// y = W^T.x; accumulated row by row so each output element sees the same
// fixed addition order on every run.
inline Tensor matvec_transposed(const Tensor& w, const Tensor& x) {
    if (w.rank() != 2 || x.rank() != 1 || w.rows() != x.size()) {
        throw shape_error("matvec_transposed: W " + w.shape_string() + " vs x " +
                          x.shape_string());
    }
    Tensor y({w.cols()});
    const std::size_t rows = w.rows(), cols = w.cols();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* wr = w.data() + i * cols;
        const double xi = x[i];
        for (std::size_t j = 0; j < cols; ++j) y[j] += wr[j] * xi;
    }
    return y;
}

// G += d.a^T
inline void outer_accumulate(Tensor& g, const Tensor& d, const Tensor& a) {
    if (g.rank() != 2 || g.rows() != d.size() || g.cols() != a.size()) {
        throw shape_error("outer_accumulate: G " + g.shape_string() + ", d " + d.shape_string() +
                          ", a " + a.shape_string());
    }
    const std::size_t rows = g.rows(), cols = g.cols();
    for (std::size_t i = 0; i < rows; ++i) {
        double* gr = g.data() + i * cols;
        const double di = d[i];
        for (std::size_t j = 0; j < cols; ++j) gr[j] += di * a[j];
    }
}

inline void axpy(Tensor& y, double alpha, const Tensor& x) {
    require_same_shape(y, x, "axpy");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

inline void scale_inplace(Tensor& t, double alpha) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] *= alpha;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double max_abs(const Tensor& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i]));
    return m;
}

}  // namespace photondfa
