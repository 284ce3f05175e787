#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "photondfa/tensor.hpp"

namespace photondfa {

// Gridded field over time x latitude x longitude.
struct GridField {
    std::size_t t = 0, h = 0, w = 0;
    Tensor values;  // T x H x W

    GridField() = default;
    GridField(std::size_t t_, std::size_t h_, std::size_t w_)
        : t(t_), h(h_), w(w_), values(Tensor({t_, h_, w_})) {}

    double at(std::size_t ti, std::size_t hi, std::size_t wi) const {
        return values(ti, hi, wi);
    }
    double& at(std::size_t ti, std::size_t hi, std::size_t wi) { return values(ti, hi, wi); }
};

// Latitude-weighted global mean of one H x W slice:
//   <y> = (1/(H W)) sum_i sum_j sin(pi i / H) y_ij, i running 1..H.
// The index convention is kept exactly as published, including the zero
// weight it assigns to the last latitude row.
inline double global_mean(const Tensor& slice) {
    if (slice.rank() != 2) {
        throw shape_error("global_mean: expected an H x W slice, got " + slice.shape_string());
    }
    const std::size_t h = slice.rows(), w = slice.cols();
    double acc = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
        const double weight =
            std::sin(M_PI * static_cast<double>(i + 1) / static_cast<double>(h));
        for (std::size_t j = 0; j < w; ++j) acc += weight * slice(i, j);
    }
    return acc / static_cast<double>(h * w);
}

namespace detail {

inline void require_same_grid(const GridField& a, const GridField& b) {
    if (a.t != b.t || a.h != b.h || a.w != b.w) {
        throw shape_error("grid fields differ: " + std::to_string(a.t) + "x" +
                          std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " +
                          std::to_string(b.t) + "x" + std::to_string(b.h) + "x" +
                          std::to_string(b.w));
    }
}

inline Tensor time_mean(const GridField& f) {
    Tensor out({f.h, f.w});
    const double inv_t = 1.0 / static_cast<double>(f.t);
    for (std::size_t ti = 0; ti < f.t; ++ti) {
        for (std::size_t i = 0; i < f.h; ++i) {
            for (std::size_t j = 0; j < f.w; ++j) out(i, j) += f.at(ti, i, j) * inv_t;
        }
    }
    return out;
}

inline Tensor slice_at(const GridField& f, std::size_t ti) {
    Tensor out({f.h, f.w});
    for (std::size_t i = 0; i < f.h; ++i) {
        for (std::size_t j = 0; j < f.w; ++j) out(i, j) = f.at(ti, i, j);
    }
    return out;
}

// Time mean of the prediction's global mean: the common denominator of the
// published ratios, used exactly as written.
inline double denominator(const GridField& pred) {
    double acc = 0.0;
    for (std::size_t ti = 0; ti < pred.t; ++ti) acc += global_mean(slice_at(pred, ti));
    const double denom = acc / static_cast<double>(pred.t);
    if (denom == 0.0) throw std::domain_error("metric denominator is zero");
    return denom;
}

}  // namespace detail

// Spatial bias between the temporal means, normalized by the prediction's
// time-mean global mean.
inline double spatial_nrmse(const GridField& pred, const GridField& target) {
    detail::require_same_grid(pred, target);
    const Tensor mp = detail::time_mean(pred);
    const Tensor mt = detail::time_mean(target);
    Tensor sq({pred.h, pred.w});
    for (std::size_t i = 0; i < sq.size(); ++i) {
        const double d = mp[i] - mt[i];
        sq[i] = d * d;
    }
    return std::sqrt(global_mean(sq)) / detail::denominator(pred);
}

// Bias between the global means over time.
inline double global_nrmse(const GridField& pred, const GridField& target) {
    detail::require_same_grid(pred, target);
    double acc = 0.0;
    for (std::size_t ti = 0; ti < pred.t; ++ti) {
        const double d =
            global_mean(detail::slice_at(pred, ti)) - global_mean(detail::slice_at(target, ti));
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(pred.t)) / detail::denominator(pred);
}

inline double total_nrmse(const GridField& pred, const GridField& target, double alpha = 5.0) {
    return spatial_nrmse(pred, target) + alpha * global_nrmse(pred, target);
}

// Plain unweighted RMSE over every grid point; the fourth reported metric,
// which the source text names without an equation.
inline double rmse(const GridField& pred, const GridField& target) {
    detail::require_same_grid(pred, target);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const double d = pred.values[i] - target.values[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(pred.values.size()));
}

// --- grid field I/O ------------------------------------------------------
// Binary: raw little-endian f64 values with a JSON sidecar (path + ".json")
// giving {"T":..,"H":..,"W":..}. CSV: first line "T,H,W", then T*H lines of
// W comma-separated values.

inline void save_gridfield(const std::string& path, const GridField& f) {
    if (path.size() > 4 && path.substr(path.size() - 4) == ".csv") {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write grid field: " + path);
        out << f.t << "," << f.h << "," << f.w << "\n";
        char buf[64];
        for (std::size_t ti = 0; ti < f.t; ++ti) {
            for (std::size_t i = 0; i < f.h; ++i) {
                for (std::size_t j = 0; j < f.w; ++j) {
                    std::snprintf(buf, sizeof buf, "%.17g", f.at(ti, i, j));
                    out << (j ? "," : "") << buf;
                }
                out << "\n";
            }
        }
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write grid field: " + path);
    out.write(reinterpret_cast<const char*>(f.values.data()),
              static_cast<std::streamsize>(f.values.size() * sizeof(double)));
    nlohmann::json sidecar{{"T", f.t}, {"H", f.h}, {"W", f.w}};
    std::ofstream side(path + ".json", std::ios::trunc);
    side << sidecar.dump() << "\n";
}

inline GridField load_gridfield(const std::string& path) {
    if (path.size() > 4 && path.substr(path.size() - 4) == ".csv") {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open grid field: " + path);
        std::string header;
        if (!std::getline(in, header)) throw std::runtime_error("empty grid CSV: " + path);
        std::size_t t = 0, h = 0, w = 0;
        {
            std::istringstream hs(header);
            char comma;
            if (!(hs >> t >> comma >> h >> comma >> w)) {
                throw std::runtime_error("bad grid CSV header in " + path);
            }
        }
        GridField f(t, h, w);
        for (std::size_t ti = 0; ti < t; ++ti) {
            for (std::size_t i = 0; i < h; ++i) {
                std::string line;
                if (!std::getline(in, line)) {
                    throw std::runtime_error("truncated grid CSV: " + path);
                }
                std::istringstream ls(line);
                std::string cell;
                for (std::size_t j = 0; j < w; ++j) {
                    if (!std::getline(ls, cell, ',')) {
                        throw std::runtime_error("short row in grid CSV: " + path);
                    }
                    f.at(ti, i, j) = std::stod(cell);
                }
            }
        }
        return f;
    }
    std::ifstream side(path + ".json");
    if (!side) throw std::runtime_error("missing grid sidecar: " + path + ".json");
    nlohmann::json sidecar;
    side >> sidecar;
    GridField f(sidecar.at("T").get<std::size_t>(), sidecar.at("H").get<std::size_t>(),
                sidecar.at("W").get<std::size_t>());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open grid field: " + path);
    in.read(reinterpret_cast<char*>(f.values.data()),
            static_cast<std::streamsize>(f.values.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(f.values.size() * sizeof(double))) {
        throw std::runtime_error("grid field data shorter than sidecar shape: " + path);
    }
    return f;
}

}  // namespace photondfa
